"""
Trainer module for boxboost
Single-network and dual-network training loops with a per-step CSV loss log
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from augment import augment, draw_transform
from config import TrainConfig
from errors import ParameterError, ShapeError
from losses import FeatureMap, supervised_loss, total_loss
from mask_core import BinaryMask, ProbMap, TriLabelMask
from optim import AdamW
from toynet import NetworkState, backward, forward

logger = logging.getLogger(__name__)

SINGLE_TERMS = ("bce", "dice")
DUAL_TERMS = ("bce_r", "dice_r", "bce_p", "dice_p", "ic")


@dataclass
class Sample:
    """Training image with its supervision; mask-annotated samples have no uncertain pixels"""

    image: np.ndarray
    label: TriLabelMask
    record_id: str = ""
    from_box: bool = False

    @classmethod
    def from_mask(cls, image: np.ndarray, mask: BinaryMask, record_id: str = "") -> "Sample":
        return cls(image, TriLabelMask.from_binary(mask), record_id, False)


@dataclass
class TrainLog:
    """One row per optimizer step"""

    terms: Tuple[str, ...]
    rows: List[Dict] = field(default_factory=list)

    def add(self, step: int, epoch: int, loss: float, terms: Dict[str, float]):
        row = {"step": step, "epoch": epoch, "loss": loss}
        row.update({name: terms[name] for name in self.terms})
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["step", "epoch", "loss", *self.terms])

    def losses(self) -> List[float]:
        return [row["loss"] for row in self.rows]

    def write(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.8f", lineterminator="\n")
        return path


def _sigmoid_grad(probs: np.ndarray) -> np.ndarray:
    return probs * (1.0 - probs)


def _make_batch(items: Sequence[Sample], rng: np.random.Generator, cfg: TrainConfig,
                multiple: int) -> Tuple[np.ndarray, List[TriLabelMask]]:
    """Stack augmented samples; one scale is shared by the whole batch so sizes agree"""
    images, labels = [], []
    scale = draw_transform(rng).scale if cfg.augment else 1.0
    for sample in items:
        if cfg.augment:
            image, label = augment(sample.image, sample.label, int(rng.integers(2 ** 31)), scale, multiple)
        else:
            image, label = sample.image, sample.label
        images.append(image)
        labels.append(label)
    shapes = {np.shape(image) for image in images}
    if len(shapes) > 1:
        raise ShapeError(f"Batch mixes image sizes {sorted(shapes)}")
    return np.stack(images)[:, None], labels


def _multiple(*states: NetworkState) -> int:
    return max(state.config.downsample_factor for state in states)


class _Cycler:
    """Endless reshuffled pass over a list of samples"""

    def __init__(self, samples: Sequence[Sample], rng: np.random.Generator):
        self.samples = samples
        self.rng = rng
        self.order: List[int] = []

    def take(self, count: int) -> List[Sample]:
        out = []
        while len(out) < count:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.samples)))
            out.append(self.samples[self.order.pop(0)])
        return out


def train_single(state: NetworkState, samples: Sequence[Sample], cfg: TrainConfig,
                 log_path: Optional[str] = None) -> TrainLog:
    """
    Train one network with BCE + Dice over the certain pixels of each label

    Args:
        state: Network, updated in place
        samples: Mask-annotated samples (their labels have no uncertain pixels)
        cfg: Epochs, batch size, seed, augmentation and optimizer
        log_path: Optional CSV path for the step log

    Returns:
        TrainLog with terms bce and dice
    """
    if not samples:
        raise ParameterError("train_single needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamW(state, cfg.optimizer)
    log = TrainLog(SINGLE_TERMS)
    multiple = _multiple(state)
    batch_size = min(cfg.batch_size, len(samples))
    cycler = _Cycler(samples, rng)
    steps_per_epoch = math.ceil(len(samples) / batch_size)

    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            images, labels = _make_batch(cycler.take(batch_size), rng, cfg, multiple)
            logits, probs, cache = forward(state, images)
            n = len(labels)
            dlogits = np.zeros_like(logits)
            loss, terms = 0.0, dict.fromkeys(SINGLE_TERMS, 0.0)
            for i, label in enumerate(labels):
                result = supervised_loss(ProbMap(probs[i, 0]), label)
                dlogits[i, 0] = result.gradients["pred"] * _sigmoid_grad(probs[i, 0]) / n
                loss += result.value / n
                for name in SINGLE_TERMS:
                    terms[name] += result.terms[name] / n
            optimizer.step(backward(state, cache, dlogits))
            log.add(state.step, epoch, loss, terms)
            epoch_losses.append(loss)
            logger.debug(f"[{state.config.arch_id}] step {state.step}: loss={loss:.6f}")
        logger.info(f"[{state.config.arch_id}] epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(epoch_losses):.4f}")

    if log_path:
        log.write(log_path)
    return log


def train_dual(state_a: NetworkState, state_b: NetworkState,
               mask_samples: Sequence[Sample], box_samples: Sequence[Sample],
               cfg: TrainConfig, use_ic: bool = True,
               log_path: Optional[str] = None) -> TrainLog:
    """
    Train two networks together on mask-annotated samples and pseudo-labelled box samples

    Each batch takes half its items from each split when both are nonempty. Every item is
    supervised on its certain pixels for both networks; box items add the consistency term
    between the two networks' logits on their uncertain pixels when use_ic is set.

    Returns:
        TrainLog with terms bce_r, dice_r, bce_p, dice_p and ic (batch means)
    """
    if not mask_samples and not box_samples:
        raise ParameterError("train_dual needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    opt_a = AdamW(state_a, cfg.optimizer)
    opt_b = AdamW(state_b, cfg.optimizer)
    log = TrainLog(DUAL_TERMS)
    multiple = _multiple(state_a, state_b)

    sources = [s for s in (mask_samples, box_samples) if s]
    per_source = max(1, cfg.batch_size // len(sources))
    cyclers = [_Cycler(source, rng) for source in sources]
    steps_per_epoch = math.ceil(max(len(source) for source in sources) / per_source)
    logger.info(
        f"Dual training {state_a.config.arch_id}+{state_b.config.arch_id}: {len(mask_samples)} mask, "
        f"{len(box_samples)} box samples, {steps_per_epoch} steps/epoch, ic={'on' if use_ic else 'off'}"
    )

    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            items = []
            for cycler in cyclers:
                items += cycler.take(per_source)
            images, labels = _make_batch(items, rng, cfg, multiple)
            logits_a, probs_a, cache_a = forward(state_a, images)
            logits_b, probs_b, cache_b = forward(state_b, images)

            n = len(items)
            dlogits_a = np.zeros_like(logits_a)
            dlogits_b = np.zeros_like(logits_b)
            loss, terms = 0.0, dict.fromkeys(DUAL_TERMS, 0.0)
            for i, (sample, label) in enumerate(zip(items, labels)):
                result = total_loss(
                    ProbMap(probs_a[i, 0]), ProbMap(probs_b[i, 0]),
                    FeatureMap(logits_a[i]), FeatureMap(logits_b[i]),
                    label, use_ic=use_ic and sample.from_box,
                )
                g = result.gradients
                dlogits_a[i, 0] = (g["pred_r"] * _sigmoid_grad(probs_a[i, 0]) + g["f_r"][0]) / n
                dlogits_b[i, 0] = (g["pred_p"] * _sigmoid_grad(probs_b[i, 0]) + g["f_p"][0]) / n
                loss += result.value / n
                for name in DUAL_TERMS:
                    terms[name] += result.terms[name] / n

            grads_a = backward(state_a, cache_a, dlogits_a)
            grads_b = backward(state_b, cache_b, dlogits_b)
            opt_a.step(grads_a)
            opt_b.step(grads_b)
            log.add(state_a.step, epoch, loss, terms)
            epoch_losses.append(loss)
            logger.debug(f"step {state_a.step}: loss={loss:.6f} ic={terms['ic']:.6f}")
        logger.info(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(epoch_losses):.4f}")

    if log_path:
        log.write(log_path)
    return log
