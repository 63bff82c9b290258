"""
Configuration module for boxboost
Training, stage and ablation settings, config hashing and config-file loading
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

from dataset import CorpusSpec
from errors import ConfigError, DataIOError, ParameterError
from ffs import FfsConfig
from mask_core import DEFAULT_BINARIZE_THRESHOLD
from optim import AdamWConfig

logger = logging.getLogger(__name__)

SEED_ENV = "BOXBOOST_SEED"


def _reject_unknown(data: Dict, known: Iterable[str], what: str):
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"Unknown {what} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one training loop"""

    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> Dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
                "augment": self.augment, "optimizer": self.optimizer.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        _reject_unknown(data, cls.__dataclass_fields__, "training config")
        fields = dict(data)
        if isinstance(fields.get("optimizer"), dict):
            fields["optimizer"] = AdamWConfig.from_dict(fields["optimizer"])
        return cls(**fields)


class Setting(str, Enum):
    """Ablation settings; each one adds a mechanism to the previous"""

    BASELINE = "baseline"
    FFS = "+FFS"
    FFS_IC = "+FFS+IC"

    @property
    def use_ffs(self) -> bool:
        return self != Setting.BASELINE

    @property
    def use_ic(self) -> bool:
        return self == Setting.FFS_IC


SETTINGS = (Setting.BASELINE, Setting.FFS, Setting.FFS_IC)


@dataclass(frozen=True)
class StageConfig:
    """Settings shared by the pretrain, predict, ffs, boost and eval stages"""

    setting: Setting = Setting.FFS_IC
    ffs: FfsConfig = field(default_factory=FfsConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    boost: TrainConfig = field(default_factory=TrainConfig)
    rounds: int = 1
    warm_start: bool = False
    eval_threshold: float = DEFAULT_BINARIZE_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "setting", Setting(self.setting))
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 <= self.eval_threshold <= 1.0:
            raise ParameterError(f"eval_threshold must be in [0, 1], got {self.eval_threshold}")

    @property
    def use_ffs(self) -> bool:
        return self.setting.use_ffs

    @property
    def use_ic(self) -> bool:
        return self.setting.use_ic

    def to_dict(self) -> Dict:
        return {
            "setting": self.setting.value,
            "ffs": self.ffs.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "boost": self.boost.to_dict(),
            "rounds": self.rounds,
            "warm_start": self.warm_start,
            "eval_threshold": self.eval_threshold,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "StageConfig":
        _reject_unknown(data, cls.__dataclass_fields__, "stage config")
        fields = dict(data)
        if isinstance(fields.get("ffs"), dict):
            fields["ffs"] = FfsConfig.from_dict(fields["ffs"])
        for key in ("pretrain", "boost"):
            if isinstance(fields.get(key), dict):
                fields[key] = TrainConfig.from_dict(fields[key])
        return cls(**fields)


def _desk_train(epochs: int, lr: float = 3e-3) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=8, optimizer=AdamWConfig(lr=lr))


@dataclass(frozen=True)
class AblationSpec:
    """Seeds, corpus and stage settings of an ablation run"""

    seeds: Tuple[int, ...] = (1, 2, 3)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    ffs: FfsConfig = field(default_factory=FfsConfig)
    pretrain: TrainConfig = field(default_factory=lambda: _desk_train(30))
    # boost fine-tunes the same-seed baselines at a lower rate
    boost: TrainConfig = field(default_factory=lambda: _desk_train(8, lr=1e-3))
    rounds: int = 1
    warm_start: bool = True
    eval_threshold: float = DEFAULT_BINARIZE_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ParameterError("Ablation needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ParameterError(f"Ablation seeds must be distinct, got {self.seeds}")
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")

    def stage_config(self, setting: Setting, seed: int) -> StageConfig:
        return StageConfig(
            setting=setting,
            ffs=self.ffs,
            pretrain=_with_seed(self.pretrain, seed),
            boost=_with_seed(self.boost, seed),
            rounds=self.rounds,
            warm_start=self.warm_start,
            eval_threshold=self.eval_threshold,
        )

    def to_dict(self) -> Dict:
        return {
            "seeds": list(self.seeds),
            "corpus": self.corpus.to_dict(),
            "ffs": self.ffs.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "boost": self.boost.to_dict(),
            "rounds": self.rounds,
            "warm_start": self.warm_start,
            "eval_threshold": self.eval_threshold,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AblationSpec":
        _reject_unknown(data, cls.__dataclass_fields__, "ablation spec")
        fields = dict(data)
        if isinstance(fields.get("corpus"), dict):
            fields["corpus"] = CorpusSpec.from_dict(fields["corpus"])
        if isinstance(fields.get("ffs"), dict):
            fields["ffs"] = FfsConfig.from_dict(fields["ffs"])
        for key in ("pretrain", "boost"):
            if isinstance(fields.get(key), dict):
                fields[key] = TrainConfig.from_dict(fields[key])
        return cls(**fields)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(cfg.epochs, cfg.batch_size, seed, cfg.augment, cfg.optimizer)


# ==================== HASHING ====================

def canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def config_hash(stage: str, config: Dict, inputs: Optional[Dict] = None) -> str:
    """sha256 over the stage name, its config and the digests of its inputs"""
    payload = {"stage": stage, "config": config, "inputs": inputs or {}}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 16), b""):
                digest.update(chunk)
    except OSError as e:
        raise DataIOError(f"Cannot hash '{path}': {e.strerror or e}")
    return digest.hexdigest()


def tree_digest(root: str) -> str:
    """Digest of every file under root, keyed by relative path"""
    digest = hashlib.sha256()
    if not os.path.isdir(root):
        raise DataIOError(f"Not a directory: '{root}'")
    for directory, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(directory, name)
            digest.update(os.path.relpath(path, root).replace(os.sep, "/").encode("utf-8"))
            digest.update(file_digest(path).encode("ascii"))
    return digest.hexdigest()


# ==================== SEEDS AND FILES ====================

def resolve_seed(flag: Optional[int] = None, file_value: Optional[int] = None,
                 environ: Optional[Dict[str, str]] = None) -> int:
    """--seed flag, else config file, else BOXBOOST_SEED, else 0"""
    if flag is not None:
        return int(flag)
    if file_value is not None:
        return int(file_value)
    env = os.environ if environ is None else environ
    raw = env.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}")


def load_config_file(path: str) -> Dict:
    """Read the "config" object of a run-summary JSON file"""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise DataIOError(f"Config file not found: '{path}'")
    except OSError as e:
        raise DataIOError(f"Cannot read config file '{path}': {e.strerror or e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file '{path}' is not valid JSON: {e.msg} (line {e.lineno})")
    if not isinstance(data, dict) or not isinstance(data.get("config"), dict):
        raise ConfigError(f"Config file '{path}' needs a top-level \"config\" object")
    return data["config"]
