"""
Pipeline module for boxboost
Runs the stages pretrain -> predict -> ffs -> boost -> eval in a run directory,
caching each stage by config hash, plus the ablation grid over settings and seeds
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import pandas as pd

import visualizations
from checkpoint import load_checkpoint, save_checkpoint
from config import (
    SETTINGS,
    AblationSpec,
    Setting,
    StageConfig,
    TrainConfig,
    canonical_json,
    config_hash,
    file_digest,
    tree_digest,
)
from dataset import (
    MANIFEST_NAME,
    CorpusManifest,
    CorpusSpec,
    Split,
    generate_corpus,
    load_manifest,
    read_image,
    read_mask,
    read_probmap,
    read_trilabel,
    write_probmap,
    write_trilabel,
)
from errors import BoxBoostError, ConfigError, DataIOError, EmptyPseudoSetError, ParseError
from evalbench import Benchmark, write_curve_csv
from ffs import FfsConfig, FfsItemResult, ffs_corpus, keep_rate, keep_rate_by_mode
from ledger import LEDGER_NAME, RunLedger, RunRecord
from mask_core import rasterize_boxes
from toynet import NetworkConfig, NetworkState, init_state, predict
from trainer import Sample, train_dual, train_single

logger = logging.getLogger(__name__)

SUMMARY_NAME = "run_summary.json"
ABLATION_COLUMNS = ["setting", "A_dice", "A_iou", "B_dice", "B_iou"]


def manifest_digest(manifest: CorpusManifest) -> str:
    """Digest of the records and of every file they reference"""
    digest = hashlib.sha256()
    for record in manifest:
        digest.update(canonical_json(record.to_dict()).encode("utf-8"))
        for path in (record.image, record.mask, record.gt):
            if path is not None:
                digest.update(file_digest(manifest.resolve(path)).encode("ascii"))
    return digest.hexdigest()


@dataclass
class AblationResult:
    table: pd.DataFrame
    per_seed: pd.DataFrame
    table_path: str
    per_seed_path: str


class Pipeline:
    """Runs pipeline stages inside one run directory"""

    def __init__(self, run_dir: str, workers: int = 1, charts: bool = False):
        """
        Args:
            run_dir: Directory holding the ledger and every stage's outputs
            workers: Thread count for per-item work inside a stage
            charts: Also render PNG charts next to the CSV outputs
        """
        self.run_dir = os.fspath(run_dir)
        self.workers = max(1, int(workers))
        self.charts = charts
        os.makedirs(self.run_dir, exist_ok=True)
        self.ledger = RunLedger(os.path.join(self.run_dir, LEDGER_NAME))
        self._digests: Dict[int, Tuple[CorpusManifest, str]] = {}

    def close(self):
        self.ledger.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    # ==================== STAGE PLUMBING ====================

    def _stage_dir(self, stage: str, digest: str) -> str:
        return os.path.join(self.run_dir, stage, digest[:16])

    def _cached(self, stage: str, digest: str) -> Optional[RunRecord]:
        record = self.ledger.find_run(stage, digest)
        if record is not None and record.outputs_exist():
            logger.info(f"{stage}: reusing run {record.id} ({digest[:12]})")
            return record
        return None

    def _manifest_digest(self, manifest: CorpusManifest) -> str:
        cached = self._digests.get(id(manifest))
        if cached is None or cached[0] is not manifest:
            cached = (manifest, manifest_digest(manifest))
            self._digests[id(manifest)] = cached
        return cached[1]

    # ==================== STAGES ====================

    def synthesize(self, spec: CorpusSpec) -> Tuple[CorpusManifest, RunRecord]:
        """Generate a synthetic corpus inside the run directory"""
        digest = config_hash("synth", spec.to_dict())
        record = self._cached("synth", digest)
        if record is None:
            out_dir = self._stage_dir("synth", digest)
            generate_corpus(spec, out_dir)
            record = self.ledger.record_run(RunRecord(
                "synth", digest, spec.to_dict(),
                outputs={"manifest": os.path.join(out_dir, MANIFEST_NAME)},
            ))
        return load_manifest(record.output("manifest")), record

    def _mask_samples(self, manifest: CorpusManifest) -> List[Sample]:
        return [
            Sample.from_mask(read_image(manifest.resolve(r.image)), read_mask(manifest.resolve(r.mask)), r.id)
            for r in manifest.split(Split.TRAIN_MASK)
        ]

    def pretrain_baseline(self, manifest: CorpusManifest, net_cfg: NetworkConfig,
                          train_cfg: TrainConfig) -> RunRecord:
        """
        Train one network on the mask-annotated split with full-region BCE + Dice

        Raises:
            ConfigError: the mask split is empty
        """
        if not manifest.split(Split.TRAIN_MASK):
            raise ConfigError("Cannot pretrain: the manifest has no train_mask records")
        config = {"network": net_cfg.to_dict(), "train": train_cfg.to_dict()}
        digest = config_hash("pretrain", config, {"manifest": self._manifest_digest(manifest)})
        record = self._cached("pretrain", digest)
        if record is not None:
            return record

        out_dir = self._stage_dir("pretrain", digest)
        logger.info(f"pretrain: architecture {net_cfg.arch_id} seed {net_cfg.seed}")
        state = init_state(net_cfg)
        log = train_single(state, self._mask_samples(manifest), train_cfg,
                           log_path=os.path.join(out_dir, "train_log.csv"))
        ckpt = save_checkpoint(os.path.join(out_dir, f"{net_cfg.arch_id}.ckpt"), state)
        if self.charts:
            visualizations.plot_training_log(log.to_frame(), os.path.join(out_dir, "train_log.png"))
        return self.ledger.record_run(RunRecord(
            "pretrain", digest, config,
            inputs={"manifest": self._manifest_digest(manifest)},
            outputs={"checkpoint": ckpt, "log": os.path.join(out_dir, "train_log.csv")},
            metrics={"final_loss": log.losses()[-1], "steps": state.step},
        ))

    def predict_corpus(self, checkpoint: str, manifest: CorpusManifest,
                       split: Split = Split.TRAIN_BOX) -> RunRecord:
        """
        Write one 16-bit probability map per record of a split

        Records that cannot be predicted are logged and listed in the run metrics.
        """
        state = load_checkpoint(checkpoint)
        inputs = {"checkpoint": file_digest(checkpoint), "manifest": self._manifest_digest(manifest)}
        config = {"split": Split(split).value}
        digest = config_hash("predict", config, inputs)
        record = self._cached("predict", digest)
        if record is not None:
            return record

        out_dir = os.path.join(self._stage_dir("predict", digest), "probs")
        os.makedirs(out_dir, exist_ok=True)
        records = manifest.split(split)

        def run_one(rec) -> Optional[str]:
            try:
                prob = predict(state, read_image(manifest.resolve(rec.image)))
                write_probmap(os.path.join(out_dir, f"{rec.id}.pgm"), prob)
                return None
            except BoxBoostError as e:
                logger.warning(f"predict: {rec.id} failed: {e.message}")
                return e.message

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                errors = list(pool.map(run_one, records))
        else:
            errors = [run_one(rec) for rec in records]
        failed = {rec.id: err for rec, err in zip(records, errors) if err is not None}
        logger.info(f"predict: {len(records) - len(failed)}/{len(records)} records with architecture "
                    f"{state.config.arch_id}")
        return self.ledger.record_run(RunRecord(
            "predict", digest, config, inputs,
            outputs={"predictions": out_dir},
            metrics={"count": len(records) - len(failed), "failed": failed},
        ))

    def run_ffs(self, manifest: CorpusManifest, predictions: str,
                cfg: FfsConfig = FfsConfig()) -> RunRecord:
        """
        Filter the box split against its predictions and write pseudo labels for kept records

        Writes report.jsonl (id, dice, kept, reason per record) and pseudo/<id>.pgm.
        """
        inputs = {"manifest": self._manifest_digest(manifest), "predictions": tree_digest(predictions)}
        digest = config_hash("ffs", cfg.to_dict(), inputs)
        record = self._cached("ffs", digest)
        if record is not None:
            return record

        out_dir = self._stage_dir("ffs", digest)
        pseudo_dir = os.path.join(out_dir, "pseudo")
        os.makedirs(pseudo_dir, exist_ok=True)
        records = manifest.split(Split.TRAIN_BOX)

        pairs, loaded, load_errors = [], [], {}
        for rec in records:
            try:
                prob = read_probmap(os.path.join(predictions, f"{rec.id}.pgm"))
                pairs.append((rasterize_boxes(rec.boxes, prob.size), prob))
                loaded.append(rec)
            except BoxBoostError as e:
                logger.warning(f"ffs: {rec.id} skipped: {e.message}")
                load_errors[rec.id] = e.message
        results = dict(zip((rec.id for rec in loaded), ffs_corpus(pairs, cfg, self.workers)))

        lines, kept_ids, rejected_ids, modes, ordered = [], [], [], [], []
        for rec in records:
            result = results.get(rec.id)
            error = load_errors.get(rec.id) if result is None else result.error
            if result is None or result.decision is None:
                lines.append({"id": rec.id, "dice": None, "kept": False, "reason": "ERROR", "error": error})
                result = FfsItemResult(-1, None, None, error)
            else:
                decision = result.decision
                lines.append({"id": rec.id, "dice": round(decision.dice_score, 6),
                              "kept": decision.kept, "reason": decision.reason.value})
                if decision.kept:
                    write_trilabel(os.path.join(pseudo_dir, f"{rec.id}.pgm"), result.pseudo)
                    kept_ids.append(rec.id)
                else:
                    rejected_ids.append(rec.id)
            modes.append(rec.noise.value)
            ordered.append(result)

        report_path = os.path.join(out_dir, "report.jsonl")
        with open(report_path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("".join(json.dumps(line) + "\n" for line in lines))

        metrics = {
            "keep_rate": keep_rate(ordered),
            "kept": len(kept_ids),
            "rejected": len(rejected_ids),
            "failed": len(records) - len(kept_ids) - len(rejected_ids),
            "per_mode": keep_rate_by_mode(modes, ordered),
        }
        logger.info(f"ffs: kept {len(kept_ids)}/{len(records)} (keep rate {metrics['keep_rate']:.3f})")
        stored = self.ledger.record_run(RunRecord(
            "ffs", digest, cfg.to_dict(), inputs,
            outputs={"report": report_path, "pseudo": pseudo_dir},
            metrics=metrics,
        ))
        self.ledger.add_lineage(stored.id, rejected_ids, "rejected")
        return stored

    def kept_ids(self, ffs_record: RunRecord) -> List[str]:
        return [line["id"] for line in read_ffs_report(ffs_record.output("report")) if line["kept"]]

    def boost_train(self, manifest: CorpusManifest, ffs_record: RunRecord,
                    net_a: NetworkConfig, net_b: NetworkConfig, train_cfg: TrainConfig,
                    use_ic: bool = True, init: Optional[Dict[str, str]] = None) -> RunRecord:
        """
        Train both networks on the mask split plus the kept pseudo labels

        Args:
            ffs_record: Run record of the ffs stage supplying the pseudo labels
            net_a, net_b: Configs of the two networks
            use_ic: Apply the consistency term on uncertain pixels
            init: Optional {"A": checkpoint, "B": checkpoint} to start from instead of scratch

        Raises:
            EmptyPseudoSetError: no pseudo label survived filtering
        """
        kept = self.kept_ids(ffs_record)
        if not kept:
            raise EmptyPseudoSetError("No box-annotated record survived FFS; nothing to boost with")
        init = init or {}
        inputs = {"manifest": self._manifest_digest(manifest), "ffs": ffs_record.config_hash}
        inputs.update({f"init_{key}": file_digest(path) for key, path in sorted(init.items())})
        config = {"network_a": net_a.to_dict(), "network_b": net_b.to_dict(),
                  "train": train_cfg.to_dict(), "use_ic": use_ic}
        digest = config_hash("boost", config, inputs)
        record = self._cached("boost", digest)
        if record is not None:
            return record

        out_dir = self._stage_dir("boost", digest)
        pseudo_dir = ffs_record.output("pseudo")
        box_samples = []
        for record_id in kept:
            rec = manifest.by_id(record_id)
            box_samples.append(Sample(read_image(manifest.resolve(rec.image)),
                                      read_trilabel(os.path.join(pseudo_dir, f"{record_id}.pgm")),
                                      record_id, from_box=True))

        state_a = self._initial_state(net_a, init.get(net_a.arch_id))
        state_b = self._initial_state(net_b, init.get(net_b.arch_id) if net_b.arch_id != net_a.arch_id else None)
        log = train_dual(state_a, state_b, self._mask_samples(manifest), box_samples, train_cfg,
                         use_ic=use_ic, log_path=os.path.join(out_dir, "train_log.csv"))
        outputs = {
            "checkpoint_a": save_checkpoint(os.path.join(out_dir, f"net_a_{net_a.arch_id}.ckpt"), state_a),
            "checkpoint_b": save_checkpoint(os.path.join(out_dir, f"net_b_{net_b.arch_id}.ckpt"), state_b),
            "log": os.path.join(out_dir, "train_log.csv"),
        }
        if self.charts:
            visualizations.plot_training_log(log.to_frame(), os.path.join(out_dir, "train_log.png"))
        frame = log.to_frame()
        stored = self.ledger.record_run(RunRecord(
            "boost", digest, config, inputs, outputs,
            metrics={"final_loss": float(frame["loss"].iloc[-1]), "final_ic": float(frame["ic"].iloc[-1]),
                     "max_ic": float(frame["ic"].max()), "box_samples": len(box_samples)},
        ))
        self.ledger.add_lineage(stored.id, kept, "trained")
        return stored

    @staticmethod
    def _initial_state(cfg: NetworkConfig, checkpoint: Optional[str]) -> NetworkState:
        if checkpoint is None:
            return init_state(cfg)
        loaded = load_checkpoint(checkpoint)
        # the seed only affects initialization, so it may differ
        if loaded.config.with_seed(cfg.seed).to_dict() != cfg.to_dict():
            logger.warning(f"Warm start checkpoint {checkpoint} does not match architecture "
                           f"{cfg.arch_id} ({loaded.config.to_dict()} vs {cfg.to_dict()}); "
                           f"starting from scratch")
            return init_state(cfg)
        return NetworkState(cfg, {k: v.copy() for k, v in loaded.params.items()})

    def evaluate(self, checkpoints: Dict[str, str], manifest: CorpusManifest,
                 threshold: float = 0.5, curves: bool = True) -> RunRecord:
        """
        Score each network separately on every test dataset

        Writes metrics.csv (network, dataset, images, dice, iou incl. a wAVG row per network)
        and one threshold-curve CSV per network and dataset.
        """
        inputs = {name: file_digest(path) for name, path in sorted(checkpoints.items())}
        inputs["manifest"] = self._manifest_digest(manifest)
        config = {"threshold": threshold, "curves": curves}
        digest = config_hash("eval", config, inputs)
        record = self._cached("eval", digest)
        if record is not None:
            return record

        out_dir = self._stage_dir("eval", digest)
        tests = manifest.split(Split.TEST)
        if not tests:
            raise ConfigError("Cannot evaluate: the manifest has no test records")
        images = {r.id: read_image(manifest.resolve(r.image)) for r in tests}
        gts = {r.id: read_mask(manifest.resolve(r.gt)) for r in tests}

        frames, metrics, outputs = [], {}, {}
        for name, path in sorted(checkpoints.items()):
            state = load_checkpoint(path)
            bench = Benchmark(name, threshold, self.workers)
            for dataset in manifest.datasets(Split.TEST):
                preds, masks = [], []
                for rec in (r for r in tests if r.dataset == dataset):
                    try:
                        preds.append(predict(state, images[rec.id]))
                        masks.append(gts[rec.id])
                    except BoxBoostError as e:
                        logger.warning(f"eval: {name} on {rec.id} failed: {e.message}")
                if not preds:
                    logger.warning(f"eval: no prediction of {name} on {dataset}")
                    continue
                bench.add(dataset, preds, masks, with_curve=curves)
            if not bench.reports:
                raise DataIOError(f"Network {name} could not be evaluated on any test image")
            for dataset, curve in bench.curves.items():
                outputs[f"curve_{name}_{dataset}"] = write_curve_csv(
                    os.path.join(out_dir, "curves", f"{name}_{dataset}.csv"), curve)
            if self.charts and bench.curves:
                visualizations.plot_threshold_curves(
                    list(bench.curves.values()), os.path.join(out_dir, f"curves_{name}.png"), title=name)
            frames.append(bench.frame())
            wavg_dice, wavg_iou = bench.wavg()
            metrics[name] = {"wavg_dice": wavg_dice, "wavg_iou": wavg_iou,
                             "datasets": {r.name: {"images": r.count, "dice": r.dice, "iou": r.iou}
                                          for r in bench.reports}}
            print(f"\n[{name}]\n{bench.summary()}")

        metrics_path = os.path.join(out_dir, "metrics.csv")
        pd.concat(frames, ignore_index=True).to_csv(metrics_path, index=False, float_format="%.6f",
                                                    lineterminator="\n")
        outputs["metrics"] = metrics_path
        return self.ledger.record_run(RunRecord("eval", digest, config, inputs, outputs, metrics))

    # ==================== COMPOSITE RUNS ====================

    def boost_rounds(self, manifest: CorpusManifest, cfg: StageConfig, net_a: NetworkConfig,
                     net_b: NetworkConfig, baseline: Dict[str, str]) -> List[RunRecord]:
        """
        Predict -> ffs -> boost, repeated cfg.rounds times

        Round 1 predicts with the baseline of architecture A; later rounds predict with the
        previous round's boosted A network and continue training from the boosted pair.
        """
        rounds = []
        predictor = baseline["A"]
        init = dict(baseline) if cfg.warm_start else None
        for index in range(cfg.rounds):
            logger.info(f"round {index + 1}/{cfg.rounds} ({cfg.setting.value})")
            predictions = self.predict_corpus(predictor, manifest, Split.TRAIN_BOX)
            ffs_record = self.run_ffs(manifest, predictions.output("predictions"), cfg.ffs)
            boosted = self.boost_train(manifest, ffs_record, net_a, net_b, cfg.boost,
                                       use_ic=cfg.use_ic, init=init)
            rounds.append(boosted)
            predictor = boosted.output("checkpoint_a")
            init = {net_a.arch_id: boosted.output("checkpoint_a"),
                    net_b.arch_id: boosted.output("checkpoint_b")}
        return rounds

    def run(self, manifest: CorpusManifest, cfg: StageConfig,
            net_a: Optional[NetworkConfig] = None, net_b: Optional[NetworkConfig] = None) -> Dict:
        """
        Run every stage for one setting and return the evaluation metrics per network

        The baseline setting trains both networks on the mask split only.
        """
        net_a = net_a or NetworkConfig.arch_a(cfg.pretrain.seed)
        net_b = net_b or NetworkConfig.arch_b(cfg.pretrain.seed)
        baseline = {"A": self.pretrain_baseline(manifest, net_a, cfg.pretrain).output("checkpoint")}
        if cfg.setting == Setting.BASELINE or cfg.warm_start:
            baseline["B"] = self.pretrain_baseline(manifest, net_b, cfg.pretrain).output("checkpoint")

        if cfg.setting == Setting.BASELINE:
            final = baseline
        else:
            last = self.boost_rounds(manifest, cfg, net_a, net_b, baseline)[-1]
            final = {"A": last.output("checkpoint_a"), "B": last.output("checkpoint_b")}
        return self.evaluate(final, manifest, cfg.eval_threshold).metrics

    def run_ablation(self, spec: AblationSpec) -> AblationResult:
        """
        Baseline, +FFS and +FFS+IC for both architectures and every seed

        Writes ablation_seeds.csv (one row per seed and setting) and ablation.csv (seed means).
        """
        manifest, _ = self.synthesize(spec.corpus)
        rows = []
        for seed in spec.seeds:
            net_a = NetworkConfig.arch_a(seed)
            net_b = NetworkConfig.arch_b(seed)
            for setting in SETTINGS:
                logger.info(f"ablation: seed {seed}, setting {setting.value}")
                metrics = self.run(manifest, spec.stage_config(setting, seed), net_a, net_b)
                rows.append({
                    "seed": seed,
                    "setting": setting.value,
                    "A_dice": metrics["A"]["wavg_dice"],
                    "A_iou": metrics["A"]["wavg_iou"],
                    "B_dice": metrics["B"]["wavg_dice"],
                    "B_iou": metrics["B"]["wavg_iou"],
                })

        per_seed = pd.DataFrame(rows, columns=["seed", *ABLATION_COLUMNS])
        table = ablation_table(per_seed)
        table_path = os.path.join(self.run_dir, "ablation.csv")
        per_seed_path = os.path.join(self.run_dir, "ablation_seeds.csv")
        table.to_csv(table_path, index=False, float_format="%.6f", lineterminator="\n")
        per_seed.to_csv(per_seed_path, index=False, float_format="%.6f", lineterminator="\n")
        if self.charts:
            visualizations.plot_ablation(table, os.path.join(self.run_dir, "ablation.png"))
        return AblationResult(table, per_seed, table_path, per_seed_path)

    # ==================== SUMMARY ====================

    def artifact_digests(self) -> Dict[str, str]:
        """sha256 of every file in the run directory except the ledger and the summary"""
        digests = {}
        for directory, dirs, files in os.walk(self.run_dir):
            dirs.sort()
            for name in sorted(files):
                path = os.path.join(directory, name)
                relative = os.path.relpath(path, self.run_dir).replace(os.sep, "/")
                if relative in (LEDGER_NAME, SUMMARY_NAME) or relative.startswith(LEDGER_NAME):
                    continue
                digests[relative] = file_digest(path)
        return digests

    def write_summary(self, config: Dict, metrics: Optional[Dict] = None) -> str:
        """Write run_summary.json: the config echo plus artifact hashes; reusable as --config"""
        summary = {"config": config, "artifacts": self.artifact_digests()}
        if metrics is not None:
            summary["metrics"] = metrics
        path = os.path.join(self.run_dir, SUMMARY_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path


def ablation_table(per_seed: pd.DataFrame) -> pd.DataFrame:
    """Seed means per setting, rows in baseline, +FFS, +FFS+IC order"""
    order = [s.value for s in SETTINGS]
    means = per_seed.groupby("setting", sort=False)[ABLATION_COLUMNS[1:]].mean()
    means = means.reindex([s for s in order if s in means.index])
    return means.reset_index()[ABLATION_COLUMNS]


def read_ffs_report(path: str) -> List[Dict]:
    """Lines of an ffs report.jsonl"""
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DataIOError(f"Cannot read FFS report '{path}': {e.strerror or e}")
    lines, offset = [], 0
    for raw in data.splitlines(keepends=True):
        if raw.strip():
            try:
                lines.append(json.loads(raw))
            except ValueError:
                raise ParseError(f"{path}: malformed report line", offset=offset)
        offset += len(raw)
    return lines
