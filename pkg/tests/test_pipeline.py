import dataclasses
import json
import os

import numpy as np
import pandas as pd
import pytest

from checkpoint import load_checkpoint, save_checkpoint
from config import AblationSpec, Setting, StageConfig, TrainConfig, file_digest
from dataset import (
    AnnotationKind,
    CorpusManifest,
    CorpusSpec,
    ManifestRecord,
    Split,
    read_probmap,
    read_trilabel,
    write_image,
    write_mask,
)
from errors import ConfigError, EmptyPseudoSetError
from ffs import FfsConfig, pixel_fusion
from mask_core import BinaryMask, binarize, rasterize_boxes
from optim import AdamWConfig
from pipeline import SUMMARY_NAME, Pipeline, ablation_table, read_ffs_report
from toynet import NetworkConfig, init_state

TINY = TrainConfig(epochs=1, batch_size=4, seed=0, optimizer=AdamWConfig(lr=3e-3))
KEEP_ALL = FfsConfig(dice_threshold=0.0, binarize_threshold=0.0)


def _baseline(pipeline, manifest, arch="A"):
    return pipeline.pretrain_baseline(manifest, NetworkConfig.preset(arch, 0), TINY)


def _ffs(pipeline, manifest, cfg=KEEP_ALL):
    predictions = pipeline.predict_corpus(_baseline(pipeline, manifest).output("checkpoint"), manifest)
    return pipeline.run_ffs(manifest, predictions.output("predictions"), cfg)


# ==================== STAGES ====================

def test_pretrain_is_idempotent(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        first = _baseline(pipeline, manifest)
        stamp = os.stat(first.output("checkpoint")).st_mtime_ns
        second = _baseline(pipeline, manifest)
        assert second.id == first.id
        assert os.stat(second.output("checkpoint")).st_mtime_ns == stamp
        assert len(pipeline.ledger.runs("pretrain")) == 1


def test_stage_reruns_when_outputs_vanish(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        first = _baseline(pipeline, manifest)
        with open(first.output("checkpoint"), "rb") as handle:
            original = handle.read()
        os.remove(first.output("checkpoint"))
        again = _baseline(pipeline, manifest)
        with open(again.output("checkpoint"), "rb") as handle:
            assert handle.read() == original


def test_pretrain_needs_mask_split(small_corpus, tmp_path):
    manifest, root = small_corpus
    no_masks = CorpusManifest([r for r in manifest if r.split != Split.TRAIN_MASK], root=str(root))
    with Pipeline(tmp_path / "run") as pipeline:
        with pytest.raises(ConfigError):
            _baseline(pipeline, no_masks)


def test_pretrain_overfits_a_single_image(tmp_path):
    bits = np.zeros((16, 16), dtype=bool)
    bits[4:11, 5:12] = True
    write_image(tmp_path / "one.pgm", 0.2 + 0.6 * bits)
    write_mask(tmp_path / "one_mask.pgm", BinaryMask(bits))
    record = ManifestRecord(id="mask-0000", image="one.pgm", annotation=AnnotationKind.MASK,
                            split=Split.TRAIN_MASK, gt="one_mask.pgm", mask="one_mask.pgm")
    manifest = CorpusManifest([record], root=str(tmp_path))
    cfg = TrainConfig(epochs=50, batch_size=1, augment=False, optimizer=AdamWConfig(lr=0.02, weight_decay=0.0))
    with Pipeline(tmp_path / "run") as pipeline:
        baseline = pipeline.pretrain_baseline(manifest, NetworkConfig.arch_b(0), cfg)
    assert baseline.metrics["steps"] == 50
    assert baseline.metrics["final_loss"] < 0.1


def test_predictions_are_valid_and_reproducible(small_corpus, tmp_path):
    manifest, _ = small_corpus
    outputs = []
    for name in ("one", "two"):
        with Pipeline(tmp_path / name) as pipeline:
            record = pipeline.predict_corpus(_baseline(pipeline, manifest).output("checkpoint"), manifest)
            outputs.append(record.output("predictions"))
            assert record.metrics["failed"] == {}
    for record in manifest.split(Split.TRAIN_BOX):
        first = os.path.join(outputs[0], f"{record.id}.pgm")
        second = os.path.join(outputs[1], f"{record.id}.pgm")
        p = read_probmap(first)
        assert p.values.min() >= 0.0 and p.values.max() <= 1.0
        with open(first, "rb") as a, open(second, "rb") as b:
            assert a.read() == b.read()


def test_bad_record_does_not_stop_prediction(small_corpus, tmp_path):
    manifest, root = small_corpus
    odd = tmp_path / "odd.pgm"
    write_image(odd, np.full((30, 30), 0.5))
    records = list(manifest)
    target = next(i for i, r in enumerate(records) if r.split == Split.TRAIN_BOX)
    records[target] = dataclasses.replace(records[target], image=str(odd))
    patched = CorpusManifest(records, root=str(root))
    with Pipeline(tmp_path / "run") as pipeline:
        record = pipeline.predict_corpus(_baseline(pipeline, manifest).output("checkpoint"), patched)
    assert list(record.metrics["failed"]) == [records[target].id]
    assert record.metrics["count"] == len(manifest.split(Split.TRAIN_BOX)) - 1


def test_ffs_report_pseudo_labels_and_lineage(small_corpus, tmp_path):
    manifest, _ = small_corpus
    box_ids = [r.id for r in manifest.split(Split.TRAIN_BOX)]
    with Pipeline(tmp_path / "run") as pipeline:
        everything = _ffs(pipeline, manifest)
        dices = sorted(line["dice"] for line in read_ffs_report(everything.output("report")))
        # split the box split roughly in half
        ffs_record = _ffs(pipeline, manifest, FfsConfig(dice_threshold=dices[len(dices) // 2],
                                                         binarize_threshold=0.0))
        lines = read_ffs_report(ffs_record.output("report"))
        assert [line["id"] for line in lines] == box_ids

        kept = [line["id"] for line in lines if line["kept"]]
        rejected = [line["id"] for line in lines if not line["kept"]]
        assert kept and rejected
        assert sorted(os.listdir(ffs_record.output("pseudo"))) == sorted(f"{i}.pgm" for i in kept)
        assert ffs_record.metrics["kept"] == len(kept)
        assert ffs_record.metrics["keep_rate"] == pytest.approx(len(kept) / len(lines))
        assert sum(row["kept"] for row in ffs_record.metrics["per_mode"].values()) == len(kept)

        boosted = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0),
                                       TINY, use_ic=True)
        trained = pipeline.ledger.lineage_for(boosted.id, "trained")
        assert sorted(trained) == sorted(kept)
        assert not set(trained) & set(pipeline.ledger.lineage_for(ffs_record.id, "rejected"))
        assert boosted.metrics["box_samples"] == len(kept)


def test_keep_everything_fuses_raw_labels(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest)
        predictions = pipeline.ledger.latest_run("predict").output("predictions")
        for record in manifest.split(Split.TRAIN_BOX):
            p = read_probmap(os.path.join(predictions, f"{record.id}.pgm"))
            expected = pixel_fusion(rasterize_boxes(record.boxes, p.size), binarize(p, 0.0))
            assert read_trilabel(os.path.join(ffs_record.output("pseudo"), f"{record.id}.pgm")) == expected


def test_boost_without_pseudo_labels_fails(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest, FfsConfig(dice_threshold=1.0))
        assert ffs_record.metrics["kept"] == 0
        with pytest.raises(EmptyPseudoSetError):
            pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0), TINY)


def test_twin_boost_keeps_consistency_at_zero(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest)
        boosted = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(5), NetworkConfig.arch_a(5), TINY)
        assert boosted.metrics["max_ic"] == 0.0


def test_warm_start_uses_baseline_weights(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest)
        init = {"A": _baseline(pipeline, manifest, "A").output("checkpoint"),
                "B": _baseline(pipeline, manifest, "B").output("checkpoint")}
        cold = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0), TINY)
        warm = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0), TINY,
                                    init=init)
        assert warm.config_hash != cold.config_hash
        assert warm.inputs["init_A"] != warm.inputs["init_B"]


def _params_equal(first: str, second: str) -> bool:
    a, b = load_checkpoint(first).params, load_checkpoint(second).params
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_warm_start_with_other_kernels_starts_from_scratch(small_corpus, tmp_path):
    manifest, _ = small_corpus
    wide = NetworkConfig("A", (8, 16, 16), (5, 5, 5), (1, 1, 1), 1, 0)
    mismatched = save_checkpoint(str(tmp_path / "wide.ckpt"), init_state(wide))
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest)
        cold = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0), TINY)
        fallback = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0),
                                        TINY, init={"A": mismatched})
    assert fallback.config_hash != cold.config_hash
    assert _params_equal(fallback.output("checkpoint_a"), cold.output("checkpoint_a"))


def test_warm_start_accepts_a_checkpoint_with_another_seed(small_corpus, tmp_path):
    manifest, _ = small_corpus
    other_seed = save_checkpoint(str(tmp_path / "seed3.ckpt"), init_state(NetworkConfig.arch_a(3)))
    with Pipeline(tmp_path / "run") as pipeline:
        ffs_record = _ffs(pipeline, manifest)
        cold = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0), TINY)
        warm = pipeline.boost_train(manifest, ffs_record, NetworkConfig.arch_a(0), NetworkConfig.arch_b(0),
                                    TINY, init={"A": other_seed})
    assert not _params_equal(warm.output("checkpoint_a"), cold.output("checkpoint_a"))
    assert _params_equal(warm.output("checkpoint_b"), cold.output("checkpoint_b"))


# ==================== FULL RUNS ====================

def _stage_config(setting=Setting.FFS_IC, rounds=1):
    return StageConfig(setting=setting, ffs=KEEP_ALL, pretrain=TINY, boost=TINY, rounds=rounds)


def test_run_reports_each_network(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run", charts=True) as pipeline:
        metrics = pipeline.run(manifest, _stage_config())
        assert set(metrics) == {"A", "B"}
        for row in metrics.values():
            assert 0.0 <= row["wavg_dice"] <= 1.0
            assert list(row["datasets"]) == ["synth-standard", "synth-lowcontrast"]
        eval_record = pipeline.ledger.latest_run("eval")
        frame = pd.read_csv(eval_record.output("metrics"))
        assert list(frame.columns) == ["network", "dataset", "images", "dice", "iou"]
        assert list(frame[frame["network"] == "A"]["dataset"]) == ["synth-standard", "synth-lowcontrast", "wAVG"]
        assert os.path.exists(eval_record.output("curve_A_synth-standard"))

        summary = pipeline.write_summary(_stage_config().to_dict(), metrics)
        with open(summary) as handle:
            payload = json.load(handle)
        assert payload["config"]["setting"] == "+FFS+IC"
        assert all(len(digest) == 64 for digest in payload["artifacts"].values())


def test_baseline_setting_skips_boosting(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        pipeline.run(manifest, _stage_config(Setting.BASELINE))
        assert pipeline.ledger.runs("boost") == []
        assert len(pipeline.ledger.runs("pretrain")) == 2


def test_multiple_rounds_chain_predictors(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        pipeline.run(manifest, _stage_config(rounds=2))
        predicts = pipeline.ledger.runs("predict")
        boosts = pipeline.ledger.runs("boost")
        assert len(predicts) == 2 and len(boosts) == 2
        assert boosts[1].inputs["init_A"] == predicts[1].inputs["checkpoint"]


def test_identical_runs_produce_identical_artifacts(small_corpus, tmp_path):
    manifest, _ = small_corpus
    digests = []
    for name, workers in (("one", 1), ("two", 3)):
        with Pipeline(tmp_path / name, workers=workers) as pipeline:
            pipeline.run(manifest, _stage_config())
            digests.append(pipeline.artifact_digests())
    assert digests[0] == digests[1]
    assert any(key.endswith(".ckpt") for key in digests[0])
    assert any(key.endswith("metrics.csv") for key in digests[0])


def test_rerun_is_a_no_op(small_corpus, tmp_path):
    manifest, _ = small_corpus
    with Pipeline(tmp_path / "run") as pipeline:
        pipeline.run(manifest, _stage_config())
        before = [(r.stage, r.id) for r in pipeline.ledger.runs()]
        pipeline.run(manifest, _stage_config())
        assert [(r.stage, r.id) for r in pipeline.ledger.runs()] == before


# ==================== ABLATION ====================

def test_ablation_table_shape_and_means(tmp_path):
    spec = AblationSpec(
        seeds=(1, 2),
        corpus=CorpusSpec(n_mask=3, n_box=8, test_sets={"synth-standard": 2}, seed=3),
        ffs=KEEP_ALL,
        pretrain=TINY,
        boost=TINY,
    )
    with Pipeline(tmp_path / "run") as pipeline:
        result = pipeline.run_ablation(spec)
    assert list(result.table["setting"]) == ["baseline", "+FFS", "+FFS+IC"]
    assert list(result.table.columns) == ["setting", "A_dice", "A_iou", "B_dice", "B_iou"]
    assert len(result.per_seed) == 6
    assert sorted(result.per_seed["seed"].unique()) == [1, 2]

    for setting in ("baseline", "+FFS", "+FFS+IC"):
        rows = result.per_seed[result.per_seed["setting"] == setting]
        table_row = result.table[result.table["setting"] == setting].iloc[0]
        for column in ("A_dice", "A_iou", "B_dice", "B_iou"):
            assert table_row[column] == pytest.approx(rows[column].mean(), abs=1e-12)

    written = pd.read_csv(result.table_path)
    assert len(written) == 3
    assert pd.read_csv(result.per_seed_path).shape == (6, 6)


def test_ablation_boosts_from_same_seed_baselines(tmp_path):
    spec = AblationSpec(
        seeds=(1, 2),
        corpus=CorpusSpec(n_mask=3, n_box=8, test_sets={"synth-standard": 2}, seed=3),
        ffs=KEEP_ALL,
        pretrain=TINY,
        boost=dataclasses.replace(TINY, optimizer=AdamWConfig(lr=1e-3)),
    )
    with Pipeline(tmp_path / "run") as pipeline:
        pipeline.run_ablation(spec)
        baselines = {(r.config["network"]["arch_id"], r.config["network"]["seed"]): file_digest(r.output("checkpoint"))
                     for r in pipeline.ledger.runs("pretrain")}
        boosts = pipeline.ledger.runs("boost")

    assert len(baselines) == 4
    assert len(boosts) == 4
    for boost in boosts:
        seed = boost.config["network_a"]["seed"]
        assert boost.inputs["init_A"] == baselines[("A", seed)]
        assert boost.inputs["init_B"] == baselines[("B", seed)]
        assert boost.config["train"]["optimizer"]["lr"] == 1e-3


def test_ablation_table_orders_settings():
    per_seed = pd.DataFrame([
        {"seed": 1, "setting": "+FFS+IC", "A_dice": 0.9, "A_iou": 0.8, "B_dice": 0.7, "B_iou": 0.6},
        {"seed": 1, "setting": "baseline", "A_dice": 0.5, "A_iou": 0.4, "B_dice": 0.3, "B_iou": 0.2},
        {"seed": 2, "setting": "baseline", "A_dice": 0.7, "A_iou": 0.6, "B_dice": 0.5, "B_iou": 0.4},
    ])
    table = ablation_table(per_seed)
    assert list(table["setting"]) == ["baseline", "+FFS+IC"]
    assert table.iloc[0]["A_dice"] == pytest.approx(0.6)


@pytest.mark.slow
def test_ablation_direction_on_reference_corpus(tmp_path):
    with Pipeline(tmp_path / "run", workers=os.cpu_count() or 1) as pipeline:
        table = pipeline.run_ablation(AblationSpec()).table.set_index("setting")
    for arch in ("A", "B"):
        dice = table[f"{arch}_dice"]
        assert dice["baseline"] < dice["+FFS"] < dice["+FFS+IC"]
        assert dice["+FFS"] - dice["baseline"] >= 0.02
