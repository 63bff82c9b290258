#!/usr/bin/env python3
"""
Example script demonstrating programmatic use of boxboost
This runs a tiny corpus through every stage without the CLI interface
"""

import logging

from config import Setting, StageConfig, TrainConfig
from dataset import CorpusSpec, Split
from errors import EmptyPseudoSetError
from ffs import noise_rejection_audit
from optim import AdamWConfig
from pipeline import Pipeline


def main():
    """Example usage of the boxboost modules"""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    print("=== boxboost - Example Usage ===\n")

    with Pipeline("runs/example", workers=2) as pipeline:
        # 1. A small synthetic corpus
        print("1. Generating a synthetic corpus...")
        spec = CorpusSpec(n_mask=12, n_box=48, test_sets={"synth-standard": 12, "synth-lowcontrast": 8},
                          wrong_label=0.25, seed=7)
        manifest, _ = pipeline.synthesize(spec)
        print(f"  {len(manifest)} records, noise {manifest.noise_counts()}")

        # 2. How well could the filter do with a perfect predictor?
        print("\n2. Oracle filter audit...")
        for mode, row in noise_rejection_audit(manifest).items():
            print(f"  {mode:<14} keep rate {row['keep_rate']:.2f}")

        # 3. Baseline, then one boosting round with the consistency term
        print("\n3. Training...")
        train = TrainConfig(epochs=8, batch_size=4, seed=7, optimizer=AdamWConfig(lr=3e-3))
        cfg = StageConfig(setting=Setting.FFS_IC, pretrain=train, boost=train)
        try:
            metrics = pipeline.run(manifest, cfg)
        except EmptyPseudoSetError as e:
            print(f"  {e.message}; train the baseline longer or lower the dice threshold")
            return

        # 4. Per-network results
        print("\n4. Results...")
        for name, row in metrics.items():
            print(f"  Network {name}: wAVG dice {row['wavg_dice']:.4f}, iou {row['wavg_iou']:.4f}")

        ffs_run = pipeline.ledger.latest_run("ffs")
        print(f"\n  FFS kept {ffs_run.metrics['kept']} of {len(manifest.split(Split.TRAIN_BOX))} box images")
        print(f"  Summary: {pipeline.write_summary(cfg.to_dict(), metrics)}")


if __name__ == "__main__":
    main()
