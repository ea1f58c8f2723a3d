"""Desk-scale version of the MoE / phase ablation grid, in one process.

Generates train and val splits, encodes them, trains the five cells with a
shared seed and prints the score table. The reference column holds the
published full-scale numbers; the desk-scale scores are not expected to match.
"""

import argparse
import dataclasses
import json
import time

from tinygiant.cli import format_ablation, run_ablation
from tinygiant.config import RunConfig, TrainConfig
from tinygiant.data import DataConfig, generate_dataset
from tinygiant.features import ModalityEncoderConfig
from tinygiant.train import build_encoders, build_vocab, examples_from_samples


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=512)
    ap.add_argument("--n-val", type=int, default=128)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--epochs-phase1", type=int, default=1)
    ap.add_argument("--epochs-phase2", type=int, default=10)
    ap.add_argument("--output", help="also write the rows as JSON")
    args = ap.parse_args()

    cfg = RunConfig(
        seed=args.seed,
        data=DataConfig(rgb_size=64, depth_size=72),
        rgb=ModalityEncoderConfig("rgb", 64, 4, 32, 1.0 / 255.0),
        depth=ModalityEncoderConfig("depth", 72, 3, 32, 0.1),
        train=TrainConfig(lr=args.lr, epochs_phase1=args.epochs_phase1, epochs_phase2=args.epochs_phase2),
    )
    start = time.perf_counter()
    encoders = build_encoders(cfg)
    train = examples_from_samples(generate_dataset(cfg.seed, args.n_train, cfg.data, "train"), encoders)
    val = examples_from_samples(generate_dataset(cfg.seed, args.n_val, cfg.data, "val"), encoders)
    rows = run_ablation(cfg, train, val, build_vocab(train))
    print(format_ablation(rows))
    print(f"({time.perf_counter() - start:.0f}s)")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump({"config": dataclasses.asdict(cfg), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
