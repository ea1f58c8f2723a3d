"""Overfit a small model on 64 synthetic samples (16 per task) and report exact match."""

import argparse
import time

from tinygiant.config import RunConfig, TrainConfig
from tinygiant.data import DataConfig, generate_dataset
from tinygiant.features import ModalityEncoderConfig
from tinygiant.optim import AdamWState
from tinygiant.train import build_encoders, build_vocab, examples_from_samples, exact_match, init_model, predict, train_phase


def small_config(seed: int = 0, lr: float = 1e-3, batch_size: int = 8) -> RunConfig:
    return RunConfig(
        seed=seed,
        data=DataConfig(rgb_size=64, depth_size=72),
        rgb=ModalityEncoderConfig("rgb", 64, 4, 32, 1.0 / 255.0),
        depth=ModalityEncoderConfig("depth", 72, 3, 32, 0.1),
        train=TrainConfig(lr=lr, batch_size=batch_size),
    )


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--check-every", type=int, default=25)
    args = ap.parse_args()

    cfg = small_config(args.seed, args.lr, args.batch_size)
    samples = generate_dataset(cfg.seed, 64, cfg.data, "train")
    examples = examples_from_samples(samples, build_encoders(cfg))
    vocab = build_vocab(examples)
    model, _ = init_model(cfg, vocab)
    opt = AdamWState(learning_rate=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    start = time.perf_counter()
    done = 0
    while done < args.epochs:
        n = min(args.check_every, args.epochs - done)
        rows = train_phase(model, examples, vocab, 2, n, cfg.train, cfg.moe, cfg.seed, opt=opt, start_epoch=done + 1)
        done += n
        em = exact_match(predict(model, examples, vocab, cfg.moe), examples)
        print(f"epoch {done:4d}  loss {rows[-1]['loss']:.4f}  exact match {100 * em:6.2f}%  ({time.perf_counter() - start:.0f}s)")


if __name__ == "__main__":
    main()
