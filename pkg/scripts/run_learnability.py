"""Learnability smoke run: default hyperparameters on a 7-day synthetic file.

Trains the default model for 50 epochs and compares its 6-step test MAE with
the last-value naive forecast.

    python3 scripts/run_learnability.py [--epochs 50] [--seed 7]
"""

from __future__ import annotations

import argparse
import time

from mscmhmst import dataio, evaluation, synth
from mscmhmst.model import ModelConfig, build_variant
from mscmhmst.training import TrainConfig, train


def learnability(epochs: int = 50, seed: int = 7, sensors: int = 2, days: int = 7, log=None) -> dict:
    series = synth.generate(sensors, days, seed)
    tr, va, te = dataio.split_series(series, *dataio.proportional_split(series.n_steps))
    stats = dataio.normalize_stats(tr)
    train_ds, val_ds, test_ds = (dataio.make_windows(s, 12, 12, stats) for s in (tr, va, te))

    t0 = time.perf_counter()
    model = build_variant(ModelConfig(c_in=sensors))
    model, hist = train(model, train_ds, val_ds, TrainConfig(epochs=epochs), log=log)
    seconds = time.perf_counter() - t0

    ours = evaluation.evaluate_horizons(model, test_ds)
    naive = evaluation.evaluate_horizons(
        None, test_ds, predict=lambda x: evaluation.naive_last_value(x, test_ds.t)
    )
    return {
        "seconds": seconds,
        "initial_loss": hist.initial_train_loss,
        "epoch0_loss": hist.train_loss[0],
        "final_loss": hist.train_loss[-1],
        "best_epoch": hist.best_epoch,
        "mae": {h: ours.horizons[h].mae for h in evaluation.HORIZONS},
        "naive_mae": {h: naive.horizons[h].mae for h in evaluation.HORIZONS},
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    r = learnability(args.epochs, args.seed, log=print)
    print(f"train loss: epoch 0 {r['epoch0_loss']:.5f} -> final {r['final_loss']:.5f} "
          f"({r['final_loss'] / r['epoch0_loss']:.1%}); best epoch {r['best_epoch']}")
    for h in evaluation.HORIZONS:
        print(f"{h:2d}-step MAE {r['mae'][h]:8.3f}  naive {r['naive_mae'][h]:8.3f}  "
              f"ratio {r['mae'][h] / r['naive_mae'][h]:.3f}")
    print(f"{r['seconds']:.1f} s")


if __name__ == "__main__":
    main()
