"""Directional check on a user-supplied PeMS08-format flow matrix.

The file is cut to the first 14 days and 20 sensors.  For each seed the
16-head model and the single-conv transformer ablation are trained, and we
ask whether the 16-head model's edge over the ablation grows from the
3-step to the 12-step horizon.

    python3 scripts/pems08_directional.py flows.csv [--epochs 100] [--seeds 0,1,2]
"""

from __future__ import annotations

import argparse

from mscmhmst import dataio, evaluation
from mscmhmst.model import ModelConfig, build_variant
from mscmhmst.training import TrainConfig, train


def subsample(series: dataio.FlowSeries, days: int = 14, sensors: int = 20) -> dataio.FlowSeries:
    steps = days * dataio.STEPS_PER_DAY
    if series.n_steps < steps or series.n_sensors < sensors:
        raise SystemExit(f"need at least {sensors} sensors x {steps} steps, file has "
                         f"{series.n_sensors} x {series.n_steps}")
    return series.select(series.sensor_ids[:sensors]).segment(0, steps)


def directional_check(path: str, seeds=(0, 1, 2), epochs: int = 100, days: int = 14,
                      sensors: int = 20, log=None) -> dict:
    series = subsample(dataio.load_series(path), days, sensors)
    tr, va, te = dataio.split_series(series, *dataio.proportional_split(series.n_steps))
    stats = dataio.normalize_stats(tr)
    train_ds, val_ds, test_ds = (dataio.make_windows(s, 12, 12, stats) for s in (tr, va, te))
    naive = evaluation.evaluate_horizons(
        None, test_ds, predict=lambda x: evaluation.naive_last_value(x, test_ds.t)
    )

    per_seed = []
    for seed in seeds:
        maes = {}
        for variant in ("MSCMHMST_16", "CNN1D_Transformer"):
            cfg = ModelConfig(variant=variant, c_in=series.n_sensors, seed=seed)
            model, _ = train(build_variant(cfg), train_ds, val_ds, TrainConfig(epochs=epochs, seed=seed), log=log)
            rep = evaluation.evaluate_horizons(model, test_ds)
            maes[variant] = {h: rep.horizons[h].mae for h in evaluation.HORIZONS}
        ours, base = maes["MSCMHMST_16"], maes["CNN1D_Transformer"]
        gain = {h: (base[h] - ours[h]) / base[h] for h in evaluation.HORIZONS}
        per_seed.append({
            "seed": seed,
            "mae": maes,
            "beats_naive": all(ours[h] < naive.horizons[h].mae for h in evaluation.HORIZONS),
            "gain": gain,
            "ordering_holds": gain[12] > gain[3],
        })
    return {
        "naive_mae": {h: naive.horizons[h].mae for h in evaluation.HORIZONS},
        "seeds": per_seed,
        "beats_naive": per_seed[0]["beats_naive"],
        "ordering_count": sum(s["ordering_holds"] for s in per_seed),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    r = directional_check(args.data, seeds, args.epochs)
    print("naive MAE", {h: round(v, 3) for h, v in r["naive_mae"].items()})
    for s in r["seeds"]:
        print(f"seed {s['seed']}: beats naive={s['beats_naive']} "
              f"gain@3={s['gain'][3]:+.3f} gain@12={s['gain'][12]:+.3f} ordering={s['ordering_holds']}")
    print(f"ordering holds in {r['ordering_count']}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
