"""``mscmhmst`` command line: synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 check failure, 2 configuration, 3 data,
4 checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, dataio, evaluation, numcore, synth
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, RunManifest, load_config
from .errors import CheckpointError, ConfigurationError, DataError, MSCMHMSTError
from .model import ModelConfig, build_variant, canonical_variant, default_head_specs
from .training import loss, train

log = logging.getLogger("mscmhmst")

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_CAPS = {"c_in": 4, "h": 16}
GRADCHECK_BASE = ExperimentConfig(
    model=ModelConfig(
        c_in=2, h=12, t=6, head_specs=default_head_specs(2), branch_channels=2,
        head_channels=2, encoder_layers=1, fc_hidden=16,
    ),
    c_in_given=True,
)


@dataclass
class Prepared:
    exp: ExperimentConfig
    fingerprint: str
    split: tuple[int, int, int]
    stats: dataio.NormStats
    sensor_ids: tuple[str, ...]
    train: dataio.WindowedDataset
    val: dataio.WindowedDataset
    test: dataio.WindowedDataset


def _load_data(path: str) -> dataio.FlowSeries:
    try:
        return dataio.load_series(path)
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc.strerror or exc}") from None


def prepare(exp: ExperimentConfig, data_path: str) -> Prepared:
    series = _load_data(data_path)
    if exp.data.sensors:
        series = series.select(exp.data.sensors)
    if exp.c_in_given and exp.model.c_in != series.n_sensors:
        raise ConfigurationError(
            f"c_in={exp.model.c_in} but the data has {series.n_sensors} sensors"
        )
    exp = replace(exp, model=replace(exp.model, c_in=series.n_sensors))
    d = exp.data
    if d.train_steps or d.val_steps or d.test_steps:
        split = (d.train_steps, d.val_steps, d.test_steps)
    else:
        split = dataio.proportional_split(series.n_steps)
    tr, va, te = dataio.split_series(series, *split)
    stats = dataio.normalize_stats(tr)
    h, t = exp.model.h, exp.model.t
    windows = [dataio.make_windows(seg, h, t, stats) for seg in (tr, va, te)]
    return Prepared(exp, dataio.fingerprint(data_path), split, stats, series.sensor_ids, *windows)


def _experiment_record(p: Prepared) -> dict:
    return {
        "split": list(p.split),
        "sensors": list(p.sensor_ids),
        "norm_mean": p.stats.mean.tolist(),
        "norm_std": p.stats.std.tolist(),
        "dataset_sha256": p.fingerprint,
    }


# --------------------------------------------------------------------------
# verbs


def cmd_synth(out: str, sensors: int, days: int, seed: int) -> int:
    if sensors < 1 or days < 1:
        raise ConfigurationError("sensors and days must be >= 1")
    series = synth.generate(sensors, days, seed)
    comments = [f"synthetic flows: sensors={sensors} days={days} seed={seed}", *synth.FORMULA]
    try:
        dataio.write_series(out, series, comments)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror or exc}") from None
    log.info("wrote %d steps x %d sensors to %s", series.n_steps, sensors, out)
    return 0


def cmd_train(config: str | None, data: str, out_dir: str) -> int:
    exp = load_config(config)
    p = prepare(exp, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="train",
        config=p.exp.to_dict(),
        dataset_sha256=p.fingerprint,
        seeds=[p.exp.model.seed],
        artifacts=["checkpoint.bin", "history.csv", "manifest.json"],
        extra={"split": list(p.split)},
    )
    model = build_variant(p.exp.model)
    log.info("variant %s, %d parameters, %d training windows",
             p.exp.model.variant, model.count_parameters(), len(p.train))
    model, history = train(model, p.train, p.val, p.exp.train, log=log.info)
    save_checkpoint(out / "checkpoint.bin", model, manifest.sha256, _experiment_record(p))
    history.to_csv(out / "history.csv", manifest.sha256)
    manifest.write(out / "manifest.json")
    log.info("best epoch %d, artifacts in %s", history.best_epoch, out)
    return 0


def cmd_eval(checkpoint: str, data: str, out: str) -> int:
    model, header = load_checkpoint(checkpoint)
    record = header.get("experiment") or {}
    for key in ("split", "sensors", "norm_mean", "norm_std"):
        if key not in record:
            raise CheckpointError(f"checkpoint lacks experiment field {key!r}")
    series = _load_data(data)
    try:
        series = series.select(record["sensors"])
    except ConfigurationError as exc:
        raise CheckpointError(f"checkpoint incompatible with data: {exc}") from None
    if series.n_sensors != model.config.c_in:
        raise CheckpointError(f"checkpoint expects {model.config.c_in} sensors, data has {series.n_sensors}")
    try:
        _, _, test_seg = dataio.split_series(series, *record["split"])
    except ConfigurationError as exc:
        raise CheckpointError(f"checkpoint split incompatible with data: {exc}") from None
    stats = dataio.NormStats(np.array(record["norm_mean"]), np.array(record["norm_std"]))
    test = dataio.make_windows(test_seg, model.config.h, model.config.t, stats)
    meta = {
        "variant": model.config.variant,
        "seed": model.config.seed,
        "dataset": dataio.fingerprint(data)[:16],
    }
    report = evaluation.evaluate_horizons(model, test, metadata=meta)
    _write_reports(Path(out), "report", [report], header.get("manifest_sha256", ""))
    return 0


def _write_reports(out: Path, stem: str, reports, manifest_hash: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    table = evaluation.format_table(reports)
    (out / f"{stem}.txt").write_text(f"# manifest_sha256={manifest_hash}\n{table}", encoding="utf-8")
    (out / f"{stem}.csv").write_text(evaluation.records_csv(reports, manifest_hash), encoding="utf-8")


def _ablation_cell(args):
    exp, prepared, variant, seed = args
    mcfg = replace(exp.model, variant=variant, seed=seed)
    tcfg = replace(exp.train, seed=seed)
    model, _ = train(build_variant(mcfg), prepared.train, prepared.val, tcfg)
    report = evaluation.evaluate_horizons(model, prepared.test, metadata={"variant": variant, "seed": seed})
    return model.count_parameters(), report


def cmd_ablate(
    config: str | None, data: str, variants: list[str], runs: int, out_dir: str, jobs: int = 1
) -> int:
    variants = [canonical_variant(v) for v in variants]
    if not variants:
        raise ConfigurationError("no variants given")
    if runs < 3:
        raise ConfigurationError(f"ablation needs runs >= 3, got {runs}")
    exp = load_config(config)
    p = prepare(exp, data)
    base_seed = p.exp.model.seed
    seeds = [base_seed + r for r in range(runs)]
    cells = [(p.exp, p, v, s) for v in variants for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_cell, cells))
    else:
        results = [_ablation_cell(c) for c in cells]

    if runs == 10:
        reduce, how = evaluation.trimmed_mean_protocol, "z-score trimmed mean (drop 2 of 10)"
    else:
        reduce, how = (lambda xs: float(np.mean(xs))), f"plain mean of {runs} runs"
        log.info("runs=%d: trimming applies only to 10 runs; using the plain mean", runs)

    summary, per_run, params = [], [], {}
    for i, variant in enumerate(variants):
        chunk = results[i * runs : (i + 1) * runs]
        params[variant] = chunk[0][0]
        reports = [r for _, r in chunk]
        per_run.extend(reports)
        horizons = {}
        for h in evaluation.HORIZONS:
            vals = {m: [r.horizons[h].as_dict()[m] for r in reports] for m in evaluation.METRIC_NAMES}
            agg = {m: reduce(v) for m, v in vals.items()}
            horizons[h] = evaluation.Metrics(agg["MAE"], agg["MSE"], agg["RMSE"], agg["MAPE"])
        summary.append(evaluation.EvalReport(horizons, {"variant": variant}))

    manifest = RunManifest(
        command="ablate",
        config=p.exp.to_dict(),
        dataset_sha256=p.fingerprint,
        seeds=seeds,
        artifacts=["ablation.txt", "ablation.csv", "ablation_runs.csv", "manifest.json"],
        extra={"variants": variants, "runs": runs, "aggregation": how,
               "parameters": params, "split": list(p.split)},
    )
    out = Path(out_dir)
    _write_reports(out, "ablation", summary, manifest.sha256)
    (out / "ablation_runs.csv").write_text(
        evaluation.records_csv(per_run, manifest.sha256, extra=("seed",)), encoding="utf-8"
    )
    manifest.write(out / "manifest.json")
    print(evaluation.format_table(summary), end="")
    return 0


def run_gradcheck(exp: ExperimentConfig, corrupt_op: str | None = None):
    m = exp.model
    for key, cap in GRADCHECK_CAPS.items():
        if getattr(m, key) > cap:
            raise ConfigurationError(f"gradcheck caps {key} at {cap}, config has {getattr(m, key)}")
    model = build_variant(m)
    rng = np.random.default_rng(m.seed)
    x = rng.normal(size=(2, m.c_in, m.h))
    y = numcore.Tensor(rng.normal(size=(2, m.c_in, m.t)))

    def objective():
        return loss(model.forward(x), y, "mse")

    if corrupt_op:
        with numcore.corrupt_gradient(corrupt_op):
            return numcore.gradcheck(objective, model.params, eps=1e-5)
    return numcore.gradcheck(objective, model.params, eps=1e-5)


def cmd_gradcheck(config: str | None, corrupt_op: str | None = None) -> int:
    exp = load_config(config, GRADCHECK_BASE)
    result = run_gradcheck(exp, corrupt_op)
    ok = result.max_error <= GRADCHECK_TOLERANCE
    print(f"variant: {exp.model.variant}")
    print(f"parameter arrays checked: {len(result.per_parameter)}")
    print(f"max relative error: {result.max_error:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    print(f"worst parameter array: {result.worst_parameter}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscmhmst", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic matrix_csv flow file")
    p.add_argument("--out", required=True)
    p.add_argument("--sensors", type=int, default=2)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint at 3/6/12 steps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for report.txt/report.csv")

    p = sub.add_parser("ablate", help="repeated-run comparison of variants")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s", stream=sys.stderr,
    )
    try:
        if args.verb == "synth":
            return cmd_synth(args.out, args.sensors, args.days, args.seed)
        if args.verb == "train":
            return cmd_train(args.config, args.data, args.out_dir)
        if args.verb == "eval":
            return cmd_eval(args.checkpoint, args.data, args.out)
        if args.verb == "ablate":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            return cmd_ablate(args.config, args.data, variants, args.runs, args.out_dir, args.jobs)
        return cmd_gradcheck(args.config, args.corrupt_op)
    except MSCMHMSTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
