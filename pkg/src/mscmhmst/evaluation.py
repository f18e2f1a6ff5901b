"""Forecast metrics, multi-horizon reports and the repeated-run trimmed mean."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataio import WindowedDataset
from .errors import ConfigurationError

HORIZONS = (3, 6, 12)
METRIC_NAMES = ("MAE", "MSE", "RMSE", "MAPE")


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    rmse: float
    mape: float  # percent; nan when every actual value is zero

    def as_dict(self) -> dict[str, float]:
        return {"MAE": self.mae, "MSE": self.mse, "RMSE": self.rmse, "MAPE": self.mape}


def metrics(actual, predicted) -> Metrics:
    """MAE, MSE, RMSE and MAPE over all elements.

    MAPE skips elements whose actual value is zero and is NaN when none remain.
    """
    y = np.asarray(actual, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ConfigurationError(f"metrics shape mismatch {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ConfigurationError("metrics need at least one element")
    err = y - yhat
    mse = float(np.mean(err * err))
    nonzero = y != 0
    if nonzero.any():
        mape = float(100.0 * np.mean(np.abs(err[nonzero]) / np.abs(y[nonzero])))
    else:
        mape = float("nan")
    return Metrics(float(np.mean(np.abs(err))), mse, math.sqrt(mse), mape)


@dataclass
class EvalReport:
    horizons: dict[int, Metrics]
    metadata: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        variant = self.metadata.get("variant", "")
        return [
            {"variant": variant, "horizon_steps": h, "horizon_minutes": 5 * h,
             "metric": name, "value": value}
            for h, m in sorted(self.horizons.items())
            for name, value in m.as_dict().items()
        ]


def evaluate_horizons(
    model,
    test: WindowedDataset,
    horizons: Sequence[int] = HORIZONS,
    metadata: Mapping | None = None,
    predict: Callable[[np.ndarray], np.ndarray] | None = None,
) -> EvalReport:
    """Score denormalised forecasts truncated to each horizon.

    ``predict`` maps normalised inputs ``[N, S, h]`` to normalised forecasts
    ``[N, S, t]``; it defaults to ``model.predict``.
    """
    if test.t < max(horizons):
        raise ConfigurationError(f"evaluation needs t >= {max(horizons)}, dataset has t={test.t}")
    predict = predict or model.predict
    pred_norm = predict(test.inputs)
    if pred_norm.shape[-1] < max(horizons):
        raise ConfigurationError(f"model horizon {pred_norm.shape[-1]} < {max(horizons)}")
    pred = test.stats.denormalize(pred_norm)
    rows = {h: metrics(test.targets[:, :, :h], pred[:, :, :h]) for h in horizons}
    return EvalReport(rows, dict(metadata or {}))


def naive_last_value(inputs: np.ndarray, t: int) -> np.ndarray:
    """Repeat the last history step across the horizon."""
    return np.repeat(inputs[:, :, -1:], t, axis=2)


def trimmed_mean_protocol(runs: Sequence[float], expected: int = 10) -> float:
    """Mean after dropping the runs with the largest |Z|.

    ``expected // 5`` runs are dropped (2 of 10).  Ties in |Z| are broken by
    run order.  With zero spread the plain mean is returned.
    """
    values = np.asarray(runs, dtype=np.float64)
    if values.ndim != 1 or values.size != expected:
        raise ConfigurationError(f"trimmed mean needs exactly {expected} runs, got {values.size}")
    std = values.std()
    if std == 0:
        return float(values.mean())
    z = np.abs(values - values.mean()) / std
    drop = np.argsort(-z, kind="stable")[: expected // 5]
    keep = np.delete(values, drop)
    return float(keep.mean())


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.4f}"


def format_table(reports: Sequence[EvalReport], horizons: Sequence[int] = HORIZONS) -> str:
    """Plain-text table: one row per report, metric blocks per horizon."""
    name_w = max([len("Model")] + [len(str(r.metadata.get("variant", ""))) for r in reports])
    col_w = 11
    head1 = "Model".ljust(name_w) + "".join(
        f" | {f'{5 * h}m({h}step)':^{col_w * 4}}" for h in horizons
    )
    head2 = " " * name_w + "".join(
        " | " + "".join(f"{m:>{col_w}}" for m in METRIC_NAMES) for _ in horizons
    )
    lines = [head1, head2, "-" * len(head2)]
    for r in reports:
        cells = "".join(
            " | " + "".join(f"{_fmt(v):>{col_w}}" for v in r.horizons[h].as_dict().values())
            for h in horizons
        )
        lines.append(str(r.metadata.get("variant", "")).ljust(name_w) + cells)
    return "\n".join(lines) + "\n"


def records_csv(
    reports: Sequence[EvalReport], manifest_hash: str = "", extra: Sequence[str] = ()
) -> str:
    """One CSV row per report x horizon x metric; ``extra`` names metadata columns."""
    buf = io.StringIO()
    if manifest_hash:
        buf.write(f"# manifest_sha256={manifest_hash}\n")
    columns = ["variant", "horizon_steps", "horizon_minutes", "metric", "value", *extra]
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        meta = {k: r.metadata.get(k, "") for k in extra}
        for rec in r.records():
            writer.writerow({**rec, "value": repr(rec["value"]), **meta})
    return buf.getvalue()
