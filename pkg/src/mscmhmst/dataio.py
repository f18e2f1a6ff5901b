"""Flow-series ingest, chronological splits, normalisation and windowing."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError

# PeMS04 split in steps; used as ratios when a series is not split explicitly
PEMS04_SPLIT = (12672, 1440, 2880)
PEMS08_SPLIT = (13536, 1440, 2880)
STEPS_PER_DAY = 288


@dataclass(frozen=True)
class FlowSeries:
    """``values`` is ``[S, T]``: one row per sensor, one column per step."""

    values: np.ndarray
    sensor_ids: tuple[str, ...] = ()
    interval_minutes: int = 5

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"flow series must be [S>=1, T>=1], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("flow series contains non-finite values")
        if np.any(v < 0):
            raise DataError("flow series contains negative flows")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not self.sensor_ids:
            ids = tuple(f"s{i}" for i in range(v.shape[0]))
            object.__setattr__(self, "sensor_ids", ids)

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def segment(self, start: int, stop: int) -> "FlowSeries":
        return FlowSeries(self.values[:, start:stop], self.sensor_ids, self.interval_minutes)

    def select(self, sensors: Sequence[str]) -> "FlowSeries":
        """Restrict to the named sensor columns, in the given order."""
        missing = [s for s in sensors if s not in self.sensor_ids]
        if missing:
            raise ConfigurationError(f"unknown sensor ids: {missing}")
        rows = [self.sensor_ids.index(s) for s in sensors]
        return FlowSeries(self.values[rows], tuple(sensors), self.interval_minutes)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # [S]
    std: np.ndarray  # [S]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Sensor axis is second to last: ``[..., S, steps]``."""
        return (x - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None] + self.mean[:, None]


@dataclass(frozen=True)
class WindowedDataset:
    """Aligned history/target windows.

    ``inputs`` is ``[N, S, h]`` (normalised); ``targets`` is ``[N, S, t]``
    in raw units and ``targets_norm`` the same in normalised units.
    ``start`` holds each window's first history step within its segment.
    """

    inputs: np.ndarray
    targets: np.ndarray
    targets_norm: np.ndarray
    start: np.ndarray
    h: int
    t: int
    stats: NormStats

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def norm_mean(self) -> np.ndarray:
        return self.stats.mean

    @property
    def norm_std(self) -> np.ndarray:
        return self.stats.std

    @property
    def raw_inputs(self) -> np.ndarray:
        return self.stats.denormalize(self.inputs)


def load_series(path: str | Path, layout: str = "matrix_csv") -> FlowSeries:
    """Read a ``matrix_csv`` file: header of sensor ids, one row per step.

    Lines starting with ``#`` are comments.  Row numbers in errors count data
    rows from 1, column numbers count from 1.
    """
    if layout != "matrix_csv":
        raise ConfigurationError(f"unsupported layout {layout!r}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text ({exc})") from exc

    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataError(f"{path}: no header row")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    rows = []
    for r, row in enumerate(reader, start=1):
        if len(row) != len(header):
            raise DataError(
                f"{path}: row {r} has {len(row)} cells, header has {len(header)}"
            )
        vals = []
        for c, cell in enumerate(row, start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c}: non-numeric cell {cell!r}") from None
        rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return FlowSeries(np.array(rows, dtype=np.float64).T, tuple(header))


def write_series(path: str | Path, series: FlowSeries, comments: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(series.sensor_ids) + "\n")
        for row in series.values.T:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_series(
    series: FlowSeries, train_steps: int, val_steps: int, test_steps: int
) -> tuple[FlowSeries, FlowSeries, FlowSeries]:
    if min(train_steps, val_steps, test_steps) < 1:
        raise ConfigurationError("split lengths must be positive")
    total = train_steps + val_steps + test_steps
    if total > series.n_steps:
        raise ConfigurationError(
            f"split {train_steps}/{val_steps}/{test_steps} needs {total} steps, "
            f"series has {series.n_steps}"
        )
    a, b = train_steps, train_steps + val_steps
    return series.segment(0, a), series.segment(a, b), series.segment(b, total)


def proportional_split(n_steps: int, ratios: Sequence[int] = PEMS04_SPLIT) -> tuple[int, int, int]:
    """Split ``n_steps`` in the given ratios; the remainder goes to train."""
    total = sum(ratios)
    val = max(1, round(n_steps * ratios[1] / total))
    test = max(1, round(n_steps * ratios[2] / total))
    return n_steps - val - test, val, test


def normalize_stats(train_segment: FlowSeries) -> NormStats:
    v = train_segment.values
    mean = v.mean(axis=1)
    std = v.std(axis=1)
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean, std)


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.denormalize(np.asarray(x, dtype=np.float64))


def count_windows(n_steps: int, h: int, t: int) -> int:
    return n_steps - h - t + 1


def make_windows(segment: FlowSeries, h: int, t: int, stats: NormStats) -> WindowedDataset:
    if h < 1 or t < 1:
        raise ConfigurationError(f"history and horizon must be >= 1 (h={h}, t={t})")
    n = count_windows(segment.n_steps, h, t)
    if n < 1:
        raise ConfigurationError(
            f"segment of {segment.n_steps} steps too short for h={h}, t={t}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(segment.values, h + t, axis=1)
    windows = np.ascontiguousarray(windows.transpose(1, 0, 2))  # [N, S, h+t]
    raw_inputs = windows[:, :, :h]
    targets = windows[:, :, h:].copy()
    return WindowedDataset(
        inputs=stats.normalize(raw_inputs),
        targets=targets,
        targets_norm=stats.normalize(targets),
        start=np.arange(n),
        h=h,
        t=t,
        stats=stats,
    )
