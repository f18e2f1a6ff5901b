"""Losses, Adam, the seeded minibatch training loop and grid sweeps."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataio import WindowedDataset
from .errors import ConfigurationError
from .model import MSCMHMSTModel, ModelConfig, build_variant
from .numcore import ParameterSet, Tensor

# second entropy word of the shuffle stream; keeps it apart from init streams
SHUFFLE_STREAM = 0x5F3759DF


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 100
    loss_kind: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.loss_kind not in ("mse", "mae"):
            raise ConfigurationError(f"loss_kind must be 'mse' or 'mae', got {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    initial_val_loss: float = float("nan")
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path: str | Path, manifest_hash: str = "", timings: bool = True) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if manifest_hash:
                fh.write(f"# manifest_sha256={manifest_hash}\n")
            fh.write("epoch,train_loss,val_loss,seconds\n" if timings else "epoch,train_loss,val_loss\n")
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                row = f"{i},{tr!r},{va!r}"
                if timings:
                    row += f",{self.seconds[i]:.3f}"
                fh.write(row + "\n")


def loss(pred: Tensor, target: Tensor, kind: str = "mse") -> Tensor:
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    diff = nc.sub(pred, target)
    if kind == "mse":
        return nc.mean(nc.hadamard(diff, diff))
    if kind == "mae":
        return nc.mean(nc.absolute(diff))
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def loss_value(pred: np.ndarray, target: np.ndarray, kind: str = "mse") -> float:
    d = pred - target
    return float(np.mean(d * d) if kind == "mse" else np.mean(np.abs(d)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParameterSet, state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place.  Gradients are left as is."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


def evaluate_loss(model: MSCMHMSTModel, ds: WindowedDataset, kind: str = "mse") -> float:
    return loss_value(model.predict(ds.inputs), ds.targets_norm, kind)


def train(
    model: MSCMHMSTModel,
    dataset: WindowedDataset,
    val: WindowedDataset | None,
    config: TrainConfig,
    log=None,
) -> tuple[MSCMHMSTModel, TrainHistory]:
    """Minibatch Adam training; restores the best-validation epoch at the end.

    The per-epoch train loss is the sample-weighted mean of batch losses.
    Without ``val`` the train loss drives selection.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("training dataset is empty")
    c = model.config
    if dataset.inputs.shape[1:] != (c.c_in, c.h) or dataset.targets.shape[2] != c.t:
        raise ConfigurationError(
            f"dataset windows {dataset.inputs.shape[1:]}->{dataset.targets.shape[2]} "
            f"do not match model [{c.c_in}, {c.h}]->{c.t}"
        )
    rng = np.random.default_rng([config.seed, SHUFFLE_STREAM])
    state = AdamState()
    history = TrainHistory()
    history.initial_train_loss = evaluate_loss(model, dataset, config.loss_kind)
    if val is not None:
        history.initial_val_loss = evaluate_loss(model, val, config.loss_kind)

    best_score, best_state = float("inf"), None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model.params.zero_grad()
            with nc.Graph() as graph:
                pred = model.forward(dataset.inputs[idx])
                batch_loss = loss(pred, Tensor(dataset.targets_norm[idx]), config.loss_kind)
            graph.backward(batch_loss)
            adam_step(model.params, state, config)
            total += batch_loss.item() * len(idx)
        model.params.zero_grad()
        train_loss = total / n
        val_loss = evaluate_loss(model, val, config.loss_kind) if val is not None else float("nan")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - t0)
        score = val_loss if val is not None else train_loss
        if score < best_score:
            best_score, best_state = score, model.params.state_dict()
            history.best_epoch = epoch
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_loss:.6f}  val {val_loss:.6f}")
    if best_state is not None:
        model.params.load_state_dict(best_state)
    return model, history


@dataclass
class SweepResult:
    overrides: dict
    model_config: ModelConfig
    train_config: TrainConfig
    val_loss: float
    history: TrainHistory


def expand_grid(grid: dict[str, list], cap: int = 64) -> list[dict]:
    if not grid:
        raise ConfigurationError("grid must name at least one parameter")
    sizes = [len(v) for v in grid.values()]
    total = int(np.prod(sizes))
    if total == 0:
        raise ConfigurationError("every grid axis needs at least one value")
    if total > cap:
        raise ConfigurationError(f"grid has {total} combinations, over the cap of {cap}")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]


def grid_sweep(
    base_model: ModelConfig,
    base_train: TrainConfig,
    grid: dict[str, list],
    dataset: WindowedDataset,
    val: WindowedDataset,
    cap: int = 64,
) -> list[SweepResult]:
    """Train every grid combination with the shared seeds; best first."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(grid) - model_keys - train_keys
    if unknown:
        raise ConfigurationError(f"unknown grid keys: {sorted(unknown)}")
    results = []
    for overrides in expand_grid(grid, cap):
        mcfg = replace(base_model, **{k: v for k, v in overrides.items() if k in model_keys})
        tcfg = replace(base_train, **{k: v for k, v in overrides.items() if k in train_keys})
        model, history = train(build_variant(mcfg), dataset, val, tcfg)
        best = history.val_loss[history.best_epoch]
        results.append(SweepResult(overrides, mcfg, tcfg, best, history))
    # stable sort keeps enumeration order among ties
    return sorted(results, key=lambda r: r.val_loss)
