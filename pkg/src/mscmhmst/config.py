"""Flat ``key = value`` experiment configs and run manifests.

One key per line, ``#`` starts a comment, unknown keys are errors.

=================  ==========================  =====================================
key                default                     meaning
=================  ==========================  =====================================
variant            MSCMHMST                    model variant (see ``model.VARIANTS``)
msc_kernels        3,5,7,9                     multi-scale conv kernel sizes (odd)
branch_channels    8                           channels per multi-scale branch
head_specs         default                     ``default``, ``default:N`` or ``1:3,3:5,...``
head_channels      2                           channels per (head, scale) feature map
d_model            8                           transformer width
encoder_layers     2                           transformer encoder layers
encoder_heads      2                           self-attention heads per layer
fc_hidden          64                          width of FC1
prune_threshold    0.0                         attention values below it are zeroed
residual           false                       1x1 residual around the conv encoder
h                  12                          history steps
t                  12                          forecast steps
c_in               (sensor count)              input channels; must match the data
seed               0                           seeds init, shuffling and run seeds
batch_size         32
learning_rate      0.001
epochs             100
loss_kind          mse                         ``mse`` or ``mae``
beta1, beta2       0.9, 0.999                  Adam moment decay
adam_eps           1e-8
shuffle            true
train_steps        0                           0 = split in PeMS04 ratios
val_steps          0
test_steps         0
sensors            (all)                       comma-separated sensor ids to keep
=================  ==========================  =====================================
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .errors import ConfigurationError
from .model import HeadSpec, ModelConfig, default_head_specs
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    train_steps: int = 0
    val_steps: int = 0
    test_steps: int = 0
    sensors: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensors"] = list(self.sensors)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    c_in_given: bool = False

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict()}


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_DATA_KEYS = {f.name for f in fields(DataConfig)}
KNOWN_KEYS = _MODEL_KEYS | _TRAIN_KEYS | _DATA_KEYS | {"seed"}


def _parse_bool(key: str, v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {v!r}")


def parse_head_specs(v: str) -> tuple[HeadSpec, ...]:
    v = v.strip()
    if v == "default":
        return default_head_specs(16)
    if v.startswith("default:"):
        n = int(v.split(":", 1)[1])
        if not 1 <= n <= 16:
            raise ConfigurationError(f"head_specs default:N needs 1 <= N <= 16, got {n}")
        return default_head_specs(n)
    return tuple(HeadSpec.from_scales(int(s) for s in part.split(":")) for part in v.split(","))


def _convert(key: str, raw: str, current):
    try:
        if key == "head_specs":
            return parse_head_specs(raw)
        if key == "msc_kernels":
            return tuple(int(x) for x in raw.split(","))
        if key == "sensors":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if isinstance(current, bool):
            return _parse_bool(key, raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} ({exc})") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    model_kw, train_kw, data_kw = {}, {}, {}
    c_in_given = base.c_in_given
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
        if key == "seed":
            seed = _convert(key, raw, 0)
            model_kw["seed"] = train_kw["seed"] = seed
        elif key in _MODEL_KEYS:
            model_kw[key] = _convert(key, raw, getattr(base.model, key))
            c_in_given |= key == "c_in"
        elif key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, getattr(base.train, key))
        else:
            data_kw[key] = _convert(key, raw, getattr(base.data, key))
    return ExperimentConfig(
        replace(base.model, **model_kw),
        replace(base.train, **train_kw),
        replace(base.data, **data_kw),
        c_in_given,
    )


def load_config(path: str | Path | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if path is None:
        return base or ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class RunManifest:
    """Everything needed to rerun an experiment bit for bit."""

    command: str
    config: dict
    dataset_sha256: str
    seeds: list[int]
    artifacts: list[str]
    extra: dict = field(default_factory=dict)
    tool_version: str = __version__

    def body(self) -> dict:
        return asdict(self)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.body()).encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        doc = {"manifest": self.body(), "sha256": self.sha256}
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
