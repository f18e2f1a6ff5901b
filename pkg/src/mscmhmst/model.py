"""MSCMHMST network: multi-scale conv encoder, multi-head multi-scale
sigmoid-gated attention, transformer encoder and dense output head.

All layers are functions over a :class:`~mscmhmst.numcore.ParameterSet`
addressed by dotted name prefixes, so ablation variants that share a
component also share its parameter names (and, through name-seeded
initialisation, its initial values).
"""

from __future__ import annotations

import functools
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError
from .numcore import ParameterSet, Tensor

log = logging.getLogger(__name__)

# head scale pairs in the published order; even sizes are rounded up to odd
DEFAULT_HEAD_SCALES: tuple[tuple[int, int], ...] = (
    (1, 3), (3, 5), (5, 7), (7, 9), (1, 5), (3, 7), (5, 9), (1, 7),
    (1, 9), (2, 6), (4, 8), (3, 9), (2, 4), (4, 6), (6, 8), (8, 10),
)

VARIANTS = (
    "MSCMHMST",
    "MSCMHMST_4",
    "MSCMHMST_8",
    "MSCMHMST_16",
    "CNN1D_Transformer",
    "CNN1D_MHMST",
    "MSC_Transformer",
    "MSC1R_MHMST1L",
    "MSC2R_MHMST2L",
    "MSC3R_MHMST3L",
)
_ALIASES = {
    "1DCNN_Transformer": "CNN1D_Transformer",
    "1DCNN_MHMST": "CNN1D_MHMST",
}


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass(frozen=True)
class HeadSpec:
    """Kernel scales of one attention head, e.g. ``HeadSpec((1, 3))``."""

    scales: tuple[int, ...]

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ConfigurationError("a head needs at least one scale")
        if len(set(scales)) != len(scales):
            raise ConfigurationError(f"duplicate scales in head {scales}")
        for s in scales:
            if s < 1 or s % 2 == 0:
                raise ConfigurationError(f"head scales must be odd and >= 1, got {scales}")
        object.__setattr__(self, "scales", scales)

    @classmethod
    def from_scales(cls, scales: Iterable[int]) -> "HeadSpec":
        """Build a head, rounding even sizes up to the next odd size."""
        raw = [int(s) for s in scales]
        fixed = []
        for s in raw:
            s = s + 1 if s >= 1 and s % 2 == 0 else s
            if s not in fixed:
                fixed.append(s)
        if fixed != raw:
            log.warning("head scales %s contain even sizes; using %s", tuple(raw), tuple(fixed))
        return cls(tuple(fixed))

    def __len__(self) -> int:
        return len(self.scales)


@functools.lru_cache(maxsize=None)
def default_head_specs(n: int = 16) -> tuple[HeadSpec, ...]:
    return tuple(HeadSpec.from_scales(p) for p in DEFAULT_HEAD_SCALES[:n])


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "MSCMHMST"
    msc_kernels: tuple[int, ...] = (3, 5, 7, 9)
    branch_channels: int = 8
    head_specs: tuple[HeadSpec, ...] = field(default_factory=default_head_specs)
    head_channels: int = 2
    d_model: int = 8
    encoder_layers: int = 2
    encoder_heads: int = 2
    fc_hidden: int = 64
    prune_threshold: float = 0.0
    residual: bool = False
    h: int = 12
    t: int = 12
    c_in: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "msc_kernels", tuple(int(k) for k in self.msc_kernels))
        specs = tuple(
            s if isinstance(s, HeadSpec) else HeadSpec.from_scales(s) for s in self.head_specs
        )
        object.__setattr__(self, "head_specs", specs)
        self.validate()

    def validate(self) -> None:
        if not self.msc_kernels or any(k < 1 or k % 2 == 0 for k in self.msc_kernels):
            raise ConfigurationError(f"msc_kernels must be odd and >= 1: {self.msc_kernels}")
        if not self.head_specs:
            raise ConfigurationError("head_specs must not be empty")
        for name in ("branch_channels", "head_channels", "d_model", "encoder_heads",
                     "fc_hidden", "h", "t", "c_in"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.encoder_layers < 0:
            raise ConfigurationError("encoder_layers must be >= 0")
        if self.d_model % self.encoder_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by encoder_heads={self.encoder_heads}"
            )
        if self.d_model % 2:
            raise ConfigurationError(f"d_model must be even for positional encoding, got {self.d_model}")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ConfigurationError(f"prune_threshold must lie in [0, 1), got {self.prune_threshold}")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["msc_kernels"] = list(self.msc_kernels)
        d["head_specs"] = [list(s.scales) for s in self.head_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "head_specs" in d:
            d["head_specs"] = tuple(HeadSpec(tuple(s)) for s in d["head_specs"])
        if "msc_kernels" in d:
            d["msc_kernels"] = tuple(d["msc_kernels"])
        return cls(**d)


@dataclass(frozen=True)
class VariantPlan:
    """Resolved layer layout for one variant."""

    encoder: str  # "msc" or "conv1d"
    residual_blocks: int
    heads: tuple[HeadSpec, ...]  # empty = no MHMS stage
    dense_blocks: int

    def layers(self, encoder_layers: int) -> list[str]:
        out = ["MultiScaleConvBlock" if self.encoder == "msc" else "Conv1d(k=3)"]
        out += ["ResidualConvBlock"] * self.residual_blocks
        if self.heads:
            out.append(f"MHMSAttention(heads={len(self.heads)})")
        out += ["ChannelProjection", "PositionalEncoding"]
        out += ["TransformerEncoderLayer"] * encoder_layers
        out += ["FC1"] + ["ResidualDenseBlock"] * self.dense_blocks + ["FC2"]
        return out


def resolve_variant(config: ModelConfig) -> VariantPlan:
    v = config.variant
    specs = config.head_specs
    if v == "MSCMHMST":
        return VariantPlan("msc", 0, specs, 0)
    if v.startswith("MSCMHMST_"):
        n = int(v.split("_")[1])
        if len(specs) < n:
            raise ConfigurationError(f"{v} needs {n} head specs, config has {len(specs)}")
        return VariantPlan("msc", 0, specs[:n], 0)
    if v == "CNN1D_Transformer":
        return VariantPlan("conv1d", 0, (), 0)
    if v == "CNN1D_MHMST":
        return VariantPlan("conv1d", 0, specs, 0)
    if v == "MSC_Transformer":
        return VariantPlan("msc", 0, (), 0)
    # MSC{n}R_MHMST{n}L
    n = int(v[3])
    return VariantPlan("msc", n, specs, n)


# --------------------------------------------------------------------------
# layers


def multi_scale_conv_block(
    x: Tensor, params: ParameterSet, kernels: Sequence[int], residual: bool = False,
    prefix: str = "msc",
) -> Tensor:
    """Parallel same-length convolutions, relu, channel concatenation.

    With ``residual`` a 1x1 projection of ``x`` is added to the result.
    """
    branches = [
        nc.relu(nc.conv1d_same(x, params[f"{prefix}.k{k}.weight"], params[f"{prefix}.k{k}.bias"]))
        for k in kernels
    ]
    z = nc.concat_channels(branches)
    if residual:
        z = nc.add(z, nc.conv1d_same(x, params[f"{prefix}.skip.weight"], params[f"{prefix}.skip.bias"]))
    return z


def mhms_attention(
    x: Tensor,
    head_specs: Sequence[HeadSpec],
    params: ParameterSet,
    prune_threshold: float = 0.0,
    prefix: str = "mhms",
    trace: dict | None = None,
) -> Tensor:
    """Multi-head multi-scale gated features.

    For head ``i`` and scale ``k``: ``F = conv_k(x)``,
    ``A = sigmoid(conv_k^att(F))``, ``W = A * F``.  Attention values below
    ``prune_threshold`` are zeroed before the product.  Outputs are
    concatenated over scales, then over heads.

    If ``trace`` is given, it receives ``"maps"`` (gating maps before
    pruning) and ``"pruned"`` (after pruning) as lists of arrays.
    """
    if not head_specs:
        raise ConfigurationError("mhms_attention needs at least one head")
    if trace is not None:
        trace.setdefault("maps", [])
        trace.setdefault("pruned", [])
    heads = []
    for i, spec in enumerate(head_specs):
        weighted = []
        for k in spec.scales:
            base = f"{prefix}.h{i}.k{k}"
            feat = nc.conv1d_same(x, params[f"{base}.feat.weight"], params[f"{base}.feat.bias"])
            att = nc.sigmoid(
                nc.conv1d_same(feat, params[f"{base}.att.weight"], params[f"{base}.att.bias"])
            )
            if trace is not None:
                trace["maps"].append(att.data.copy())
            if prune_threshold > 0.0:
                keep = (att.data >= prune_threshold).astype(np.float64)
                att = nc.hadamard(att, Tensor(keep))
            if trace is not None:
                trace["pruned"].append(att.data.copy())
            weighted.append(nc.hadamard(att, feat))
        heads.append(nc.concat_channels(weighted))
    return nc.concat_channels(heads)


def mhms_channels(head_specs: Sequence[HeadSpec], head_channels: int) -> int:
    return sum(len(s) for s in head_specs) * head_channels


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table ``[length, d_model]`` with base 10000."""
    if d_model % 2:
        raise ConfigurationError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def transformer_encoder_layer(
    x: Tensor, params: ParameterSet, n_heads: int, prefix: str = "enc0",
    trace: dict | None = None,
) -> Tensor:
    """Post-norm encoder layer on ``[L, d]`` or ``[B, L, d]``."""
    unbatched = x.ndim == 2
    if unbatched:
        x = nc.reshape(x, (1,) + x.shape)
    b, length, d = x.shape
    dh = d // n_heads
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731

    def heads(name):
        proj = nc.linear(x, p(f"{name}.weight"), p(f"{name}.bias"))
        return nc.transpose(nc.reshape(proj, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = nc.softmax_rows(scores)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data.copy())
    ctx = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (b, length, d))
    sa = nc.linear(ctx, p("o.weight"), p("o.bias"))
    y = nc.layer_norm(nc.add(x, sa), p("ln1.gain"), p("ln1.shift"))
    hidden = nc.relu(nc.linear(y, p("ffn1.weight"), p("ffn1.bias")))
    ff = nc.linear(hidden, p("ffn2.weight"), p("ffn2.bias"))
    out = nc.layer_norm(nc.add(y, ff), p("ln2.gain"), p("ln2.shift"))
    if unbatched:
        out = nc.reshape(out, (length, d))
    return out


# --------------------------------------------------------------------------
# the model


def _init_array(seed: int, name: str, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "bias":
        return np.zeros(shape)
    if kind == "gain":
        return np.ones(shape)
    # conv [C_out, C_in, k] -> fan_in C_in*k; linear [D_in, D_out] -> D_in
    fan_in = shape[1] * shape[2] if len(shape) == 3 else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-bound, bound, size=shape)


class MSCMHMSTModel:
    """A built variant: its config, resolved plan and parameters."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.plan = resolve_variant(config)
        self.params = ParameterSet()
        self._pe = positional_encoding(config.h, config.d_model)
        for name, shape, kind in self._layout():
            self.params.add(name, _init_array(config.seed, name, shape, kind))

    @property
    def layers(self) -> list[str]:
        return self.plan.layers(self.config.encoder_layers)

    @property
    def encoder_channels(self) -> int:
        c = self.config
        return len(c.msc_kernels) * c.branch_channels

    def _layout(self):
        c, plan = self.config, self.plan
        width = self.encoder_channels
        if plan.encoder == "msc":
            for k in c.msc_kernels:
                yield f"msc.k{k}.weight", (c.branch_channels, c.c_in, k), "weight"
                yield f"msc.k{k}.bias", (c.branch_channels,), "bias"
        else:
            yield "conv1d.k3.weight", (width, c.c_in, 3), "weight"
            yield "conv1d.k3.bias", (width,), "bias"
        if c.residual:
            prefix = "msc" if plan.encoder == "msc" else "conv1d"
            yield f"{prefix}.skip.weight", (width, c.c_in, 1), "weight"
            yield f"{prefix}.skip.bias", (width,), "bias"
        for r in range(plan.residual_blocks):
            yield f"res{r}.weight", (width, width, 3), "weight"
            yield f"res{r}.bias", (width,), "bias"
        channels = width
        if plan.heads:
            ch = c.head_channels
            for i, spec in enumerate(plan.heads):
                for k in spec.scales:
                    base = f"mhms.h{i}.k{k}"
                    yield f"{base}.feat.weight", (ch, width, k), "weight"
                    yield f"{base}.feat.bias", (ch,), "bias"
                    yield f"{base}.att.weight", (ch, ch, k), "weight"
                    yield f"{base}.att.bias", (ch,), "bias"
            channels = mhms_channels(plan.heads, ch)
        d = c.d_model
        yield "proj.weight", (channels, d), "weight"
        yield "proj.bias", (d,), "bias"
        for l in range(c.encoder_layers):
            e = f"enc{l}"
            for name in ("q", "k", "v", "o"):
                yield f"{e}.{name}.weight", (d, d), "weight"
                yield f"{e}.{name}.bias", (d,), "bias"
            yield f"{e}.ln1.gain", (d,), "gain"
            yield f"{e}.ln1.shift", (d,), "bias"
            yield f"{e}.ffn1.weight", (d, 4 * d), "weight"
            yield f"{e}.ffn1.bias", (4 * d,), "bias"
            yield f"{e}.ffn2.weight", (4 * d, d), "weight"
            yield f"{e}.ffn2.bias", (d,), "bias"
            yield f"{e}.ln2.gain", (d,), "gain"
            yield f"{e}.ln2.shift", (d,), "bias"
        yield "fc1.weight", (c.h * d, c.fc_hidden), "weight"
        yield "fc1.bias", (c.fc_hidden,), "bias"
        for n in range(plan.dense_blocks):
            yield f"dec{n}.weight", (c.fc_hidden, c.fc_hidden), "weight"
            yield f"dec{n}.bias", (c.fc_hidden,), "bias"
        yield "fc2.weight", (c.fc_hidden, c.c_in * c.t), "weight"
        yield "fc2.bias", (c.c_in * c.t,), "bias"

    def forward(self, batch, trace: dict | None = None) -> Tensor:
        """Map ``[B, C_in, h]`` normalised history to ``[B, C_in, t]``."""
        c, plan, p = self.config, self.plan, self.params
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 3 or x.shape[1:] != (c.c_in, c.h):
            raise ConfigurationError(
                f"batch shape {x.shape} does not match [B, {c.c_in}, {c.h}]"
            )
        b = x.shape[0]
        if plan.encoder == "msc":
            z = multi_scale_conv_block(x, p, c.msc_kernels, c.residual, prefix="msc")
        else:
            z = nc.relu(nc.conv1d_same(x, p["conv1d.k3.weight"], p["conv1d.k3.bias"]))
            if c.residual:
                z = nc.add(z, nc.conv1d_same(x, p["conv1d.skip.weight"], p["conv1d.skip.bias"]))
        for r in range(plan.residual_blocks):
            z = nc.add(z, nc.relu(nc.conv1d_same(z, p[f"res{r}.weight"], p[f"res{r}.bias"])))
        if plan.heads:
            z = mhms_attention(z, plan.heads, p, c.prune_threshold, trace=trace)
        seq = nc.linear(nc.transpose(z, (0, 2, 1)), p["proj.weight"], p["proj.bias"])
        seq = nc.add(seq, Tensor(self._pe))
        for l in range(c.encoder_layers):
            seq = transformer_encoder_layer(seq, p, c.encoder_heads, prefix=f"enc{l}", trace=trace)
        u = nc.relu(nc.linear(nc.reshape(seq, (b, c.h * c.d_model)), p["fc1.weight"], p["fc1.bias"]))
        for n in range(plan.dense_blocks):
            u = nc.add(u, nc.relu(nc.linear(u, p[f"dec{n}.weight"], p[f"dec{n}.bias"])))
        out = nc.linear(u, p["fc2.weight"], p["fc2.bias"])
        return nc.reshape(out, (b, c.c_in, c.t))

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Forward pass without recording; returns normalised predictions."""
        outs = [
            self.forward(inputs[i : i + batch_size]).data
            for i in range(0, inputs.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def count_parameters(self) -> int:
        return self.params.count()


def build_variant(config: ModelConfig) -> MSCMHMSTModel:
    return MSCMHMSTModel(config)


def count_parameters(model: MSCMHMSTModel) -> int:
    return model.count_parameters()
