"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Graph` is active (``with Graph() as g:``)
are recorded on that graph when any input requires a gradient.  Outside a
graph every operation is a plain numpy forward pass, which is what
:func:`gradcheck` uses for its finite differences.

Gradients of leaf tensors (parameters) accumulate across ``backward`` calls
until :meth:`ParameterSet.zero_grad` is called.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

__all__ = [
    "Tensor",
    "Graph",
    "ParameterSet",
    "GradcheckResult",
    "backward",
    "gradcheck",
    "conv1d_same",
    "pointwise",
    "relu",
    "sigmoid",
    "hadamard",
    "concat_channels",
    "split_channels",
    "linear",
    "softmax_rows",
    "layer_norm",
    "matmul",
    "add",
    "sub",
    "scale",
    "absolute",
    "mean",
    "reshape",
    "transpose",
    "corrupt_gradient",
]

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "mscmhmst_active_graph", default=None
)
# op name -> multiplier applied to its input gradients; only set by tests/CLI hook
_corrupted_ops: dict[str, float] = {}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            factor = _corrupted_ops.get(node.op)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    g = g * factor
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                leaf.grad += g


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the recorded gradient of ``op`` by ``factor`` (test hook)."""
    _corrupted_ops[op] = factor
    try:
        yield
    finally:
        _corrupted_ops.pop(op, None)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    graph = _active_graph.get()
    if graph is not None and requires:
        graph.nodes.append(_Node(op, inputs, result, bwd))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# operations


def conv1d_same(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded, length-preserving 1-D cross-correlation.

    ``x`` is ``[C_in, L]`` or batched ``[B, C_in, L]``; ``weights`` is
    ``[C_out, C_in, k]`` with odd ``k``; ``bias`` is ``[C_out]``.
    Output position ``i`` sees input positions ``i - k//2 .. i + k//2``.
    """
    if weights.ndim != 3:
        raise ConfigurationError(f"conv weights must be 3-D, got {weights.shape}")
    c_out, c_in, k = weights.shape
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"conv kernel size must be odd and >= 1, got {k}")
    if x.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise ConfigurationError(
            f"conv input {x.shape} incompatible with weights {weights.shape}"
        )
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv bias shape {bias.shape} != ({c_out},)")

    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    b, _, length = xd.shape
    cols = _im2col(xd, k)  # [B*L, C_in*k]
    w2 = weights.data.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(b, length, c_out).transpose(0, 2, 1) + bias.data[None, :, None]
    if unbatched:
        out = out[0]

    def bwd(g):
        gb = g[None] if unbatched else g
        g2 = gb.transpose(0, 2, 1).reshape(b * length, c_out)
        gw = (g2.T @ cols).reshape(c_out, c_in, k)
        # input gradient = same-padded correlation of g with the flipped, transposed kernel
        flipped = weights.data[:, :, ::-1].transpose(1, 0, 2).reshape(c_in, c_out * k)
        gx = (_im2col(gb, k) @ flipped.T).reshape(b, length, c_in).transpose(0, 2, 1)
        if unbatched:
            gx = gx[0]
        return gx, gw, g2.sum(axis=0)

    return _record("conv1d_same", (x, weights, bias), out, bwd)


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """``[B, C, L]`` -> ``[B*L, C*k]`` rows of zero-padded centred windows."""
    b, c, length = xd.shape
    if k == 1:
        return xd.transpose(0, 2, 1).reshape(b * length, c)
    pad = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=-1)  # [B, C, L, k]
    return win.transpose(0, 2, 1, 3).reshape(b * length, c * k)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))
    raise ConfigurationError(f"unknown pointwise kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"hadamard shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("hadamard", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis (second to last)."""
    if not parts:
        raise ConfigurationError("concat_channels needs at least one part")
    first = parts[0].shape
    for p in parts:
        if p.ndim < 2 or p.ndim != len(first) or p.shape[:-2] != first[:-2] or p.shape[-1] != first[-1]:
            raise ConfigurationError(
                f"concat_channels: part shape {p.shape} incompatible with {first}"
            )
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-2)

    def bwd(g):
        return [g[..., bounds[i] : bounds[i + 1], :] for i in range(len(parts))]

    return _record("concat_channels", tuple(parts), out, bwd)


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        return (gx,)

    return _record("channel_slice", (x,), x.data[..., start:stop, :].copy(), bwd)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[-2]:
        raise ConfigurationError(f"split sizes {list(sizes)} do not sum to {x.shape[-2]}")
    bounds = np.cumsum([0] + list(sizes))
    return [_channel_slice(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigurationError(
            f"linear shapes incompatible: x {x.shape}, W {w.shape}, b {b.shape}"
        )
    out = x.data @ w.data + b.data

    def bwd(g):
        x2 = x.data.reshape(-1, w.shape[0])
        g2 = g.reshape(-1, w.shape[1])
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return _record("linear", (x, w, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record("matmul", (a, b), ad @ bd, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), y, bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ConfigurationError(f"layer_norm affine shapes must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + shift.data

    def bwd(g):
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _record("layer_norm", (x, gain, shift), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast against ``a``."""
    out = a.data + b.data
    if out.shape != a.shape:
        raise ConfigurationError(f"add: {b.shape} must broadcast onto {a.shape}")
    return _record("add", (a, b), out, lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"sub shape mismatch {a.shape} vs {b.shape}")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record("absolute", (x,), np.abs(x.data), lambda g: (g * sign,))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _record("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _record(
        "transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),)
    )


# --------------------------------------------------------------------------
# parameters and gradient checking


class ParameterSet:
    """Named trainable arrays, each a leaf :class:`Tensor` with a grad buffer."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = sorted(set(self._params) ^ set(state))
            raise ConfigurationError(f"state/parameter name mismatch: {missing[:5]}")
        for name, p in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(
                    f"parameter {name!r}: shape {value.shape} != {p.shape}"
                )
            p.data = np.ascontiguousarray(value.copy())


@dataclass
class GradcheckResult:
    max_error: float
    worst_parameter: str | None
    per_parameter: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return self.max_error


def gradcheck(
    f: Callable[[], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the current values in ``params``.
    At most ``max_coords`` coordinates per array are sampled with a fixed
    seed.  Error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ConfigurationError("gradcheck eps must be positive")
    params.zero_grad()
    with Graph() as graph:
        loss = f()
    graph.backward(loss)
    rng = np.random.default_rng(seed)

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.size <= max_coords:
            coords = np.arange(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        worst = 0.0
        for flat in coords:
            idx = np.unravel_index(int(flat), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = f().item()
            p.data[idx] = orig - eps
            f_minus = f().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        per_param[name] = worst
    params.zero_grad()
    if not per_param:
        return GradcheckResult(0.0, None, {})
    worst_name = max(per_param, key=per_param.get)
    return GradcheckResult(per_param[worst_name], worst_name, per_param)
