"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations a small convolutional UNet needs are provided. Every op
takes and returns :class:`Tensor`; when a :class:`Tape` is active and any
input participates in differentiation, the op appends a node holding its
vector-Jacobian product to the tape. ``Tape.backward`` then walks the nodes
in reverse recording order, which is a valid reverse topological order
because a node can only consume tensors created before it.

Broadcasting is deliberately not implicit. Channel biases, per-sample
affine terms and spatial gates each have their own op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ConfigurationError",
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "finite_difference_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sum",
    "mean",
    "sigmoid",
    "silu",
    "matmul",
    "add_row_bias",
    "add_channel_bias",
    "channel_affine",
    "conv2d",
    "group_normalize",
    "concat_channels",
    "mean_over_channels",
    "max_over_channels",
    "gate",
    "upsample_nearest_2x",
    "downsample_avg_2x",
]


class ConfigurationError(ValueError):
    """Raised when operand shapes or op settings are incompatible."""


class Tensor:
    """An immutable-by-convention float64 array that can take part in a tape.

    ``data`` is a C-contiguous (row-major) float64 ndarray, so ``data.ravel()``
    is the flat buffer and ``shape`` the dimension list.
    """

    __slots__ = ("data", "requires_grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        # True for leaves that require grad and for outputs recorded on a tape
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None):
        return backward(self, loss, wrt)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp: VJP) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(Node(op, inputs, out, vjp))
    return out


def backward(record: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass over ``record`` seeded with d(loss)/d(loss) = 1.

    Returns a mapping tensor -> gradient array. Keys are every leaf that
    requires grad and appears on the tape, plus every tensor in ``wrt``;
    tensors that do not influence ``loss`` map to zeros.
    """
    if loss.size != 1:
        raise ConfigurationError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(record.nodes):
        g_out = grads.pop(id(node.output), None)
        for t in node.inputs:
            if t.requires_grad:
                leaves[id(t)] = t
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not t._tracked:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    if loss.requires_grad:
        leaves[id(loss)] = loss
    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        result[t] = grads.get(key, np.zeros_like(t.data))
    for t in wrt or ():
        if t not in result:
            result[t] = grads.get(id(t), np.zeros_like(t.data))
    return result


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if h <= 0:
        raise ConfigurationError("h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


# -- elementwise -------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors the textbook name
    a = _wrap(a)
    shape = a.shape
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, g.item()),))


def mean(a) -> Tensor:
    a = _wrap(a)
    shape, n = a.shape, a.size
    return _record("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(shape, g.item() / n),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid(a.data)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = _sigmoid(x)
    return _record("silu", (a,), x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


# -- dense -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def add_row_bias(x, b) -> Tensor:
    """``x[n, :] + b`` for a 2-D ``x`` and 1-D ``b``."""
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ConfigurationError(f"add_row_bias: {x.shape} + {b.shape}")
    return _record("add_row_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def add_channel_bias(x, b) -> Tensor:
    """Add a per-channel bias of shape (C,) to an (B, C, H, W) tensor."""
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise ConfigurationError(f"add_channel_bias: {x.shape} + {b.shape}")
    return _record(
        "add_channel_bias",
        (x, b),
        x.data + b.data[None, :, None, None],
        lambda g: (g, g.sum(axis=(0, 2, 3))),
    )


def channel_affine(x, scale_, shift) -> Tensor:
    """Per-sample, per-channel modulation ``x * (1 + scale) + shift``.

    ``scale_`` and ``shift`` have shape (B, C).
    """
    x, scale_, shift = _wrap(x), _wrap(scale_), _wrap(shift)
    if x.data.ndim != 4 or scale_.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise ConfigurationError(f"channel_affine: {x.shape} with {scale_.shape}, {shift.shape}")
    xd = x.data
    m = 1.0 + scale_.data[:, :, None, None]

    def vjp(g):
        return g * m, (g * xd).sum(axis=(2, 3)), g.sum(axis=(2, 3))

    return _record("channel_affine", (x, scale_, shift), xd * m + shift.data[:, :, None, None], vjp)


# -- convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, Ho: int, Wo: int):
    """Rows are (b, i, j) output positions, columns (di, dj, cin) patch entries."""
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    hi, wi = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.concatenate(
        [xt[:, i : i + hi : stride, j : j + wi : stride, :] for i in range(k) for j in range(k)], axis=-1
    )
    return cols.reshape(B * Ho * Wo, k * k * C), xp.shape


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    cout, cin, k, _ = kernel.shape
    return kernel.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) input with a (Cout, Cin, k, k) kernel."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-D input and kernel")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride >= 1 and padding >= 0 required")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigurationError("conv2d: kernel larger than padded input")

    cols, xp_shape = _im2col(x.data, k, stride, padding, Ho, Wo)
    wmat = _kernel_matrix(kernel.data)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise ConfigurationError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    kdata = kernel.data

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        gk = (gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if stride == 1 and padding <= k - 1:
            # input gradient = full correlation of g with the flipped, transposed kernel
            flipped = _kernel_matrix(kdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gcols, _ = _im2col(g, k, 1, k - 1 - padding, H, W)
            gx = (gcols @ flipped.T).reshape(B, H, W, cin).transpose(0, 3, 1, 2)
        else:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, k, k, cin).transpose(3, 4, 0, 5, 1, 2)
            gxp = np.zeros(xp_shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W]
        grads = [np.ascontiguousarray(gx), np.ascontiguousarray(gk)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", inputs, out, vjp)


# -- normalization -----------------------------------------------------------


def group_normalize(x, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/G, H, W) blocks, optional per-channel affine."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ConfigurationError("group_normalize expects (B, C, H, W)")
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ConfigurationError(f"group_normalize: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    out = xhat.reshape(B, C, H, W)
    xhat4 = out
    inputs: tuple[Tensor, ...] = (x,)
    if gamma is not None:
        gamma, beta = _wrap(gamma), _wrap(beta)
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ConfigurationError("group_normalize: gamma/beta must have shape (C,)")
        out = out * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        inputs = (x, gamma, beta)

    def vjp(g):
        if gamma is not None:
            gg = (g * xhat4).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            g = g * gamma.data[None, :, None, None]
        dxhat = g.reshape(B, groups, -1)
        gx = inv * (
            dxhat - dxhat.mean(axis=2, keepdims=True) - xhat * (dxhat * xhat).mean(axis=2, keepdims=True)
        )
        gx = gx.reshape(B, C, H, W)
        return (gx, gg, gb) if gamma is not None else (gx,)

    return _record("group_normalize", inputs, np.ascontiguousarray(out), vjp)


# -- shape and channel ops ---------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: incompatible {t.shape} vs {ref}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _record(
        "concat_channels",
        tensors,
        np.concatenate([t.data for t in tensors], axis=1),
        lambda g: np.split(g, splits, axis=1),
    )


def mean_over_channels(x) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W) channel mean."""
    x = _wrap(x)
    C = x.shape[1]
    return _record(
        "mean_over_channels",
        (x,),
        x.data.mean(axis=1, keepdims=True),
        lambda g: (np.repeat(g / C, C, axis=1),),
    )


def max_over_channels(x) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W) channel max; ties route gradient to the first index."""
    x = _wrap(x)
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _record("max_over_channels", (x,), out, vjp)


def gate(x, g) -> Tensor:
    """Multiply (B, C, H, W) features by a (B, 1, H, W) map, broadcast over channels."""
    x, g = _wrap(x), _wrap(g)
    if g.data.ndim != 4 or g.shape[1] != 1 or g.shape[0] != x.shape[0] or g.shape[2:] != x.shape[2:]:
        raise ConfigurationError(f"gate: {x.shape} with gate {g.shape}")
    xd, gd = x.data, g.data
    return _record("gate", (x, g), xd * gd, lambda go: (go * gd, (go * xd).sum(axis=1, keepdims=True)))


def upsample_nearest_2x(x) -> Tensor:
    x = _wrap(x)
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _record(
        "upsample_nearest_2x",
        (x,),
        out,
        lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),),
    )


def downsample_avg_2x(x) -> Tensor:
    x = _wrap(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigurationError(f"downsample_avg_2x: odd spatial size {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _record(
        "downsample_avg_2x",
        (x,),
        out,
        lambda g: (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),),
    )


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Centered uniform init in ``[-gain/sqrt(fan_in), gain/sqrt(fan_in)]``."""
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
