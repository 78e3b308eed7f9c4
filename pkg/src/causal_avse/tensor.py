"""Dense float32 kernels used by every network module.

Tensors are plain ``numpy.ndarray`` objects of dtype float32, channel-first
(``C x T``, ``C x H x W``, ``C x T x H x W``).  Every kernel accumulates in
float64 and rounds the result to float32 once, so the same output element is
reproduced bit-for-bit whether it is computed inside a long offline sequence
or inside a short streaming chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvSpec",
    "as_tensor",
    "conv_nd",
    "conv_transpose_1d",
    "linear",
    "layer_norm",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "norm_act",
    "scaled_dot_attention",
    "pool_nd",
    "pool_1d",
]

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.1


class ShapeError(ValueError):
    """Raised when a tensor does not have the extent an operation requires."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


def _tuple(value, n: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ShapeError(f"{name} has {len(value)} entries, expected {n}", axis=name)
    return value


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution over ``len(kernel_size)`` spatial/temporal axes.

    Padding is explicit and may be asymmetric.  For transposed convolutions the
    pads are read as the number of output samples cropped from each side of the
    full (uncropped) result, which is the usual deep-learning convention.
    """

    in_channels: int
    out_channels: int
    kernel_size: tuple[int, ...]
    stride: tuple[int, ...] = field(default=())
    dilation: tuple[int, ...] = field(default=())
    pad_left: tuple[int, ...] = field(default=())
    pad_right: tuple[int, ...] = field(default=())

    def __post_init__(self):
        k = _tuple(self.kernel_size, len(np.atleast_1d(self.kernel_size)), "kernel_size")
        n = len(k)
        object.__setattr__(self, "kernel_size", k)
        for name, default in (("stride", 1), ("dilation", 1), ("pad_left", 0), ("pad_right", 0)):
            value = getattr(self, name)
            if isinstance(value, tuple) and len(value) == 0:
                value = default
            object.__setattr__(self, name, _tuple(value, n, name))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel_size) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("kernel_size, stride and dilation must be >= 1")
        if min(self.pad_left) < 0 or min(self.pad_right) < 0:
            raise ValueError("pads must be >= 0")

    @classmethod
    def make(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int | Sequence[int],
        stride: int | Sequence[int] = 1,
        dilation: int | Sequence[int] = 1,
        padding: int | Sequence[int] = 0,
    ) -> "ConvSpec":
        """Build a spec with symmetric ``padding`` on every axis."""
        k = (kernel_size,) if isinstance(kernel_size, int) else tuple(kernel_size)
        n = len(k)
        pad = _tuple(padding, n, "padding")
        return cls(in_channels, out_channels, k, _tuple(stride, n, "stride"),
                   _tuple(dilation, n, "dilation"), pad, pad)

    @property
    def ndim(self) -> int:
        return len(self.kernel_size)

    def span(self, axis: int) -> int:
        """Extent of the dilated kernel along ``axis``."""
        return self.dilation[axis] * (self.kernel_size[axis] - 1) + 1

    def output_extent(self, axis: int, n: int) -> int:
        padded = n + self.pad_left[axis] + self.pad_right[axis]
        return (padded - self.span(axis)) // self.stride[axis] + 1

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        return tuple(self.output_extent(a, n) for a, n in enumerate(spatial))

    def transposed_extent(self, n: int) -> int:
        return (n - 1) * self.stride[0] + self.span(0) - self.pad_left[0] - self.pad_right[0]

    def replace(self, **changes) -> "ConvSpec":
        fields = dict(
            in_channels=self.in_channels, out_channels=self.out_channels,
            kernel_size=self.kernel_size, stride=self.stride, dilation=self.dilation,
            pad_left=self.pad_left, pad_right=self.pad_right,
        )
        fields.update(changes)
        return ConvSpec(**fields)


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a float32 array, rejecting non-finite input."""
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _check_conv(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias, transposed: bool):
    if x.ndim != spec.ndim + 1:
        raise ShapeError(
            f"input has rank {x.ndim}, expected {spec.ndim + 1} (channels + {spec.ndim} axes)",
            axis="rank",
        )
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, spec says {spec.in_channels}",
                         axis="channels")
    if transposed:
        expected = (spec.in_channels, spec.out_channels) + spec.kernel_size
    else:
        expected = (spec.out_channels, spec.in_channels) + spec.kernel_size
    if tuple(weight.shape) != expected:
        for i, (got, want) in enumerate(zip(weight.shape, expected)):
            if got != want:
                raise ShapeError(f"weight axis {i} has extent {got}, expected {want}", axis=i)
        raise ShapeError(f"weight shape {weight.shape} != {expected}", axis="rank")
    if bias is not None and np.shape(bias) != (spec.out_channels,):
        raise ShapeError(f"bias shape {np.shape(bias)} != ({spec.out_channels},)", axis="bias")


def conv_nd(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias=None) -> np.ndarray:
    """Cross-correlate ``x`` (C_in x spatial...) with ``weight`` (C_out x C_in x k...).

    Zero padding follows ``spec.pad_left``/``spec.pad_right``.  Output extents follow
    ``floor((n + pl + pr - d*(k-1) - 1) / s) + 1`` per axis.
    """
    x = np.asarray(x)
    _check_conv(x, spec, np.asarray(weight), bias, transposed=False)
    out_shape = spec.output_shape(x.shape[1:])
    for axis, extent in enumerate(out_shape):
        if extent < 1:
            raise ShapeError(f"degenerate output: axis {axis} would have extent {extent}", axis=axis)

    nd = spec.ndim
    xp = np.pad(
        x.astype(np.float64, copy=False),
        [(0, 0)] + [(spec.pad_left[a], spec.pad_right[a]) for a in range(nd)],
    )
    spans = tuple(spec.span(a) for a in range(nd))
    win = sliding_window_view(xp, spans, axis=tuple(range(1, nd + 1)))
    # win: C x P1..Pn x S1..Sn -> subsample positions by stride and taps by dilation
    index = (slice(None),)
    index += tuple(slice(None, None, s) for s in spec.stride)
    index += tuple(slice(None, None, d) for d in spec.dilation)
    win = win[index]
    win = win[(slice(None),) + tuple(slice(0, o) for o in out_shape)]
    # -> P1..Pn x C x K1..Kn
    perm = tuple(range(1, nd + 1)) + (0,) + tuple(range(nd + 1, 2 * nd + 1))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(int(np.prod(out_shape)), -1)
    w = np.asarray(weight, dtype=np.float64).reshape(spec.out_channels, -1)
    out = cols @ w.T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out.T.reshape((spec.out_channels,) + out_shape).astype(np.float32)


def transposed_contributions(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Per-frame outputs of a transposed convolution before overlap-add.

    Returns float64 ``T x C_out x k``: row ``i`` is frame ``i``'s contribution to
    output samples ``i*s .. i*s + k - 1``.
    """
    c_in, c_out, k = weight.shape
    w = np.asarray(weight, dtype=np.float64).reshape(c_in, c_out * k)
    return (np.asarray(x, dtype=np.float64).T @ w).reshape(-1, c_out, k)


def overlap_add(contrib: np.ndarray, stride: int, carry: np.ndarray | None = None) -> np.ndarray:
    """Overlap-add frame contributions at hop ``stride``.

    Each output sample receives its terms oldest-frame first, starting from the
    ``carry`` (float64, C_out x n) left over from earlier frames.  Keeping this
    order fixed is what makes chunked and whole-sequence results identical.
    """
    t, c_out, k = contrib.shape
    phases = -(-k // stride)
    if phases * stride != k:
        contrib = np.concatenate(
            [contrib, np.zeros((t, c_out, phases * stride - k))], axis=2)
    y = np.zeros((c_out, (t + phases - 1) * stride))
    if carry is not None and carry.size:
        y[:, : carry.shape[1]] = carry
    for m in reversed(range(phases)):
        part = contrib[:, :, m * stride:(m + 1) * stride].transpose(1, 0, 2).reshape(c_out, t * stride)
        y[:, m * stride: m * stride + t * stride] += part
    return y


def conv_transpose_1d(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias=None) -> np.ndarray:
    """Fractionally strided 1D convolution; ``weight`` is C_in x C_out x k.

    The full result has ``(T - 1) * s + k`` samples; ``spec.pad_left`` and
    ``spec.pad_right`` samples are cropped from its two ends.
    """
    x = np.asarray(x)
    if spec.ndim != 1:
        raise ShapeError("conv_transpose_1d needs a 1D spec", axis="rank")
    if spec.dilation[0] != 1:
        raise ValueError("dilated transposed convolution is not supported")
    _check_conv(x, spec, np.asarray(weight), bias, transposed=True)
    length = spec.transposed_extent(x.shape[1])
    if length < 1:
        raise ShapeError(f"degenerate output: length would be {length}", axis=0)
    y = overlap_add(transposed_contributions(x, weight), spec.stride[0])
    full = (x.shape[1] - 1) * spec.stride[0] + spec.kernel_size[0]
    y = y[:, spec.pad_left[0]: full - spec.pad_right[0]]
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)[:, None]
    return y.astype(np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Affine map along the trailing axis; ``weight`` is D_out x D_in."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"trailing dim {x.shape[-1]} != weight D_in {weight.shape[1]}", axis=-1)
    out = x.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out.astype(np.float32)


def layer_norm(x: np.ndarray, gamma, beta, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    if np.shape(gamma) != x64.shape[-1:] or np.shape(beta) != x64.shape[-1:]:
        raise ShapeError("layer_norm parameters must match the trailing dim", axis=-1)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    y = (x64 - mean) / np.sqrt(var + eps)
    return (y * np.asarray(gamma, np.float64) + np.asarray(beta, np.float64)).astype(np.float32)


def batch_norm(x: np.ndarray, mean, var, gamma, beta, eps: float = BATCH_NORM_EPS) -> np.ndarray:
    """Inference-form batch norm over the leading (channel) axis."""
    x64 = np.asarray(x, dtype=np.float64)
    c = x64.shape[0]
    params = [np.asarray(p, dtype=np.float64) for p in (mean, var, gamma, beta)]
    for p in params:
        if p.shape != (c,):
            raise ShapeError(f"batch_norm parameter shape {p.shape} != ({c},)", axis="channels")
    mean, var, gamma, beta = params
    if np.any(var < 0):
        raise ValueError("batch_norm variance must be non-negative")
    bshape = (c,) + (1,) * (x64.ndim - 1)
    scale = gamma / np.sqrt(var + eps)
    y = (x64 - mean.reshape(bshape)) * scale.reshape(bshape) + beta.reshape(bshape)
    return y.astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.where(x >= 0, x, x * np.float32(slope)).astype(np.float32)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64)).astype(np.float32)


def norm_act(x: np.ndarray, kind: str, **params) -> np.ndarray:
    """Dispatch to a normalisation or activation by name.

    ``kind`` is one of ``layer_norm`` (gamma, beta), ``batch_norm`` (mean, var,
    gamma, beta), ``leaky_relu`` (alpha), ``relu`` or ``tanh``.
    """
    if kind == "layer_norm":
        return layer_norm(x, params["gamma"], params["beta"])
    if kind in ("batch_norm", "batch_norm_inference"):
        return batch_norm(x, params["mean"], params["var"], params["gamma"], params["beta"])
    if kind == "leaky_relu":
        return leaky_relu(x, params.get("alpha", LEAKY_SLOPE))
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown norm/activation kind {kind!r}")


def scaled_dot_attention(q, k, v, mask=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V per head, with ``mask[i, j]`` True where query i may see key j.

    Masked keys get exactly zero weight.  A query row with no allowed key is an
    invalid context window and raises ``ValueError``.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention inputs must be heads x time x dim", axis="rank")
    h, tq, d = q.shape
    if k.shape[0] != h or v.shape[0] != h:
        raise ShapeError("head counts differ", axis="heads")
    if k.shape[2] != d:
        raise ShapeError(f"key dim {k.shape[2]} != query dim {d}", axis="dim")
    if v.shape[1] != k.shape[1]:
        raise ShapeError("keys and values have different lengths", axis="time")
    tk = k.shape[1]
    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(d)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (tq, tk):
            raise ShapeError(f"mask shape {mask.shape} != ({tq}, {tk})", axis="mask")
        if not mask.any(axis=1).all():
            raise ValueError("attention mask leaves a query row without any key")
        scores = np.where(mask[None], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).astype(np.float32)
    if return_weights:
        return out, weights
    return out


def pool_nd(x: np.ndarray, kind: str, kernel: Sequence[int], stride: Sequence[int],
            pad_left: Sequence[int] | None = None, pad_right: Sequence[int] | None = None) -> np.ndarray:
    """Max or average pooling over the trailing axes of a channel-first tensor.

    Max pooling pads with -inf; average pooling pads with zeros and divides by
    the full kernel size.
    """
    x = np.asarray(x, dtype=np.float64)
    nd = len(kernel)
    pad_left = tuple(pad_left or (0,) * nd)
    pad_right = tuple(pad_right or (0,) * nd)
    if min(kernel) < 1 or min(stride) < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    spatial = x.shape[1:]
    if len(spatial) != nd:
        raise ShapeError(f"input has {len(spatial)} pooling axes, kernel has {nd}", axis="rank")
    for a in range(nd):
        if kernel[a] > spatial[a] + pad_left[a] + pad_right[a]:
            raise ShapeError(f"pool kernel {kernel[a]} exceeds padded length on axis {a}", axis=a)
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, [(0, 0)] + list(zip(pad_left, pad_right)), constant_values=fill)
    win = sliding_window_view(xp, tuple(kernel), axis=tuple(range(1, nd + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    axes = tuple(range(nd + 1, 2 * nd + 1))
    if kind == "max":
        out = win.max(axis=axes)
    elif kind == "avg":
        out = win.sum(axis=axes) / float(np.prod(kernel))
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out.astype(np.float32)


def pool_1d(x: np.ndarray, kind: str, k: int, stride: int) -> np.ndarray:
    """Unpadded 1D pooling of a C x T (or T) tensor."""
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    out = pool_nd(x, kind, (k,), (stride,))
    return out[0] if squeeze else out
