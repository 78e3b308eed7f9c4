"""Causal padding rules, lookahead bookkeeping and exact streaming convolution.

Time is measured in each layer's native unit (samples, mel frames, video
frames) and converted to milliseconds with exact rationals only when stages
are composed into a latency ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .tensor import ConvSpec, conv_nd

__all__ = [
    "causal_pad_conv",
    "causal_pad_conv_transpose",
    "stft_pad",
    "causalize",
    "same_padding",
    "symmetric",
    "causal_transpose_spec",
    "symmetric_transpose_spec",
    "StftSpec",
    "PoolSpec",
    "AttentionSpec",
    "LookaheadSpec",
    "lookahead_of",
    "Stage",
    "Join",
    "PipelineGraph",
    "LedgerLine",
    "LatencyLedger",
    "FRAME_MS",
    "algorithm_latency",
    "latency_ledger",
    "format_ms",
    "receptive_past",
    "latest_input_offset",
    "stream_window_covers",
    "StreamCache",
    "new_stream_cache",
    "stream_conv_1d",
]

FRAME_MS = Fraction(40)


def causal_pad_conv(k: int, d: int = 1) -> int:
    """Frames shifted to the left to make a same-padded convolution causal."""
    if k < 1 or d < 1:
        raise ValueError("kernel size and dilation must be >= 1")
    return (k // 2) * d


def causal_pad_conv_transpose(s: int) -> int:
    if s < 1:
        raise ValueError("stride must be >= 1")
    return s // 2 + s % 2


def stft_pad(w: int, h: int) -> int:
    """Samples of padding on each side of a centred STFT with window ``w`` and hop ``h``."""
    if w < h:
        raise ValueError(f"window {w} is shorter than hop {h}")
    if (w - h) % 2:
        raise ValueError(f"window - hop = {w - h} is odd; centred padding is not an integer")
    return (w - h) // 2


def same_padding(k: int, d: int = 1) -> tuple[int, int]:
    total = (k - 1) * d
    return total // 2, total - total // 2


def symmetric(spec: ConvSpec, axis: int = 0) -> ConvSpec:
    """Same-padding along ``axis`` (the non-causal layout)."""
    left, right = same_padding(spec.kernel_size[axis], spec.dilation[axis])
    pl, pr = list(spec.pad_left), list(spec.pad_right)
    pl[axis], pr[axis] = left, right
    return spec.replace(pad_left=tuple(pl), pad_right=tuple(pr))


def causalize(spec: ConvSpec, axis: int = 0) -> ConvSpec:
    """Move all temporal padding of ``spec`` to the left: ``pad_left = (k - 1) * d``.

    This is the explicit form of shifting a same-padded layer right by
    ``causal_pad_conv(k, d)`` frames and trimming as many from the output's end;
    for odd kernels the two are identical.  Other axes are untouched.
    """
    pl, pr = spec.pad_left[axis], spec.pad_right[axis]
    if (pl, pr) not in ((0, 0), same_padding(spec.kernel_size[axis], spec.dilation[axis])) and pl != pr:
        raise ValueError(f"expected symmetric or no padding on axis {axis}, got ({pl}, {pr})")
    pad_left, pad_right = list(spec.pad_left), list(spec.pad_right)
    pad_left[axis] = (spec.kernel_size[axis] - 1) * spec.dilation[axis]
    pad_right[axis] = 0
    return spec.replace(pad_left=tuple(pad_left), pad_right=tuple(pad_right))


def causal_transpose_spec(c_in: int, c_out: int, k: int, s: int) -> ConvSpec:
    """Transposed conv cropped so output sample ``t`` sees input frames ``<= t // s`` only.

    Keeps the first ``s * T`` samples and drops the ``k - s`` trailing ones.
    """
    if k < s:
        raise ValueError("transposed conv kernel must be at least its stride")
    return ConvSpec(c_in, c_out, (k,), (s,), (1,), (0,), (k - s,))


def symmetric_transpose_spec(c_in: int, c_out: int, k: int, s: int) -> ConvSpec:
    left = (k - s) // 2
    return ConvSpec(c_in, c_out, (k,), (s,), (1,), (left,), (k - s - left,))


@dataclass(frozen=True)
class StftSpec:
    window: int
    hop: int
    mode: str = "centered"  # or "causal"


@dataclass(frozen=True)
class PoolSpec:
    kernel: int
    stride: int
    pad_left: int = 0
    pad_right: int = 0


@dataclass(frozen=True)
class AttentionSpec:
    """Attention over a token stream.  ``left_context=None`` means unlimited past."""

    segment: int
    left_context: int | None = None
    bidirectional: bool = False


@dataclass(frozen=True)
class LookaheadSpec:
    """Future and past dependence of one layer, in its native time unit."""

    lookahead: Fraction = Fraction(0)
    native_rate: Fraction = Fraction(1)
    lookback: int | None = 0
    unbounded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lookahead", Fraction(self.lookahead))
        object.__setattr__(self, "native_rate", Fraction(self.native_rate))
        if self.lookahead < 0:
            raise ValueError("lookahead must be non-negative")
        if self.native_rate <= 0:
            raise ValueError("native rate must be positive")

    @property
    def lookahead_ms(self) -> Fraction | float:
        if self.unbounded:
            return math.inf
        return 1000 * self.lookahead / self.native_rate

    @property
    def causal(self) -> bool:
        return not self.unbounded and self.lookahead == 0


Layer = Union[ConvSpec, StftSpec, PoolSpec, AttentionSpec]


def lookahead_of(layer: Layer, rate=1, axis: int = 0, transposed: bool = False) -> LookaheadSpec:
    """Future dependence of ``layer`` running at ``rate`` units per second.

    An output of a strided layer owns the block of ``stride`` input units that
    ends with its newest input; lookahead counts inputs read beyond that block.
    """
    if isinstance(layer, StftSpec):
        pad = stft_pad(layer.window, layer.hop)
        ahead = pad if layer.mode == "centered" else 0
        return LookaheadSpec(ahead, rate, layer.window - layer.hop - ahead)
    if isinstance(layer, AttentionSpec):
        if layer.bidirectional:
            return LookaheadSpec(0, rate, layer.left_context, unbounded=True)
        # tokens of one segment arrive together, so in-segment attention adds no delay
        return LookaheadSpec(0, rate, layer.left_context)
    if isinstance(layer, PoolSpec):
        k, s, d, pl = layer.kernel, layer.stride, 1, layer.pad_left
    elif isinstance(layer, ConvSpec):
        k, s, d, pl = (layer.kernel_size[axis], layer.stride[axis],
                       layer.dilation[axis], layer.pad_left[axis])
        if transposed:
            # output t = full[t + pl]; full[n] depends on frames <= n // s
            return LookaheadSpec(pl, Fraction(rate) * s, 0)
    else:
        raise TypeError(f"no lookahead rule for {type(layer).__name__}")
    span = (k - 1) * d
    ahead = max(0, span - pl - (s - 1))
    return LookaheadSpec(ahead, rate, span - ahead)


@dataclass
class Stage:
    """One pipeline step: its lookahead at the input rate and its rate change."""

    name: str
    lookahead: LookaheadSpec
    resample: Fraction = Fraction(1)

    def __post_init__(self):
        self.resample = Fraction(self.resample)


@dataclass
class Join:
    """Parallel branches synchronised at a join; each branch is a list of nodes."""

    name: str
    branches: dict[str, list]


@dataclass
class PipelineGraph:
    nodes: list = field(default_factory=list)
    frame_ms: Fraction = FRAME_MS

    def to_dict(self) -> dict:
        return {"frame_ms": str(self.frame_ms), "nodes": [_node_to_dict(n) for n in self.nodes]}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineGraph":
        return cls([_node_from_dict(n) for n in data["nodes"]], Fraction(data.get("frame_ms", 40)))


def _node_to_dict(node) -> dict:
    if isinstance(node, Join):
        return {"join": node.name,
                "branches": {k: [_node_to_dict(n) for n in v] for k, v in node.branches.items()}}
    la = node.lookahead
    return {
        "stage": node.name,
        "lookahead": str(la.lookahead),
        "native_rate": str(la.native_rate),
        "lookback": la.lookback,
        "unbounded": la.unbounded,
        "resample": str(node.resample),
    }


def _node_from_dict(data: dict):
    if "join" in data:
        return Join(data["join"], {k: [_node_from_dict(n) for n in v]
                                   for k, v in data["branches"].items()})
    la = LookaheadSpec(Fraction(data["lookahead"]), Fraction(data["native_rate"]),
                       data.get("lookback"), bool(data.get("unbounded", False)))
    return Stage(data["stage"], la, Fraction(data.get("resample", "1")))


@dataclass
class LedgerLine:
    name: str
    lookahead_ms: Fraction | float
    depth: int = 0


@dataclass
class LatencyLedger:
    base_ms: Fraction
    lines: list[LedgerLine]
    lookahead_ms: Fraction | float

    @property
    def total_ms(self) -> Fraction | float:
        return self.base_ms + self.lookahead_ms

    def render(self) -> str:
        return format_ms(self.base_ms, self.lookahead_ms)

    def branch_latency(self, name: str) -> Fraction | float:
        """Algorithm latency of a named stage or branch seen on its own."""
        for line in self.lines:
            if line.name == name:
                return self.base_ms + line.lookahead_ms
        raise KeyError(name)


def _walk(nodes, rate, lines, depth) -> tuple[Fraction | float, Fraction | None]:
    total: Fraction | float = Fraction(0)
    for node in nodes:
        if isinstance(node, Join):
            joined, out_rates = Fraction(0), set()
            for bname, branch in node.branches.items():
                sub_lines: list[LedgerLine] = []
                ahead, out_rate = _walk(branch, None, sub_lines, depth + 1)
                lines.append(LedgerLine(bname, ahead, depth))
                lines.extend(sub_lines)
                joined = max(joined, ahead)
                out_rates.add(out_rate)
            if len(out_rates) > 1:
                raise ValueError(f"branches joined at {node.name!r} end at different rates {out_rates}")
            rate = out_rates.pop()
            lines.append(LedgerLine(node.name, joined, depth))
            total = total + joined
            continue
        la = node.lookahead
        if rate is not None and la.native_rate != rate:
            raise ValueError(
                f"stage {node.name!r} runs at {la.native_rate} Hz but receives {rate} Hz")
        lines.append(LedgerLine(node.name, la.lookahead_ms, depth))
        total = total + la.lookahead_ms
        rate = la.native_rate * node.resample
    return total, rate


def latency_ledger(graph: PipelineGraph) -> LatencyLedger:
    lines: list[LedgerLine] = []
    ahead, _ = _walk(graph.nodes, None, lines, 0)
    return LatencyLedger(Fraction(graph.frame_ms), lines, ahead)


def algorithm_latency(graph: PipelineGraph) -> Fraction | float:
    """Acquisition time of one frame plus the composed lookahead of every stage.

    Serial stages add; branches meeting at a join contribute their maximum.
    Returns an exact ``Fraction`` in milliseconds, or ``math.inf`` when a stage
    looks arbitrarily far ahead.
    """
    return latency_ledger(graph).total_ms


def _fmt(value) -> str:
    if value == math.inf:
        return "inf"
    value = Fraction(value)
    return str(value.numerator) if value.denominator == 1 else f"{float(value):g}"


def format_ms(base, lookahead) -> str:
    """``"40"`` for a causal pipeline, ``"55 (40 + 15)"`` otherwise."""
    if lookahead == 0:
        return _fmt(base)
    return f"{_fmt(base + lookahead)} ({_fmt(base)} + {_fmt(lookahead)})"


def _temporal_geometry(layer) -> tuple[int, int, int, int]:
    if isinstance(layer, PoolSpec):
        return layer.kernel, layer.stride, 1, layer.pad_left
    if isinstance(layer, ConvSpec):
        return layer.kernel_size[0], layer.stride[0], layer.dilation[0], layer.pad_left[0]
    raise TypeError(f"receptive field of {type(layer).__name__} is not defined")


def receptive_past(stack: Sequence[ConvSpec | PoolSpec]) -> int:
    """Past input samples that can reach the newest output of a causal stack."""
    past, jump = 0, 1
    for i, layer in enumerate(stack):
        if not lookahead_of(layer).causal:
            raise ValueError(f"layer {i} is not causal")
        k, s, d, _ = _temporal_geometry(layer)
        past += (k - 1) * d * jump
        jump *= s
    return past


def latest_input_offset(stack: Sequence[ConvSpec | PoolSpec]) -> tuple[int, int]:
    """``(jump, offset)`` such that output ``j`` reads inputs up to ``jump * j + offset``."""
    offset, jump = 0, 1
    for layer in stack:
        k, s, d, pl = _temporal_geometry(layer)
        offset += ((k - 1) * d - pl) * jump
        jump *= s
    return jump, offset


def stream_window_covers(stack: Sequence[ConvSpec | PoolSpec], window: int, hop: int) -> bool:
    """True when recomputing ``stack`` on the newest ``window`` samples reproduces,
    exactly, the outputs belonging to the newest ``hop`` samples."""
    jump, offset = latest_input_offset(stack)
    if (window - hop) % jump or hop % jump:
        return False
    first = (window - hop) // jump
    return jump * first + offset - receptive_past(stack) >= 0


@dataclass(frozen=True)
class StreamCache:
    """Retained input history of one causal 1D convolution.

    ``history`` holds inputs from absolute index ``start`` on; negative indices
    are the implicit zero padding at the start of the stream.
    """

    spec: ConvSpec
    weight: np.ndarray
    bias: np.ndarray | None
    history: np.ndarray
    start: int
    emitted: int = 0


def new_stream_cache(spec: ConvSpec, weight, bias=None) -> StreamCache:
    if spec.ndim != 1:
        raise ValueError("streaming is implemented for 1D convolutions")
    if not lookahead_of(spec).causal:
        raise ValueError("streaming needs a causal convolution (pad_right must be 0)")
    pl = spec.pad_left[0]
    history = np.zeros((spec.in_channels, pl), dtype=np.float32)
    return StreamCache(spec, weight, bias, history, -pl)


def stream_conv_1d(cache: StreamCache, chunk: np.ndarray) -> tuple[StreamCache, np.ndarray]:
    """Feed ``chunk`` (C_in x n) through the cached layer.

    Returns the updated cache and every output that became computable.  Over
    any chunking the emitted outputs concatenate to the offline result.
    """
    spec = cache.spec
    chunk = np.asarray(chunk, dtype=np.float32)
    if chunk.ndim != 2 or chunk.shape[0] != spec.in_channels:
        raise ValueError(f"chunk must be {spec.in_channels} x n, got {chunk.shape}")
    history = np.concatenate([cache.history, chunk], axis=1)
    received = cache.start + history.shape[1]  # absolute index one past the newest input
    s, pl, span = spec.stride[0], spec.pad_left[0], spec.span(0)
    # output j reads inputs j*s - pl .. j*s - pl + span - 1
    ready = (received - span + pl) // s + 1 if received - span + pl >= 0 else 0
    j0 = cache.emitted
    if ready <= j0:
        return replace(cache, history=history), np.zeros((spec.out_channels, 0), np.float32)
    lo = j0 * s - pl - cache.start
    hi = (ready - 1) * s - pl + span - cache.start
    bare = spec.replace(pad_left=(0,), pad_right=(0,))
    out = conv_nd(history[:, lo:hi], bare, cache.weight, cache.bias)
    keep_from = ready * s - pl  # first input index still needed
    # a stride wider than the kernel skips inputs that have not arrived yet; clamp
    cut = min(history.shape[1], max(0, keep_from - cache.start))
    return replace(cache, history=history[:, cut:], start=cache.start + cut, emitted=ready), out
