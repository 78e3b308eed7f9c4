"""HiFi-GAN V1 style generator with causal (C-HiFi-GAN) and non-causal padding.

Mel frames are channel-first ``80 x T``; one frame becomes 160 waveform
samples through four transposed-convolution upsamplers (8, 5, 2, 2), each
followed by a multi-receptive-field fusion (MRF) module.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import weights as W
from .causal import (
    LookaheadSpec,
    StreamCache,
    causal_transpose_spec,
    causalize,
    lookahead_of,
    new_stream_cache,
    stream_conv_1d,
    symmetric,
    symmetric_transpose_spec,
)
from .tensor import (
    ConvSpec,
    ShapeError,
    conv_nd,
    conv_transpose_1d,
    leaky_relu,
    overlap_add,
    tanh,
    transposed_contributions,
)
from .weights import ParamSpec, WeightStore

__all__ = [
    "VocoderConfig",
    "VocoderState",
    "Vocoder",
    "vocode_offline",
    "vocode_step",
    "CausalityReport",
    "causality_witness",
]


@dataclass(frozen=True)
class VocoderConfig:
    upsample_strides: tuple[int, ...] = (8, 5, 2, 2)
    upsample_kernels: tuple[int, ...] = (16, 10, 4, 4)
    base_channels: int = 512
    mrf_kernels: tuple[int, ...] = (3, 7, 11)
    mrf_dilations: tuple[tuple[int, ...], ...] = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    leaky_slope: float = 0.1
    causal: bool = True
    n_mels: int = 80
    pre_kernel: int = 7
    post_kernel: int = 7

    def __post_init__(self):
        if len(self.upsample_strides) != len(self.upsample_kernels):
            raise ValueError("one kernel size per upsampling stride")
        if len(self.mrf_kernels) != len(self.mrf_dilations):
            raise ValueError("one dilation list per MRF kernel")
        for k, s in zip(self.upsample_kernels, self.upsample_strides):
            if k < s:
                raise ValueError(f"upsampling kernel {k} is shorter than its stride {s}")

    @property
    def hop(self) -> int:
        return int(np.prod(self.upsample_strides))

    def channels(self, stage: int) -> int:
        """Channel count after upsampling stage ``stage`` (-1 for the pre-conv)."""
        return self.base_channels // (2 ** (stage + 1))


@dataclass(frozen=True)
class _Conv:
    name: str
    spec: ConvSpec


@dataclass(frozen=True)
class _Stage:
    up_name: str
    up: ConvSpec
    # resblocks[j] = list of (dilated conv, plain conv) pairs for MRF kernel j
    resblocks: tuple[tuple[tuple[_Conv, _Conv], ...], ...]


@dataclass(frozen=True)
class VocoderState:
    """Streaming state: one input cache per stride-1 conv, one float64 carry per upsampler."""

    caches: dict
    carries: dict
    frames: int = 0


class Vocoder:
    def __init__(self, config: VocoderConfig, store: WeightStore, prefix: str = "vocoder"):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.pre, self.stages, self.post = self._layout(config, prefix)

    @staticmethod
    def _layout(config: VocoderConfig, prefix: str):
        def conv(c_in, c_out, k, d=1):
            spec = ConvSpec.make(c_in, c_out, k, 1, d)
            return causalize(spec) if config.causal else symmetric(spec)

        pre = _Conv(f"{prefix}.conv_pre", conv(config.n_mels, config.base_channels, config.pre_kernel))
        stages = []
        c = config.base_channels
        for i, (s, k) in enumerate(zip(config.upsample_strides, config.upsample_kernels)):
            c_out = config.channels(i)
            make_up = causal_transpose_spec if config.causal else symmetric_transpose_spec
            resblocks = []
            for j, (kr, dils) in enumerate(zip(config.mrf_kernels, config.mrf_dilations)):
                pairs = []
                for m, d in enumerate(dils):
                    base = f"{prefix}.mrf{i}.res{j}"
                    pairs.append((_Conv(f"{base}.convs1.{m}", conv(c_out, c_out, kr, d)),
                                  _Conv(f"{base}.convs2.{m}", conv(c_out, c_out, kr, 1))))
                resblocks.append(tuple(pairs))
            stages.append(_Stage(f"{prefix}.ups.{i}", make_up(c, c_out, k, s), tuple(resblocks)))
            c = c_out
        post = _Conv(f"{prefix}.conv_post", conv(c, 1, config.post_kernel))
        return pre, tuple(stages), post

    @staticmethod
    def param_specs(config: VocoderConfig, prefix: str = "vocoder") -> list[ParamSpec]:
        pre, stages, post = Vocoder._layout(config, prefix)

        def conv_params(c: _Conv) -> list[ParamSpec]:
            s = c.spec
            return [ParamSpec(f"{c.name}.weight", (s.out_channels, s.in_channels) + s.kernel_size),
                    ParamSpec(f"{c.name}.bias", (s.out_channels,), W.BIAS)]

        specs = conv_params(pre)
        for st in stages:
            up = st.up
            specs += [ParamSpec(f"{st.up_name}.weight", (up.in_channels, up.out_channels) + up.kernel_size,
                                W.WEIGHT_T),
                      ParamSpec(f"{st.up_name}.bias", (up.out_channels,), W.BIAS)]
            for pairs in st.resblocks:
                for c1, c2 in pairs:
                    specs += conv_params(c1) + conv_params(c2)
        return specs + conv_params(post)

    def all_convs(self) -> list[_Conv]:
        convs = [self.pre]
        for st in self.stages:
            for pairs in st.resblocks:
                for c1, c2 in pairs:
                    convs += [c1, c2]
        return convs + [self.post]

    def lookahead(self) -> LookaheadSpec:
        """Composed future dependence, expressed in mel frames."""
        cfg = self.config
        frame_rate = rate = Fraction(16000, cfg.hop)
        ahead_ms = lookahead_of(self.pre.spec, rate).lookahead_ms
        for st in self.stages:
            ahead_ms += lookahead_of(st.up, rate, transposed=True).lookahead_ms
            rate *= st.up.stride[0]
            # MRF branches run in parallel; each is a serial chain of convs
            ahead_ms += max(sum(lookahead_of(c.spec, rate).lookahead_ms
                                for pair in pairs for c in pair)
                            for pairs in st.resblocks)
        ahead_ms += lookahead_of(self.post.spec, rate).lookahead_ms
        return LookaheadSpec(ahead_ms * frame_rate / 1000, frame_rate, None)

    # ----------------------------------------------------------------- offline

    def _w(self, name: str):
        return self.store.f64(f"{name}.weight"), self.store.f64(f"{name}.bias")

    def _conv(self, c: _Conv, x: np.ndarray) -> np.ndarray:
        w, b = self._w(c.name)
        return conv_nd(x, c.spec, w, b)

    def _mrf(self, st: _Stage, x: np.ndarray, conv) -> np.ndarray:
        slope = self.config.leaky_slope
        total = None
        for pairs in st.resblocks:
            h = x
            for c1, c2 in pairs:
                t = conv(c1, leaky_relu(h, slope))
                t = conv(c2, leaky_relu(t, slope))
                h = h + t
            total = h.astype(np.float64) if total is None else total + h
        return (total / len(st.resblocks)).astype(np.float32)

    def __call__(self, mel: np.ndarray) -> np.ndarray:
        """Offline synthesis: T x 80 (or 80 x T via ``channels_first``) -> 160*T samples."""
        x = self._check_mel(mel)
        slope = self.config.leaky_slope
        x = self._conv(self.pre, x)
        for st in self.stages:
            w, b = self._w(st.up_name)
            x = conv_transpose_1d(leaky_relu(x, slope), st.up, w, b)
            x = self._mrf(st, x, self._conv)
        x = self._conv(self.post, leaky_relu(x, slope))
        return tanh(x[0])

    def _check_mel(self, mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(mel, dtype=np.float32)
        if mel.ndim != 2 or mel.shape[1] != self.config.n_mels:
            raise ShapeError(f"mel must be T x {self.config.n_mels}, got {mel.shape}", axis=-1)
        if mel.shape[0] < 1:
            raise ShapeError("need at least one mel frame", axis=0)
        return np.ascontiguousarray(mel.T)

    # --------------------------------------------------------------- streaming

    def init_state(self) -> VocoderState:
        if not self.config.causal:
            raise ValueError("streaming synthesis needs the causal vocoder (causal=True)")
        caches = {}
        for c in self.all_convs():
            w, b = self._w(c.name)
            caches[c.name] = new_stream_cache(c.spec, w, b)
        carries = {st.up_name: np.zeros((st.up.out_channels, 0)) for st in self.stages}
        return VocoderState(caches, carries, 0)

    def step(self, state: VocoderState, mel: np.ndarray) -> tuple[VocoderState, np.ndarray]:
        if not self.config.causal:
            raise ValueError("streaming synthesis needs the causal vocoder (causal=True)")
        x = self._check_mel(mel)
        caches = dict(state.caches)
        carries = dict(state.carries)
        slope = self.config.leaky_slope

        def conv(c: _Conv, h: np.ndarray) -> np.ndarray:
            caches[c.name], out = stream_conv_1d(caches[c.name], h)
            return out

        x = conv(self.pre, x)
        for st in self.stages:
            x, carries[st.up_name] = self._stream_up(st, leaky_relu(x, slope), carries[st.up_name])
            x = self._mrf(st, x, conv)
        x = conv(self.post, leaky_relu(x, slope))
        return VocoderState(caches, carries, state.frames + mel.shape[0]), tanh(x[0])

    def _stream_up(self, st: _Stage, x: np.ndarray, carry: np.ndarray):
        s = st.up.stride[0]
        w, b = self._w(st.up_name)
        y = overlap_add(transposed_contributions(x, w), s, carry)
        n = x.shape[1] * s
        out = (y[:, :n] + b[:, None]).astype(np.float32)
        return out, y[:, n:]


def vocode_offline(vocoder: Vocoder, mel: np.ndarray) -> np.ndarray:
    return vocoder(mel)


def vocode_step(vocoder: Vocoder, state: VocoderState, mel: np.ndarray):
    """Synthesize one 40 ms step (4 mel frames -> 640 samples) from streaming state."""
    return vocoder.step(state, mel)


@dataclass
class CausalityReport:
    causal: bool
    trials: int
    violations: int
    max_past_deviation: float
    witness: dict | None = None

    @property
    def passed(self) -> bool:
        return self.violations == 0


def causality_witness(vocoder: Vocoder | VocoderConfig, trials: int = 100, frames: int = 8,
                      seed: int = 0, tol: float = 1e-6) -> CausalityReport:
    """Randomised future-perturbation search.

    A bare config is run with seeded random weights.

    Each trial perturbs every mel frame after a random cut ``t`` and checks that
    the waveform up to sample ``hop * (t + 1)`` is unchanged.  Any change above
    ``tol`` is a violation; the first one found is returned as the witness.
    """
    if isinstance(vocoder, VocoderConfig):
        vocoder = Vocoder(vocoder, W.init_store(Vocoder.param_specs(vocoder), seed))
    rng = np.random.default_rng(seed)
    hop = vocoder.config.hop
    n_mels = vocoder.config.n_mels
    violations, worst, witness = 0, 0.0, None
    base_mel = rng.uniform(-1, 1, size=(frames, n_mels)).astype(np.float32)
    base = vocoder(base_mel)
    for trial in range(trials):
        t = int(rng.integers(0, frames - 1))
        mel = base_mel.copy()
        mel[t + 1:] = rng.uniform(-1, 1, size=mel[t + 1:].shape)
        out = vocoder(mel)
        past = slice(0, hop * (t + 1))
        dev = float(np.max(np.abs(out[past].astype(np.float64) - base[past])))
        worst = max(worst, dev)
        if dev > tol:
            violations += 1
            if witness is None:
                diff = np.abs(out[past].astype(np.float64) - base[past])
                witness = {"trial": trial, "cut_frame": t, "sample": int(np.argmax(diff)),
                           "deviation": dev}
    return CausalityReport(vocoder.config.causal, trials, violations, worst, witness)
