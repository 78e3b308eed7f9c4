"""Audio and video encoders.

Audio arrives at 16 kHz in 640-sample frames, video at 25 fps as 96x96
grayscale crops.  Every encoder has an offline path over a whole clip and a
streaming ``step`` that only sees a short window of recent frames; for the
causal variants the two agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from . import weights as W
from .causal import LookaheadSpec, PoolSpec, StftSpec, causalize, lookahead_of, receptive_past, stft_pad, symmetric
from .tensor import ConvSpec, ShapeError, batch_norm, conv_nd, linear, pool_nd, relu
from .weights import ParamSpec, WeightStore

__all__ = [
    "SAMPLE_RATE",
    "FPS",
    "FRAME_SAMPLES",
    "N_FFT",
    "HOP",
    "N_MELS",
    "LOG_FLOOR",
    "stft",
    "mel_filterbank",
    "mel_project",
    "audio_encode_linear",
    "MelEncoderConfig",
    "MelEncoder",
    "AudioResNetConfig",
    "AudioResNet",
    "audio_encode_resnet",
    "VideoEncoderConfig",
    "VideoEncoder",
    "video_encode",
]

SAMPLE_RATE = 16000
FPS = 25
FRAME_SAMPLES = SAMPLE_RATE // FPS  # 640
N_FFT = 640
HOP = 160
N_MELS = 80
LOG_FLOOR = 1e-5


# --------------------------------------------------------------------------- DSP


def stft(waveform: np.ndarray, mode: str = "causal", n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Hann-windowed one-sided STFT, ``len // hop`` frames of ``n_fft // 2 + 1`` bins.

    ``centered`` pads ``(n_fft - hop) / 2`` samples on both sides, so frame ``j``
    reads 240 samples past the end of its hop.  ``causal`` pads twice that on
    the left only, so frame ``j`` ends exactly at sample ``hop * (j + 1) - 1``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("stft needs a non-empty 1D waveform")
    p = stft_pad(n_fft, hop)
    if mode == "centered":
        xp = np.pad(x, (p, p))
    elif mode == "causal":
        xp = np.pad(x, (2 * p, 0))
    else:
        raise ValueError(f"unknown stft mode {mode!r}")
    n_frames = x.size // hop
    if n_frames == 0:
        return np.zeros((0, n_fft // 2 + 1), np.complex128)
    frames = sliding_window_view(xp, n_fft)[::hop][:n_frames]
    window = get_window("hann", n_fft, fftbins=True)
    return np.fft.rfft(frames * window, n=n_fft, axis=-1)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters with centres evenly spaced on the mel scale, ``n_mels x bins``.

    The lowest triangle starts one bin below 0 Hz so that the DC bin is not
    left with zero weight; the highest ends at ``fmax`` (Nyquist by default).
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_hz = sample_rate / n_fft
    freqs = np.arange(n_fft // 2 + 1) * bin_hz
    edges = _mel_to_hz(np.linspace(_hz_to_mel(-bin_hz), _hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANK = mel_filterbank()


def mel_project(frames: np.ndarray, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Log-mel features (T x n_mels) from complex STFT frames or their magnitudes."""
    fb = _FILTERBANK if filterbank is None else filterbank
    frames = np.asarray(frames)
    mag = np.abs(frames).astype(np.float64)
    if mag.shape[-1] != fb.shape[1]:
        raise ShapeError(f"expected {fb.shape[1]} frequency bins, got {mag.shape[-1]}", axis=-1)
    mel = mag @ fb.T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def audio_encode_linear(mel: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Per-frame linear map of log-mel features, T x 80 -> T x D."""
    return linear(mel, weight, bias)


# ------------------------------------------------------------------ shared blocks


def _bn_params(name: str, c: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{name}.weight", (c,), W.SCALE),
        ParamSpec(f"{name}.bias", (c,), W.SHIFT),
        ParamSpec(f"{name}.running_mean", (c,), W.RUNNING_MEAN),
        ParamSpec(f"{name}.running_var", (c,), W.RUNNING_VAR),
    ]


def _bn(store: WeightStore, name: str, x: np.ndarray) -> np.ndarray:
    return batch_norm(x, store.f64(f"{name}.running_mean"), store.f64(f"{name}.running_var"),
                      store.f64(f"{name}.weight"), store.f64(f"{name}.bias"))


def _conv_bn(store: WeightStore, name: str, x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    return _bn(store, f"{name}_bn", conv_nd(x, spec, store.f64(f"{name}.weight")))


@dataclass(frozen=True)
class _Block:
    name: str
    conv1: ConvSpec
    conv2: ConvSpec
    down: ConvSpec | None


def _block_params(block: _Block) -> list[ParamSpec]:
    out = []
    for tag, spec in (("conv1", block.conv1), ("conv2", block.conv2), ("down", block.down)):
        if spec is None:
            continue
        shape = (spec.out_channels, spec.in_channels) + spec.kernel_size
        out.append(ParamSpec(f"{block.name}.{tag}.weight", shape))
        out += _bn_params(f"{block.name}.{tag}_bn", spec.out_channels)
    return out


def _run_block(store: WeightStore, block: _Block, x: np.ndarray) -> np.ndarray:
    y = relu(_conv_bn(store, f"{block.name}.conv1", x, block.conv1))
    y = _conv_bn(store, f"{block.name}.conv2", y, block.conv2)
    shortcut = x if block.down is None else _conv_bn(store, f"{block.name}.down", x, block.down)
    return relu(y + shortcut)


def _resnet_blocks(prefix: str, c_in: int, widths, strides, blocks: int, kernel: int,
                   ndim: int, causal_axis: int | None) -> list[_Block]:
    """Basic-block ResNet stages.  ``causal_axis`` selects the axis to causalize."""
    out = []
    for stage, (width, stride) in enumerate(zip(widths, strides)):
        for b in range(blocks):
            s = stride if b == 0 else 1
            k = (kernel,) * ndim
            conv1 = ConvSpec.make(c_in, width, k, s, 1, kernel // 2)
            conv2 = ConvSpec.make(width, width, k, 1, 1, kernel // 2)
            if causal_axis is not None:
                conv1, conv2 = causalize(conv1, causal_axis), causalize(conv2, causal_axis)
            down = None
            if s != 1 or c_in != width:
                down = ConvSpec.make(c_in, width, (1,) * ndim, s)
            out.append(_Block(f"{prefix}.layer{stage + 1}.{b}", conv1, conv2, down))
            c_in = width
    return out


# ------------------------------------------------------------- mel + linear


@dataclass(frozen=True)
class MelEncoderConfig:
    mode: str = "centered"  # stft mode: centered | causal
    features: str = "mel"  # mel | spec (log-magnitude, 321 bins)
    dim: int = 512


class MelEncoder:
    """STFT -> log-mel (or log-magnitude) -> per-frame linear, at 100 Hz."""

    def __init__(self, config: MelEncoderConfig, store: WeightStore, prefix: str = "audio"):
        self.config = config
        self.store = store
        self.prefix = prefix

    @staticmethod
    def param_specs(config: MelEncoderConfig, prefix: str = "audio") -> list[ParamSpec]:
        n_in = N_MELS if config.features == "mel" else N_FFT // 2 + 1
        return [ParamSpec(f"{prefix}.linear.weight", (config.dim, n_in)),
                ParamSpec(f"{prefix}.linear.bias", (config.dim,), W.BIAS)]

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def features_per_frame(self) -> int:
        return FRAME_SAMPLES // HOP

    def lookahead(self):
        return lookahead_of(StftSpec(N_FFT, HOP, self.config.mode), SAMPLE_RATE)

    def _features(self, frames: np.ndarray) -> np.ndarray:
        if self.config.features == "mel":
            return mel_project(frames)
        return np.log(np.maximum(np.abs(frames), LOG_FLOOR)).astype(np.float32)

    def __call__(self, waveform: np.ndarray) -> np.ndarray:
        feats = self._features(stft(waveform, self.config.mode))
        return audio_encode_linear(feats, self.store.f64(f"{self.prefix}.linear.weight"),
                                   self.store.f64(f"{self.prefix}.linear.bias"))

    def step(self, window: np.ndarray) -> np.ndarray:
        """Features of the newest 640 samples of ``window``."""
        return self(window)[-self.features_per_frame:]

    @property
    def window_frames(self) -> int:
        return 2


# ------------------------------------------------------------ 1D ResNet-18


@dataclass(frozen=True)
class AudioResNetConfig:
    rate: int = 100  # output features per second: 100 or 25
    stem_channels: int = 64
    stem_kernel: int = 80
    stem_stride: int = 4
    widths: tuple[int, ...] = (64, 128, 256, 512)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    blocks: int = 2
    kernel: int = 3

    @property
    def hop(self) -> int:
        return SAMPLE_RATE // self.rate

    @property
    def pool(self) -> int:
        conv_stride = self.stem_stride * int(np.prod(self.strides))
        if self.hop % conv_stride:
            raise ValueError(f"rate {self.rate} Hz is not reachable with conv stride {conv_stride}")
        return self.hop // conv_stride


class AudioResNet:
    """Causal raw-waveform 1D ResNet-18.

    Every convolution is padded on the left only; a final non-overlapping
    average pool sets the output rate (pool 5 -> 100 Hz, pool 20 -> 25 Hz).
    """

    def __init__(self, config: AudioResNetConfig, store: WeightStore, prefix: str = "audio"):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.stem, self.blocks = self._layout(config, prefix)

    @staticmethod
    def _layout(config: AudioResNetConfig, prefix: str):
        stem = causalize(ConvSpec.make(1, config.stem_channels, config.stem_kernel, config.stem_stride))
        blocks = _resnet_blocks(f"{prefix}.resnet", config.stem_channels, config.widths,
                                config.strides, config.blocks, config.kernel, 1, causal_axis=0)
        return stem, blocks

    @staticmethod
    def param_specs(config: AudioResNetConfig, prefix: str = "audio") -> list[ParamSpec]:
        stem, blocks = AudioResNet._layout(config, prefix)
        specs = [ParamSpec(f"{prefix}.stem.weight", (config.stem_channels, 1, config.stem_kernel))]
        specs += _bn_params(f"{prefix}.stem_bn", config.stem_channels)
        for block in blocks:
            specs += _block_params(block)
        return specs

    @property
    def dim(self) -> int:
        return self.config.widths[-1]

    @property
    def features_per_frame(self) -> int:
        return FRAME_SAMPLES // self.config.hop

    @property
    def window_frames(self) -> int:
        return 2

    def temporal_stack(self) -> list:
        """The longest path through the network, for receptive-field analysis."""
        stack = [self.stem]
        for block in self.blocks:
            stack += [block.conv1, block.conv2]
        stack.append(PoolSpec(self.config.pool, self.config.pool))
        return stack

    def receptive_past(self) -> int:
        return receptive_past(self.temporal_stack())

    def lookahead(self) -> LookaheadSpec:
        for layer in self.temporal_stack():
            if not lookahead_of(layer).causal:
                raise ValueError("audio ResNet layer is not causal")
        return LookaheadSpec(0, SAMPLE_RATE, self.receptive_past())

    def __call__(self, waveform: np.ndarray) -> np.ndarray:
        x = np.asarray(waveform, dtype=np.float32)
        if x.ndim != 1:
            raise ShapeError("audio encoder expects a 1D waveform", axis="rank")
        if x.size % self.config.hop:
            raise ShapeError(f"waveform length {x.size} is not a multiple of {self.config.hop}",
                             axis=0)
        h = relu(_bn(self.store, f"{self.prefix}.stem_bn",
                     conv_nd(x[None], self.stem, self.store.f64(f"{self.prefix}.stem.weight"))))
        for block in self.blocks:
            h = _run_block(self.store, block, h)
        p = self.config.pool
        h = pool_nd(h, "avg", (p,), (p,))
        return np.ascontiguousarray(h.T)

    def step(self, window: np.ndarray) -> np.ndarray:
        return self(window)[-self.features_per_frame:]


def audio_encode_resnet(window: np.ndarray, encoder: AudioResNet) -> np.ndarray:
    """Encode the current 40 ms frame from a 1280-sample window (previous ‖ current)."""
    window = np.asarray(window)
    if window.shape != (2 * FRAME_SAMPLES,):
        raise ShapeError(f"audio window must hold {2 * FRAME_SAMPLES} samples, got {window.shape}",
                         axis=0)
    return encoder.step(window)


# ------------------------------------------------------------------- video


@dataclass(frozen=True)
class VideoEncoderConfig:
    causal: bool = True
    size: int = 96
    front_channels: int = 64
    temporal_kernel: int = 5
    spatial_kernel: int = 7
    widths: tuple[int, ...] = (64, 128, 256, 512)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    blocks: int = 2
    mean: float = 0.421
    std: float = 0.165


class VideoEncoder:
    """3D front-end (5 x 7 x 7) followed by a per-frame 2D ResNet-18 and global pooling."""

    def __init__(self, config: VideoEncoderConfig, store: WeightStore, prefix: str = "video"):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.front, self.blocks = self._layout(config, prefix)

    @staticmethod
    def _layout(config: VideoEncoderConfig, prefix: str):
        k = (config.temporal_kernel, config.spatial_kernel, config.spatial_kernel)
        front = ConvSpec.make(1, config.front_channels, k, (1, 2, 2), 1,
                              (0, config.spatial_kernel // 2, config.spatial_kernel // 2))
        front = causalize(front, 0) if config.causal else symmetric(front, 0)
        blocks = _resnet_blocks(f"{prefix}.resnet", config.front_channels, config.widths,
                                config.strides, config.blocks, 3, 2, causal_axis=None)
        return front, blocks

    @staticmethod
    def param_specs(config: VideoEncoderConfig, prefix: str = "video") -> list[ParamSpec]:
        front, blocks = VideoEncoder._layout(config, prefix)
        specs = [ParamSpec(f"{prefix}.front.weight", (front.out_channels, 1) + front.kernel_size)]
        specs += _bn_params(f"{prefix}.front_bn", front.out_channels)
        for block in blocks:
            specs += _block_params(block)
        return specs

    @property
    def dim(self) -> int:
        return self.config.widths[-1]

    @property
    def window_frames(self) -> int:
        return self.config.temporal_kernel

    def lookahead(self):
        return lookahead_of(self.front, FPS)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float32)
        size = self.config.size
        if frames.shape[-2:] != (size, size):
            raise ShapeError(f"video frames must be {size}x{size}, got {frames.shape[-2:]}",
                             axis="frame")
        return ((frames - np.float32(self.config.mean)) / np.float32(self.config.std)).astype(np.float32)

    def _front(self, x: np.ndarray, spec: ConvSpec) -> np.ndarray:
        """Front-end over a normalised 1 x T x H x W block; returns C x T' x h x w."""
        h = conv_nd(x, spec, self.store.f64(f"{self.prefix}.front.weight"))
        h = relu(_bn(self.store, f"{self.prefix}.front_bn", h))
        return pool_nd(h, "max", (1, 3, 3), (1, 2, 2), (0, 1, 1), (0, 1, 1))

    def _trunk(self, slice_: np.ndarray) -> np.ndarray:
        h = slice_
        for block in self.blocks:
            h = _run_block(self.store, block, h)
        return h.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)

    def __call__(self, frames: np.ndarray, chunk: int = 8) -> np.ndarray:
        """Offline encoding of N normalised-on-the-fly frames -> N x dim."""
        x = self.normalize(frames)
        if x.ndim != 3:
            raise ShapeError("expected N x H x W frames", axis="rank")
        n = x.shape[0]
        spec = self.front
        pl, pr = spec.pad_left[0], spec.pad_right[0]
        span = spec.span(0)
        xp = np.pad(x, ((pl, pr), (0, 0), (0, 0)))[None]
        bare = spec.replace(pad_left=(0,) + spec.pad_left[1:], pad_right=(0,) + spec.pad_right[1:])
        out = []
        for a in range(0, n, chunk):
            b = min(n, a + chunk)
            h = self._front(xp[:, a:b + span - 1], bare)
            out += [self._trunk(h[:, t]) for t in range(h.shape[1])]
        return np.stack(out)

    def step(self, window: np.ndarray) -> np.ndarray:
        """Feature of the newest frame of a window of already-normalised frames."""
        window = np.asarray(window, dtype=np.float32)
        if window.shape != (self.window_frames, self.config.size, self.config.size):
            raise ShapeError(
                f"video window must be {self.window_frames}x{self.config.size}x{self.config.size}, "
                f"got {window.shape}", axis="window")
        spec = self.front
        # history sits inside the window, so only right padding remains
        bare = spec.replace(pad_left=(0,) + spec.pad_left[1:])
        h = self._front(window[None], bare)
        return self._trunk(h[:, -1])


def video_encode(window: np.ndarray, encoder: VideoEncoder) -> np.ndarray:
    """Encode the newest of five normalised frames (4 past ‖ current) to one feature vector."""
    return encoder.step(window)
