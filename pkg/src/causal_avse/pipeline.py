"""End-to-end enhancement: model configuration, streaming session, offline path.

One step consumes one 96x96 video frame and 640 audio samples (40 ms) and
emits 640 enhanced samples::

    video window (5 frames) -> video encoder -> 1 feature  --\\
                                                             fuse -> 4 tokens -> Emformer
    audio window (2 frames) -> audio encoder -> 4 features --/
        -> mel head -> 4 mel frames -> vocoder -> 640 samples
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import weights as W
from .causal import (
    AttentionSpec,
    FRAME_MS,
    Join,
    LookaheadSpec,
    PipelineGraph,
    Stage,
    algorithm_latency,
    lookahead_of,
    stream_window_covers,
)
from .frontends import (
    FPS,
    FRAME_SAMPLES,
    HOP,
    SAMPLE_RATE,
    AudioResNet,
    AudioResNetConfig,
    MelEncoder,
    MelEncoderConfig,
    VideoEncoder,
    VideoEncoderConfig,
)
from .temporal import (
    EmformerConfig,
    EmformerState,
    TemporalEncoder,
    emformer_offline,
    fuse,
    project_mel,
    transformer_offline,
)
from .tensor import ShapeError
from .vocoder import Vocoder, VocoderConfig, VocoderState
from .weights import ParamSpec, WeightError, WeightStore

__all__ = [
    "AUDIO_ENCODERS",
    "ModelConfig",
    "PRESETS",
    "preset",
    "Model",
    "param_specs",
    "count_params",
    "ParamCount",
    "weights_init",
    "latency_graph",
    "Session",
    "session_new",
    "session_step",
    "enhance_offline",
    "naive_online",
    "MixSpec",
    "mix_gains",
    "mix",
    "power",
    "ratio_db",
    "LatencyReport",
    "measure_processing_latency",
]

AUDIO_ENCODERS = ("mel_linear", "causal_mel_linear", "spec_linear", "resnet_25", "resnet_100")


@dataclass(frozen=True)
class ModelConfig:
    """Full description of one model variant; mirrors the JSON config file field for field."""

    audio_encoder: str = "resnet_100"
    video: bool = True
    temporal: str = "emformer"  # emformer | transformer
    emformer: EmformerConfig = field(default_factory=EmformerConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    video_encoder: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    audio_resnet: AudioResNetConfig = field(default_factory=AudioResNetConfig)
    audio_dim: int = 512  # linear audio encoder width
    sample_rate: int = SAMPLE_RATE
    fps: int = FPS

    def __post_init__(self):
        if self.audio_encoder not in AUDIO_ENCODERS:
            raise ValueError(f"unknown audio_encoder {self.audio_encoder!r}; "
                             f"expected one of {AUDIO_ENCODERS}")
        if self.temporal not in ("emformer", "transformer"):
            raise ValueError(f"unknown temporal model {self.temporal!r}")
        if self.sample_rate != SAMPLE_RATE or self.fps != FPS:
            raise ValueError("only 16 kHz audio with 25 fps video is supported")
        if self.vocoder.hop != HOP:
            raise ValueError(f"vocoder upsampling product {self.vocoder.hop} != mel hop {HOP}")
        if self.emformer.segment_length != FRAME_SAMPLES // HOP:
            raise ValueError("segment length must equal the mel frames per 40 ms step (4)")

    @property
    def causal(self) -> bool:
        return (self.temporal == "emformer" and self.vocoder.causal
                and self.audio_encoder != "mel_linear" and self.audio_encoder != "spec_linear"
                and (not self.video or self.video_encoder.causal))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        nested = {"emformer": EmformerConfig, "vocoder": VocoderConfig,
                  "video_encoder": VideoEncoderConfig, "audio_resnet": AudioResNetConfig}
        for key, sub in nested.items():
            if key in data and isinstance(data[key], dict):
                data[key] = _dataclass_from_dict(sub, data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _dataclass_from_dict(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def _desk(config: ModelConfig) -> ModelConfig:
    """Reduced widths for CPU runs: model_dim 128, 2 blocks, vocoder base 64."""
    return config.replace(
        emformer=dataclasses.replace(config.emformer, blocks=2, heads=4, model_dim=128, ffn_dim=512),
        vocoder=dataclasses.replace(config.vocoder, base_channels=64),
        video_encoder=dataclasses.replace(config.video_encoder, front_channels=8, widths=(8, 16, 32, 64)),
        audio_resnet=dataclasses.replace(config.audio_resnet, stem_channels=8, widths=(8, 16, 32, 64)),
        audio_dim=64,
    )


_lc32 = EmformerConfig(left_context=32)
_noncausal = ModelConfig(
    audio_encoder="mel_linear", temporal="transformer",
    vocoder=VocoderConfig(causal=False), video_encoder=VideoEncoderConfig(causal=False),
)

PRESETS: dict[str, ModelConfig] = {
    # final fully causal model
    "causal": ModelConfig(),
    # ablation variants
    "spec_linear": ModelConfig(audio_encoder="spec_linear", emformer=_lc32),
    "mel_linear": ModelConfig(audio_encoder="mel_linear", emformer=_lc32),
    "causal_mel_linear": ModelConfig(audio_encoder="causal_mel_linear", emformer=_lc32),
    "resnet_25": ModelConfig(audio_encoder="resnet_25", emformer=_lc32),
    "resnet_100_lc32": ModelConfig(emformer=_lc32),
    # original non-causal design: bidirectional attention, non-causal vocoder and front-end
    "noncausal": _noncausal,
    "desk": _desk(ModelConfig()),
    "desk_noncausal": _desk(_noncausal),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ------------------------------------------------------------------ model graph


def _audio_encoder_parts(config: ModelConfig):
    kind = config.audio_encoder
    if kind.startswith("resnet"):
        rate = 100 if kind == "resnet_100" else 25
        return AudioResNet, dataclasses.replace(config.audio_resnet, rate=rate)
    mode = "centered" if kind in ("mel_linear", "spec_linear") else "causal"
    features = "spec" if kind == "spec_linear" else "mel"
    return MelEncoder, MelEncoderConfig(mode=mode, features=features, dim=config.audio_dim)


def _audio_dim(config: ModelConfig) -> int:
    cls, sub = _audio_encoder_parts(config)
    return sub.widths[-1] if cls is AudioResNet else sub.dim


def param_specs(config: ModelConfig) -> dict[str, list[ParamSpec]]:
    """Parameter layout of every module, keyed by module name."""
    cls, sub = _audio_encoder_parts(config)
    d = config.emformer.model_dim
    fuse_in = _audio_dim(config) + (config.video_encoder.widths[-1] if config.video else 0)
    specs = {}
    if config.video:
        specs["video"] = VideoEncoder.param_specs(config.video_encoder)
    specs["audio"] = cls.param_specs(sub)
    specs["fusion"] = [ParamSpec("fusion.weight", (d, fuse_in)), ParamSpec("fusion.bias", (d,), W.BIAS)]
    specs["temporal"] = TemporalEncoder.param_specs(config.emformer)
    specs["mel_head"] = [ParamSpec("mel_head.weight", (config.vocoder.n_mels, d)),
                         ParamSpec("mel_head.bias", (config.vocoder.n_mels,), W.BIAS)]
    specs["vocoder"] = Vocoder.param_specs(config.vocoder)
    return specs


@dataclass(frozen=True)
class ParamCount:
    per_module: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_module.values())

    @property
    def enhancer(self) -> int:
        """Everything except the vocoder."""
        return self.total - self.per_module.get("vocoder", 0)

    def millions(self) -> dict[str, float]:
        out = {k: v / 1e6 for k, v in self.per_module.items()}
        out["enhancer"] = self.enhancer / 1e6
        out["total"] = self.total / 1e6
        return out


def count_params(config: ModelConfig) -> ParamCount:
    """Learnable parameter elements per module (batch-norm running statistics excluded)."""
    return ParamCount({name: sum(p.size for p in specs if p.learnable)
                       for name, specs in param_specs(config).items()})


def _flat_specs(config: ModelConfig) -> list[ParamSpec]:
    return [p for specs in param_specs(config).values() for p in specs]


def weights_init(config: ModelConfig, seed: int = 0) -> WeightStore:
    return W.init_store(_flat_specs(config), seed)


def latency_graph(config: ModelConfig) -> PipelineGraph:
    """Lookahead of each stage, for the algorithm-latency ledger."""
    token_rate = Fraction(SAMPLE_RATE, HOP)
    audio_cls, audio_cfg = _audio_encoder_parts(config)
    if audio_cls is MelEncoder:
        audio_la = MelEncoder(audio_cfg, None).lookahead()
        audio_stage = Stage("audio encoder", audio_la, Fraction(1, HOP))
    else:
        audio_la = AudioResNet(audio_cfg, None).lookahead()
        audio_stage = Stage("audio encoder", audio_la, Fraction(audio_cfg.rate, SAMPLE_RATE))
        if audio_cfg.rate != token_rate:
            audio_stage = [audio_stage, Stage("audio repeat", LookaheadSpec(0, audio_cfg.rate),
                                              token_rate / audio_cfg.rate)]
    audio_branch = audio_stage if isinstance(audio_stage, list) else [audio_stage]
    branches = {"audio encoder branch": audio_branch}
    if config.video:
        video_la = VideoEncoder(config.video_encoder, None).lookahead()
        branches["video encoder"] = [Stage("video front-end", video_la),
                                     Stage("video repeat", LookaheadSpec(0, FPS), token_rate / FPS)]
    nodes = [Join("fusion", branches)]
    cfg = config.emformer
    if config.temporal == "emformer":
        attn = AttentionSpec(cfg.segment_length, cfg.left_context)
    else:
        attn = AttentionSpec(cfg.segment_length, None, bidirectional=True)
    nodes.append(Stage(config.temporal, lookahead_of(attn, token_rate)))
    nodes.append(Stage("mel head", LookaheadSpec(0, token_rate)))
    nodes.append(Stage("vocoder", Vocoder(config.vocoder, None).lookahead()))
    return PipelineGraph(nodes, FRAME_MS)


class Model:
    """Immutable modules built from a config and a complete weight store."""

    def __init__(self, config: ModelConfig, store: WeightStore):
        store.validate(_flat_specs(config))
        self.config = config
        self.store = store
        audio_cls, audio_cfg = _audio_encoder_parts(config)
        self.audio = audio_cls(audio_cfg, store)
        self.video = VideoEncoder(config.video_encoder, store) if config.video else None
        self.temporal = TemporalEncoder(config.emformer, store)
        self.vocoder = Vocoder(config.vocoder, store)
        if isinstance(self.audio, AudioResNet):
            window = self.audio.window_frames * FRAME_SAMPLES
            if not stream_window_covers(self.audio.temporal_stack(), window, FRAME_SAMPLES):
                raise ValueError(
                    f"audio encoder receptive field ({self.audio.receptive_past()} past samples) "
                    f"does not fit the {window}-sample streaming window")

    def tokens(self, visual: np.ndarray | None, audio_feats: np.ndarray) -> np.ndarray:
        per_frame = self.audio.features_per_frame
        if per_frame != 4:
            audio_feats = np.repeat(audio_feats, 4 // per_frame, axis=0)
        return fuse(visual, audio_feats, self.store.f64("fusion.weight"), self.store.f64("fusion.bias"))

    def mel(self, tokens: np.ndarray) -> np.ndarray:
        return project_mel(tokens, self.store.f64("mel_head.weight"), self.store.f64("mel_head.bias"))


# -------------------------------------------------------------------- offline


def _check_media(video: np.ndarray | None, audio: np.ndarray, config: ModelConfig) -> int:
    audio = np.asarray(audio)
    if audio.ndim != 1 or audio.size % FRAME_SAMPLES:
        raise ShapeError(f"audio length {audio.size} is not a multiple of {FRAME_SAMPLES}", axis=0)
    n = audio.size // FRAME_SAMPLES
    if config.video:
        if video is None or np.asarray(video).shape[0] != n:
            got = None if video is None else np.asarray(video).shape[0]
            raise ShapeError(f"{got} video frames do not match {n} audio frames", axis=0)
    if n < 1:
        raise ShapeError("need at least one frame", axis=0)
    return n


def enhance_offline(video: np.ndarray | None, audio: np.ndarray, config: ModelConfig,
                    weights: WeightStore | Model) -> np.ndarray:
    """Enhance a whole clip at once: N video frames + 640*N samples -> 640*N samples."""
    model = weights if isinstance(weights, Model) else Model(config, weights)
    config = model.config
    _check_media(video, audio, config)
    visual = model.video(video) if model.video is not None else None
    audio_feats = model.audio(np.asarray(audio, dtype=np.float32))
    tokens = model.tokens(visual, audio_feats)
    if config.temporal == "emformer":
        tokens = emformer_offline(model.temporal, tokens)
    else:
        tokens = transformer_offline(model.temporal, tokens)
    return model.vocoder(model.mel(tokens))


def naive_online(video: np.ndarray | None, audio: np.ndarray, config: ModelConfig,
                 weights: WeightStore | Model) -> Iterator[np.ndarray]:
    """Frame-by-frame use of an offline model: at each step re-run the whole
    received prefix and keep only the newest 640 samples."""
    model = weights if isinstance(weights, Model) else Model(config, weights)
    n = _check_media(video, audio, model.config)
    for i in range(1, n + 1):
        v = None if video is None else np.asarray(video)[:i]
        yield enhance_offline(v, np.asarray(audio)[: i * FRAME_SAMPLES], model.config, model)[-FRAME_SAMPLES:]


# ------------------------------------------------------------------ streaming


@dataclass
class Session:
    """Streaming context for one audio-visual stream.  Single owner, strictly sequential."""

    model: Model
    video_window: np.ndarray | None
    audio_frames: list
    emformer: EmformerState
    vocoder: VocoderState
    steps: int = 0
    samples_emitted: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def session_new(config: ModelConfig, weights: WeightStore | Model) -> Session:
    model = weights if isinstance(weights, Model) and weights.config == config else Model(config, weights)
    if config.temporal != "emformer":
        raise ValueError("streaming needs the Emformer; the bidirectional Transformer cannot run online")
    vocoder_state = model.vocoder.init_state()
    video_window = None
    if model.video is not None:
        size = config.video_encoder.size
        video_window = np.zeros((model.video.window_frames, size, size), np.float32)
    return Session(model, video_window, [], EmformerState.empty(config.emformer), vocoder_state)


def session_step(session: Session, video: np.ndarray | None, audio: np.ndarray) -> np.ndarray:
    """Advance the stream by one 40 ms step and return 640 enhanced samples."""
    model = session.model
    audio = np.asarray(audio, dtype=np.float32)
    if audio.shape != (FRAME_SAMPLES,):
        raise ShapeError(f"audio frame must have {FRAME_SAMPLES} samples, got {audio.shape}", axis=0)
    visual = None
    if model.video is not None:
        if video is None:
            raise ShapeError("this model needs a video frame every step", axis="video")
        frame = model.video.normalize(video)
        if frame.ndim != 2:
            raise ShapeError(f"video frame must be 2D, got {frame.shape}", axis="video")
        session.video_window = np.concatenate([session.video_window[1:], frame[None]])
        visual = model.video.step(session.video_window)
    session.audio_frames = (session.audio_frames + [audio])[-model.audio.window_frames:]
    audio_feats = model.audio.step(np.concatenate(session.audio_frames))
    tokens = model.tokens(visual, audio_feats)
    session.emformer, tokens = model.temporal.step(session.emformer, tokens)
    session.vocoder, out = model.vocoder.step(session.vocoder, model.mel(tokens))
    session.steps += 1
    session.samples_emitted += out.size
    return out


# ----------------------------------------------------------------------- mixing


@dataclass(frozen=True)
class MixSpec:
    snr_db: float = 0.0
    sir_db: float = 0.0
    n_noises: int | None = None
    n_interferers: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.snr_db) and math.isfinite(self.sir_db)):
            raise ValueError("SNR and SIR must be finite")


def power(x: np.ndarray) -> float:
    """Mean squared amplitude over the whole track."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def ratio_db(signal: np.ndarray, other: np.ndarray) -> float:
    return 10.0 * math.log10(power(signal) / power(other))


def _group_gains(clean_power: float, tracks: Sequence[np.ndarray], target_db: float) -> list[float]:
    if not tracks:
        return []
    powers = [power(t) for t in tracks]
    for i, p in enumerate(powers):
        if p <= 0:
            raise ValueError(f"track {i} has zero power and cannot be scaled")
    unit = [np.asarray(t, np.float64) / math.sqrt(p) for t, p in zip(tracks, powers)]
    total = power(np.sum(unit, axis=0))
    if total <= 0:
        raise ValueError("tracks cancel to zero power")
    scale = math.sqrt(clean_power / 10.0 ** (target_db / 10.0) / total)
    return [scale / math.sqrt(p) for p in powers]


def mix_gains(clean: np.ndarray, interferers: Sequence[np.ndarray], noises: Sequence[np.ndarray],
              spec: MixSpec) -> tuple[list[float], list[float]]:
    """Per-track gains so the summed interference sits at ``sir_db`` and the summed
    noise at ``snr_db`` below the clean power.  Tracks of a group get equal power."""
    lengths = {np.asarray(t).shape for t in [clean, *interferers, *noises]}
    if len(lengths) != 1:
        raise ValueError(f"all tracks must have the same length, got {sorted(lengths)}")
    if spec.n_noises is not None and spec.n_noises != len(noises):
        raise ValueError(f"spec expects {spec.n_noises} noise tracks, got {len(noises)}")
    if spec.n_interferers is not None and spec.n_interferers != len(interferers):
        raise ValueError(f"spec expects {spec.n_interferers} interferers, got {len(interferers)}")
    p_clean = power(clean)
    if p_clean <= 0:
        raise ValueError("clean track has zero power")
    return _group_gains(p_clean, interferers, spec.sir_db), _group_gains(p_clean, noises, spec.snr_db)


def mix(clean: np.ndarray, interferers: Sequence[np.ndarray], noises: Sequence[np.ndarray],
        spec: MixSpec) -> np.ndarray:
    g_int, g_noise = mix_gains(clean, interferers, noises, spec)
    out = np.asarray(clean, np.float64).copy()
    for g, t in zip(g_int + g_noise, list(interferers) + list(noises)):
        out += g * np.asarray(t, np.float64)
    return out


# ----------------------------------------------------------------------- timing


@dataclass
class LatencyReport:
    algorithm_latency_ms: Fraction | float
    mean_ms: float
    std_ms: float
    steps: int
    samples_ms: list[float] = field(repr=False, default_factory=list)
    warmup: int = 10
    protocol: str = "wall-clock per step, single thread, warm-up steps excluded, sample std"

    @property
    def realtime_ok(self) -> bool:
        return self.mean_ms < float(FRAME_MS)

    def end_to_end_ms(self, cropping_ms: float) -> float:
        """Enhancement time plus an externally measured mouth-cropping time."""
        return round(self.mean_ms + cropping_ms, 10)

    def to_dict(self) -> dict:
        alg = self.algorithm_latency_ms
        return {
            "algorithm_latency_ms": float(alg) if alg != math.inf else None,
            "mean": self.mean_ms,
            "std": self.std_ms,
            "steps": self.steps,
            "warmup": self.warmup,
            "realtime": self.realtime_ok,
            "protocol": self.protocol,
        }


def measure_processing_latency(session: Session, steps: int = 1000, warmup: int = 10,
                               seed: int = 0, clock=time.perf_counter) -> LatencyReport:
    """Time ``steps`` session steps on synthetic inputs after ``warmup`` untimed steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    size = session.config.video_encoder.size
    video = rng.uniform(0, 1, size=(size, size)).astype(np.float32) if session.config.video else None
    audio = rng.uniform(-0.5, 0.5, size=FRAME_SAMPLES).astype(np.float32)
    for _ in range(warmup):
        session_step(session, video, audio)
    samples = []
    for _ in range(steps):
        start = clock()
        session_step(session, video, audio)
        samples.append((clock() - start) * 1000.0)
    arr = np.asarray(samples)
    std = float(arr.std(ddof=1)) if steps > 1 else 0.0
    return LatencyReport(algorithm_latency(latency_graph(session.config)), float(arr.mean()), std,
                         steps, samples, warmup)
