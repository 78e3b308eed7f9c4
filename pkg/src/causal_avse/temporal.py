"""Audio-visual fusion, streaming Emformer, bidirectional Transformer baseline, mel head.

Tokens are time-major ``T x model_dim`` float32 arrays at 100 Hz.  The Emformer
here has no memory bank and no right context: a token attends to its own
segment and to the ``left_context`` tokens before the segment start.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import weights as W
from .tensor import ShapeError, layer_norm, linear, relu, scaled_dot_attention
from .weights import ParamSpec, WeightStore

__all__ = [
    "EmformerConfig",
    "EmformerState",
    "TemporalEncoder",
    "fuse",
    "emformer_mask",
    "emformer_step",
    "emformer_offline",
    "transformer_offline",
    "project_mel",
]


@dataclass(frozen=True)
class EmformerConfig:
    blocks: int = 12
    heads: int = 12
    model_dim: int = 768
    ffn_dim: int = 3072
    segment_length: int = 4
    left_context: int = 64
    memory_bank: int = 0
    norm: str = "post"  # post | pre
    activation: str = "relu"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        if self.segment_length < 1 or self.left_context < 0:
            raise ValueError("segment_length must be >= 1 and left_context >= 0")
        if self.memory_bank != 0:
            raise ValueError("memory bank attention is not supported (length must be 0)")
        if self.norm not in ("post", "pre"):
            raise ValueError(f"unknown norm placement {self.norm!r}")


@dataclass(frozen=True)
class EmformerState:
    """Per-block keys/values of the most recent ``left_context`` positions."""

    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    position: int = 0

    @classmethod
    def empty(cls, config: EmformerConfig) -> "EmformerState":
        blank = np.zeros((0, config.model_dim), np.float32)
        return cls((blank,) * config.blocks, (blank,) * config.blocks, 0)


def emformer_mask(t: int, segment: int, left_context: int) -> np.ndarray:
    """Boolean T x T mask: query i sees keys from ``seg_start - left_context`` to ``seg_end``."""
    pos = np.arange(t)
    start = (pos // segment) * segment
    lo = start - left_context
    hi = np.minimum(start + segment, t)
    return (pos[None, :] >= lo[:, None]) & (pos[None, :] < hi[:, None])


class TemporalEncoder:
    """Stack of attention blocks shared by the Emformer and the Transformer baseline."""

    def __init__(self, config: EmformerConfig, store: WeightStore, prefix: str = "temporal"):
        self.config = config
        self.store = store
        self.prefix = prefix

    @staticmethod
    def param_specs(config: EmformerConfig, prefix: str = "temporal") -> list[ParamSpec]:
        d, f = config.model_dim, config.ffn_dim
        specs = []
        for i in range(config.blocks):
            p = f"{prefix}.block{i}"
            for proj in ("q", "k", "v", "o"):
                specs += [ParamSpec(f"{p}.attn.{proj}.weight", (d, d)),
                          ParamSpec(f"{p}.attn.{proj}.bias", (d,), W.BIAS)]
            specs += [ParamSpec(f"{p}.ffn.fc1.weight", (f, d)), ParamSpec(f"{p}.ffn.fc1.bias", (f,), W.BIAS),
                      ParamSpec(f"{p}.ffn.fc2.weight", (d, f)), ParamSpec(f"{p}.ffn.fc2.bias", (d,), W.BIAS)]
            for ln in ("ln1", "ln2"):
                specs += [ParamSpec(f"{p}.{ln}.weight", (d,), W.SCALE),
                          ParamSpec(f"{p}.{ln}.bias", (d,), W.SHIFT)]
        return specs

    def _lin(self, name: str, x: np.ndarray) -> np.ndarray:
        return linear(x, self.store.f64(f"{name}.weight"), self.store.f64(f"{name}.bias"))

    def _ln(self, name: str, x: np.ndarray) -> np.ndarray:
        return layer_norm(x, self.store.f64(f"{name}.weight"), self.store.f64(f"{name}.bias"))

    def _heads(self, x: np.ndarray) -> np.ndarray:
        h = self.config.heads
        return x.reshape(x.shape[0], h, -1).transpose(1, 0, 2)

    def _attend(self, p: str, q_in: np.ndarray, keys: np.ndarray, values: np.ndarray,
                mask: np.ndarray | None) -> np.ndarray:
        q = self._lin(f"{p}.attn.q", q_in)
        ctx = scaled_dot_attention(self._heads(q), self._heads(keys), self._heads(values), mask)
        ctx = ctx.transpose(1, 0, 2).reshape(q_in.shape[0], -1)
        return self._lin(f"{p}.attn.o", ctx)

    def _ffn(self, p: str, x: np.ndarray) -> np.ndarray:
        h = self._lin(f"{p}.ffn.fc1", x)
        h = relu(h) if self.config.activation == "relu" else _gelu(h)
        return self._lin(f"{p}.ffn.fc2", h)

    def _block(self, i: int, x: np.ndarray, past_k: np.ndarray | None, past_v: np.ndarray | None,
               mask: np.ndarray | None):
        """One block over tokens ``x``; returns (output, keys of x, values of x)."""
        p = f"{self.prefix}.block{i}"
        src = self._ln(f"{p}.ln1", x) if self.config.norm == "pre" else x
        k_new, v_new = self._lin(f"{p}.attn.k", src), self._lin(f"{p}.attn.v", src)
        keys = k_new if past_k is None else np.concatenate([past_k, k_new])
        values = v_new if past_v is None else np.concatenate([past_v, v_new])
        att = self._attend(p, src, keys, values, mask)
        if self.config.norm == "post":
            x = self._ln(f"{p}.ln1", x + att)
            x = self._ln(f"{p}.ln2", x + self._ffn(p, x))
        else:
            x = x + att
            x = x + self._ffn(p, self._ln(f"{p}.ln2", x))
        return x, k_new, v_new

    def offline(self, tokens: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        x = np.asarray(tokens, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.config.model_dim:
            raise ShapeError(f"tokens must be T x {self.config.model_dim}, got {x.shape}", axis=-1)
        for i in range(self.config.blocks):
            x, _, _ = self._block(i, x, None, None, mask)
        return x

    def step(self, state: EmformerState, segment: np.ndarray) -> tuple[EmformerState, np.ndarray]:
        cfg = self.config
        x = np.asarray(segment, dtype=np.float32)
        if x.shape != (cfg.segment_length, cfg.model_dim):
            raise ShapeError(
                f"segment must be {cfg.segment_length} x {cfg.model_dim}, got {x.shape}", axis=0)
        keys, values = [], []
        for i in range(cfg.blocks):
            x, k_new, v_new = self._block(i, x, state.keys[i], state.values[i], None)
            lc = cfg.left_context
            keys.append(np.concatenate([state.keys[i], k_new])[-lc:] if lc else k_new[:0])
            values.append(np.concatenate([state.values[i], v_new])[-lc:] if lc else v_new[:0])
        return EmformerState(tuple(keys), tuple(values), state.position + x.shape[0]), x


def _gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    x64 = np.asarray(x, dtype=np.float64)
    return (0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))).astype(np.float32)


def emformer_step(encoder: TemporalEncoder, state: EmformerState,
                  segment: np.ndarray) -> tuple[EmformerState, np.ndarray]:
    """Process one segment of tokens, attending to cached left context and the segment itself."""
    return encoder.step(state, segment)


def emformer_offline(encoder: TemporalEncoder, tokens: np.ndarray) -> np.ndarray:
    """Whole-sequence Emformer under the block-banded mask.

    A trailing partial segment behaves as if zero-padded to full length with the
    padding masked out, and only the real tokens are returned.
    """
    cfg = encoder.config
    t = np.asarray(tokens).shape[0]
    if t < 1:
        raise ShapeError("need at least one token", axis=0)
    return encoder.offline(tokens, emformer_mask(t, cfg.segment_length, cfg.left_context))


def transformer_offline(encoder: TemporalEncoder, tokens: np.ndarray) -> np.ndarray:
    """Same blocks with unrestricted bidirectional attention."""
    return encoder.offline(tokens, None)


def fuse(visual: np.ndarray | None, audio: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Repeat 25 Hz visual features to 100 Hz, concatenate with audio, project.

    ``visual`` is N x Dv (or None for audio-only), ``audio`` is 4N x Da.
    """
    audio = np.asarray(audio, dtype=np.float32)
    if visual is None:
        return linear(audio, weight, bias)
    visual = np.asarray(visual, dtype=np.float32)
    if visual.ndim == 1:
        visual = visual[None]
    n = visual.shape[0]
    if audio.shape[0] % n or audio.shape[0] == 0:
        raise ShapeError(f"{audio.shape[0]} audio features do not align with {n} visual features",
                         axis=0)
    ratio = audio.shape[0] // n
    if ratio != 4:
        raise ShapeError(f"expected 4 audio features per visual feature, got {ratio}", axis=0)
    return linear(np.concatenate([np.repeat(visual, ratio, axis=0), audio], axis=1), weight, bias)


def project_mel(tokens: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Linear head from model_dim tokens to 80-band log-mel frames."""
    return linear(tokens, weight, bias)
