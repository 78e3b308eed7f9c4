"""Black-box causality checks by future perturbation, plus streaming parity.

A check feeds a base input, then re-runs with everything after a random cut
replaced by fresh noise.  Outputs owned by units up to the cut must not move.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .frontends import FRAME_SAMPLES, HOP, AudioResNet, MelEncoder, stft
from .pipeline import Model, ModelConfig, enhance_offline, naive_online, session_new, session_step
from .temporal import emformer_offline, transformer_offline

__all__ = [
    "CheckResult",
    "Stream",
    "future_perturbation",
    "empirical_lookahead",
    "module_checks",
    "session_check",
    "parity_check",
    "verify_model",
]


@dataclass
class CheckResult:
    name: str
    expect_causal: bool
    trials: int
    violations: int = 0
    max_deviation: float = 0.0
    witness: dict | None = None
    note: str = ""

    @property
    def causal(self) -> bool:
        return self.violations == 0

    @property
    def expected(self) -> bool:
        """True when the verdict matches what the module's design promises."""
        return self.causal == self.expect_causal

    def to_dict(self) -> dict:
        return {"name": self.name, "expect_causal": self.expect_causal, "trials": self.trials,
                "violations": self.violations, "max_deviation": self.max_deviation,
                "verdict": "PASS" if self.causal else "FAIL", "expected": self.expected,
                "witness": self.witness, "note": self.note}


@dataclass(frozen=True)
class Stream:
    """One input of a checked function: ``per_unit`` rows of ``base`` belong to each time unit."""

    base: np.ndarray
    per_unit: int
    noise: Callable[[np.random.Generator, tuple], np.ndarray] = field(
        default=lambda rng, shape: rng.uniform(-1, 1, size=shape))


def future_perturbation(name: str, run: Callable[..., np.ndarray], streams: Sequence[Stream],
                        out_per_unit: int, trials: int, expect_causal: bool = True, seed: int = 0,
                        tol: float = 0.0) -> CheckResult:
    """Randomised search for an output that depends on a later input unit.

    ``run(*arrays)`` must return an array whose axis 0 holds ``out_per_unit``
    rows per unit.  A trial with cut ``t`` perturbs units ``t+1 ..`` of every
    stream and compares output rows of units ``0 .. t``.
    """
    rng = np.random.default_rng(seed)
    units = streams[0].base.shape[0] // streams[0].per_unit
    if units < 2:
        raise ValueError("need at least two time units to perturb the future")
    result = CheckResult(name, expect_causal, trials)
    base_out = np.asarray(run(*[s.base for s in streams]), dtype=np.float64)
    for trial in range(trials):
        cut = int(rng.integers(0, units - 1))
        arrays = []
        for s in streams:
            x = s.base.copy()
            start = (cut + 1) * s.per_unit
            x[start:] = s.noise(rng, x[start:].shape).astype(x.dtype)
            arrays.append(x)
        out = np.asarray(run(*arrays), dtype=np.float64)
        keep = (cut + 1) * out_per_unit
        diff = np.abs(out[:keep] - base_out[:keep])
        dev = float(diff.max()) if diff.size else 0.0
        result.max_deviation = max(result.max_deviation, dev)
        if dev > tol:
            result.violations += 1
            if result.witness is None:
                row = int(np.unravel_index(np.argmax(diff), diff.shape)[0])
                result.witness = {"trial": trial, "perturbed_from_step": cut + 1,
                                  "changed_step": row // out_per_unit, "changed_row": row,
                                  "deviation": dev}
    return result


def empirical_lookahead(run: Callable[[np.ndarray], np.ndarray], length: int, hop: int,
                        seed: int = 0) -> int:
    """Largest distance, in input samples, between an input and the end of the
    earliest output block it influences.  Output row ``j`` owns samples
    ``[j*hop, (j+1)*hop)``; 0 means causal."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=length)
    base = np.asarray(run(x))
    worst = 0
    for i in range(length):
        y = x.copy()
        y[i] += 1.0
        changed = np.flatnonzero(np.any(np.asarray(run(y)) != base, axis=tuple(range(1, base.ndim))))
        if changed.size:
            worst = max(worst, i - ((int(changed[0]) + 1) * hop - 1))
    return worst


def _stft_run(mode: str):
    def run(x):
        return np.abs(stft(x, mode))

    return run


def module_checks(model: Model, trials: int, seed: int = 0, units: int = 6) -> list[CheckResult]:
    """Future-perturbation checks for each module of ``model`` in isolation."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    results = []
    audio = Stream(rng.uniform(-0.5, 0.5, units * FRAME_SAMPLES).astype(np.float32), FRAME_SAMPLES)

    if isinstance(model.audio, MelEncoder):
        mode = model.audio.config.mode
        results.append(future_perturbation(
            f"stft ({mode})", _stft_run(mode), [Stream(audio.base, HOP)], 1, trials,
            expect_causal=mode == "causal", seed=seed))
    results.append(future_perturbation(
        f"audio encoder ({cfg.audio_encoder})", model.audio, [audio],
        model.audio.features_per_frame, trials,
        expect_causal=cfg.audio_encoder not in ("mel_linear", "spec_linear"), seed=seed, tol=1e-6))

    if model.video is not None:
        size = cfg.video_encoder.size
        frames = Stream(rng.uniform(0, 1, (units, size, size)).astype(np.float32), 1,
                        lambda r, shape: r.uniform(0, 1, size=shape))
        results.append(future_perturbation(
            "video encoder", model.video, [frames], 1, trials,
            expect_causal=cfg.video_encoder.causal, seed=seed, tol=1e-6))

    seg = cfg.emformer.segment_length
    tokens = Stream(rng.standard_normal((units * seg, cfg.emformer.model_dim)).astype(np.float32), seg,
                    lambda r, shape: r.standard_normal(shape))
    if cfg.temporal == "emformer":
        results.append(future_perturbation(
            "emformer", lambda t: emformer_offline(model.temporal, t), [tokens], seg, trials,
            seed=seed, tol=1e-6))
    else:
        results.append(future_perturbation(
            "transformer", lambda t: transformer_offline(model.temporal, t), [tokens], seg, trials,
            expect_causal=False, seed=seed, tol=1e-6))

    mel = Stream(rng.uniform(-1, 1, (units * seg, cfg.vocoder.n_mels)).astype(np.float32), seg)
    results.append(future_perturbation(
        "vocoder" if cfg.vocoder.causal else "vocoder (non-causal)", model.vocoder, [mel],
        seg * cfg.vocoder.hop, trials, expect_causal=cfg.vocoder.causal, seed=seed, tol=1e-6))
    return results


def _media(cfg: ModelConfig, rng: np.random.Generator, steps: int):
    size = cfg.video_encoder.size
    video = rng.uniform(0, 1, (steps, size, size)).astype(np.float32) if cfg.video else None
    audio = rng.uniform(-0.5, 0.5, steps * FRAME_SAMPLES).astype(np.float32)
    return video, audio


def _media_streams(cfg: ModelConfig, rng, steps: int) -> list[Stream]:
    video, audio = _media(cfg, rng, steps)
    streams = [Stream(audio, FRAME_SAMPLES, lambda r, shape: r.uniform(-0.5, 0.5, size=shape))]
    if video is not None:
        streams.append(Stream(video, 1, lambda r, shape: r.uniform(0, 1, size=shape)))
    return streams


def offline_check(model: Model, trials: int, seed: int = 0, steps: int = 6) -> CheckResult:
    """End-to-end perturbation of the offline path (any config)."""
    cfg = model.config
    streams = _media_streams(cfg, np.random.default_rng(seed), steps)

    def run(audio, video=None):
        return enhance_offline(video, audio, cfg, model)

    return future_perturbation("end-to-end (offline graph)", run, streams, FRAME_SAMPLES, trials,
                               expect_causal=cfg.causal, seed=seed, tol=1e-6)


def _stream_all(model: Model, video, audio) -> np.ndarray:
    session = session_new(model.config, model)
    n = audio.size // FRAME_SAMPLES
    return np.concatenate([
        session_step(session, None if video is None else video[i],
                     audio[i * FRAME_SAMPLES:(i + 1) * FRAME_SAMPLES]) for i in range(n)])


def session_check(model: Model, trials: int, seed: int = 0, steps: int = 6) -> CheckResult:
    """End-to-end perturbation of the streaming session; outputs must be bit-identical."""
    cfg = model.config
    streams = _media_streams(cfg, np.random.default_rng(seed), steps)

    def run(audio, video=None):
        return _stream_all(model, video, audio)

    return future_perturbation("end-to-end (streaming session)", run, streams, FRAME_SAMPLES,
                               trials, seed=seed, tol=0.0)


@dataclass
class ParityResult:
    name: str
    steps: int
    max_abs_diff: float
    identical: bool
    expect_equal: bool
    tol: float = 1e-4

    @property
    def equal(self) -> bool:
        return self.max_abs_diff <= self.tol

    @property
    def expected(self) -> bool:
        return self.equal == self.expect_equal

    def to_dict(self) -> dict:
        return {"name": self.name, "steps": self.steps, "max_abs_diff": self.max_abs_diff,
                "identical": self.identical, "verdict": "PASS" if self.equal else "FAIL",
                "expected": self.expected}


def parity_check(model: Model, steps: int = 50, seed: int = 0) -> ParityResult:
    """Online vs offline output on one random stream.

    Causal configs stream through a session; others use the naive online
    baseline, which should diverge from offline.
    """
    cfg = model.config
    video, audio = _media(cfg, np.random.default_rng(seed), steps)
    offline = enhance_offline(video, audio, cfg, model)
    if cfg.causal:
        online = _stream_all(model, video, audio)
        name = "online/offline parity (session)"
    else:
        online = np.concatenate(list(naive_online(video, audio, cfg, model)))
        name = "online/offline parity (naive online)"
    diff = float(np.max(np.abs(online.astype(np.float64) - offline)))
    return ParityResult(name, steps, diff, bool(np.array_equal(online, offline)), cfg.causal)


def verify_model(model: Model, trials: int = 100, seed: int = 0, parity_steps: int = 50):
    """All checks for one model; returns (module/end-to-end checks, parity result)."""
    checks = module_checks(model, trials, seed)
    checks.append(offline_check(model, trials, seed))
    if model.config.causal:
        checks.append(session_check(model, trials, seed))
    parity = parity_check(model, parity_steps, seed) if parity_steps else None
    return checks, parity
