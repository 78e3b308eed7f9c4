"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 input-format error,
3 config or weight error.  Every command accepts ``--json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import media
from . import weights as W
from .causal import latency_ledger
from .frontends import FRAME_SAMPLES
from .pipeline import (
    PRESETS,
    MixSpec,
    Model,
    ModelConfig,
    count_params,
    enhance_offline,
    latency_graph,
    measure_processing_latency,
    mix_gains,
    power,
    session_new,
    session_step,
    weights_init,
)
from .tensor import ShapeError

log = logging.getLogger("causal_avse")

EXIT_OK, EXIT_VERIFY, EXIT_FORMAT, EXIT_CONFIG = 0, 1, 2, 3
SEED_ENV = "RT_LAVOCE_SEED"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}={raw!r} is not an integer", EXIT_CONFIG) from None


def load_config(value: str) -> ModelConfig:
    """A preset name or a path to a JSON config."""
    if value in PRESETS and not Path(value).exists():
        return PRESETS[value]
    try:
        return ModelConfig.load(value)
    except FileNotFoundError:
        raise CliError(f"config {value!r} is neither a file nor a preset "
                       f"({', '.join(sorted(PRESETS))})", EXIT_FORMAT) from None
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CliError(f"invalid config {value}: {exc}", EXIT_FORMAT) from None


def load_model(config: ModelConfig, weights: str | None, seed: int | None = None) -> Model:
    if weights is None:
        seed = default_seed() if seed is None else seed
        log.info("no --weights given; using seeded initialisation (seed %d)", seed)
        store = weights_init(config, seed)
    else:
        try:
            store = W.load(weights)
        except W.WeightFileError as exc:
            raise CliError(f"weight file {weights}: {exc}", EXIT_FORMAT) from None
        except OSError as exc:
            raise CliError(f"cannot read weights: {exc}", EXIT_FORMAT) from None
    try:
        return Model(config, store)
    except W.WeightError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except ValueError as exc:
        raise CliError(f"config rejected: {exc}", EXIT_CONFIG) from None


def _num(value):
    """JSON-safe rendering of exact or infinite milliseconds."""
    if value == math.inf:
        return "inf"
    value = Fraction(value)
    return int(value) if value.denominator == 1 else float(value)


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


# ------------------------------------------------------------------- commands


def cmd_enhance(args) -> int:
    config = load_config(args.config)
    model = load_model(config, args.weights)
    try:
        audio = media.read_wav(args.audio)
        video = media.read_vraw(args.video) if args.video else None
    except (media.MediaError, OSError) as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None
    if config.video and video is None:
        raise CliError("this config uses video; pass --video", EXIT_FORMAT)
    if video is not None and video.shape[1:] != (config.video_encoder.size,) * 2:
        raise CliError(f"video frames are {video.shape[2]}x{video.shape[1]}, expected "
                       f"{config.video_encoder.size}x{config.video_encoder.size} (field: width/height)",
                       EXIT_FORMAT)
    n = audio.size // FRAME_SAMPLES
    if video is not None and config.video:
        n = min(n, video.shape[0])
    if n == 0:
        raise CliError("inputs hold less than one 40 ms frame", EXIT_FORMAT)
    if audio.size != n * FRAME_SAMPLES or (video is not None and config.video and video.shape[0] != n):
        log.warning("inputs not aligned (%d samples, %s frames); trimming to %d frames",
                    audio.size, "no" if video is None else video.shape[0], n)
    audio = audio[: n * FRAME_SAMPLES]
    video = video[:n] if (video is not None and config.video) else None

    try:
        if args.mode == "stream":
            try:
                session = session_new(config, model)
            except ValueError as exc:
                raise CliError(f"cannot stream this config: {exc}", EXIT_CONFIG) from None
            out = np.concatenate([
                session_step(session, None if video is None else video[i],
                             audio[i * FRAME_SAMPLES:(i + 1) * FRAME_SAMPLES]) for i in range(n)])
        else:
            out = enhance_offline(video, audio, config, model)
    except ShapeError as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None
    media.write_wav(args.out, out)
    _emit(args, {"out": str(args.out), "frames": n, "samples": int(out.size), "mode": args.mode},
          f"wrote {out.size} samples ({n} frames, {args.mode}) to {args.out}")
    return EXIT_OK


def cmd_analyze_latency(args) -> int:
    config = load_config(args.config)
    ledger = latency_ledger(latency_graph(config))
    stages = [{"name": line.name, "depth": line.depth, "lookahead_ms": _num(line.lookahead_ms),
               "latency_ms": _num(ledger.base_ms + line.lookahead_ms)} for line in ledger.lines]
    payload = {"total_ms": _num(ledger.total_ms), "frame_ms": _num(ledger.base_ms),
               "lookahead_ms": _num(ledger.lookahead_ms), "render": ledger.render(),
               "causal": ledger.lookahead_ms == 0, "stages": stages}
    width = max(len(s["name"]) + 2 * s["depth"] for s in stages)
    rows = [f"{'stage':<{width}}  {'lookahead':>10}  {'latency':>8}"]
    for s in stages:
        label = "  " * s["depth"] + s["name"]
        rows.append(f"{label:<{width}}  {str(s['lookahead_ms']):>10}  {str(s['latency_ms']):>8}")
    rows.append(f"algorithm latency (ms): {ledger.render()}")
    _emit(args, payload, "\n".join(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.steps < 1:
        raise CliError("--steps must be >= 1", EXIT_FORMAT)
    config = load_config(args.config)
    model = load_model(config, args.weights)
    try:
        session = session_new(config, model)
    except ValueError as exc:
        raise CliError(f"cannot stream this config: {exc}", EXIT_CONFIG) from None
    report = measure_processing_latency(session, steps=args.steps, warmup=args.warmup)
    payload = report.to_dict()
    text = (f"{report.mean_ms:.2f} ± {report.std_ms:.2f} ms/frame over {report.steps} steps "
            f"({report.warmup} warm-up) realtime: {'yes' if report.realtime_ok else 'no'}")
    if args.cropping_ms is not None:
        payload["cropping_ms"] = args.cropping_ms
        payload["end_to_end_ms"] = report.end_to_end_ms(args.cropping_ms)
        text += (f"\nend-to-end: {report.mean_ms:.2f} + {args.cropping_ms:.2f} = "
                 f"{payload['end_to_end_ms']:.2f} ms/frame")
    _emit(args, payload, text)
    return EXIT_OK


def cmd_verify_causality(args) -> int:
    from .verify import verify_model

    if args.trials < 0:
        raise CliError("--trials must be >= 0", EXIT_FORMAT)
    config = load_config(args.config)
    model = load_model(config, args.weights)
    if args.trials == 0:
        log.warning("--trials 0: perturbation checks are vacuous and pass trivially")
    checks, parity = verify_model(model, args.trials, args.seed, args.parity_steps)
    results = [c.to_dict() for c in checks]
    unexpected = [c.name for c in checks if c.trials and not c.expected]
    if parity is not None and not parity.expected:
        unexpected.append(parity.name)
    end_to_end = all(c.causal for c in checks) and (parity is None or parity.equal)
    payload = {"config_causal": config.causal, "trials": args.trials, "checks": results,
               "parity": None if parity is None else parity.to_dict(),
               "end_to_end": "PASS" if end_to_end else "FAIL", "unexpected": unexpected}
    rows = []
    for c in checks:
        line = f"{'PASS' if c.causal else 'FAIL'}  {c.name}  ({c.violations}/{c.trials} violations)"
        if c.witness:
            w = c.witness
            line += (f"  witness: perturbing step {w['perturbed_from_step']} changed step "
                     f"{w['changed_step']} by {w['deviation']:.3g}")
        rows.append(line)
    if parity is not None:
        rows.append(f"{'PASS' if parity.equal else 'FAIL'}  {parity.name}  "
                    f"max |diff| {parity.max_abs_diff:.3g} over {parity.steps} steps")
    rows.append(f"end-to-end: {payload['end_to_end']}")
    if unexpected:
        rows.append("unexpected verdicts: " + ", ".join(unexpected))
    _emit(args, payload, "\n".join(rows))
    return EXIT_VERIFY if unexpected else EXIT_OK


def cmd_mix(args) -> int:
    try:
        clean = media.read_wav(args.clean)
        interferers = [media.read_wav(p) for p in args.interferer]
        noises = [media.read_wav(p) for p in args.noise]
    except (media.MediaError, OSError) as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None
    spec = MixSpec(snr_db=args.snr, sir_db=args.sir)
    try:
        g_int, g_noise = mix_gains(clean, interferers, noises, spec)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_FORMAT) from None
    clean64 = clean.astype(np.float64)
    interference = sum((g * t.astype(np.float64) for g, t in zip(g_int, interferers)),
                       np.zeros_like(clean64))
    noise = sum((g * t.astype(np.float64) for g, t in zip(g_noise, noises)), np.zeros_like(clean64))
    out = clean64 + interference + noise
    for i, g in enumerate(g_int):
        log.info("interferer %d scale %.6g", i, g)
    for i, g in enumerate(g_noise):
        log.info("noise %d scale %.6g", i, g)
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    if peak >= 1.0:
        log.warning("mix peaks at %.3f; the written file will clip", peak)
    media.write_wav(args.out, out)
    p = power(clean64)
    payload = {"out": str(args.out), "interferer_scales": g_int, "noise_scales": g_noise,
               "snr_db": 10 * math.log10(p / power(noise)) if noises else None,
               "sir_db": 10 * math.log10(p / power(interference)) if interferers else None,
               "peak": peak}
    text = [f"wrote {args.out}"]
    text += [f"interferer {i} scale {g:.6g}" for i, g in enumerate(g_int)]
    text += [f"noise {i} scale {g:.6g}" for i, g in enumerate(g_noise)]
    _emit(args, payload, "\n".join(text))
    return EXIT_OK


def cmd_params(args) -> int:
    config = load_config(args.config)
    counts = count_params(config)
    payload = {"per_module": counts.per_module, "enhancer": counts.enhancer, "total": counts.total,
               "millions": {k: round(v, 3) for k, v in counts.millions().items()}}
    rows = [f"{name:<10} {n:>12,d}  {n / 1e6:8.2f} M" for name, n in counts.per_module.items()]
    rows.append(f"{'enhancer':<10} {counts.enhancer:>12,d}  {counts.enhancer / 1e6:8.2f} M")
    rows.append(f"{'total':<10} {counts.total:>12,d}  {counts.total / 1e6:8.2f} M")
    _emit(args, payload, "\n".join(rows))
    return EXIT_OK


def cmd_init_weights(args) -> int:
    config = load_config(args.config)
    seed = default_seed() if args.seed is None else args.seed
    store = weights_init(config, seed)
    W.save(store, args.out)
    _emit(args, {"out": str(args.out), "seed": seed, "tensors": len(store)},
          f"wrote {len(store)} tensors (seed {seed}) to {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    config = load_config(args.preset)
    print(config.to_json(indent=2))
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="causal-avse", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    config_help = "JSON config file or preset name"
    p = add("enhance", cmd_enhance, "enhance a WAV (+ VRAW video) file")
    p.add_argument("--video")
    p.add_argument("--audio", required=True)
    p.add_argument("--weights")
    p.add_argument("--config", default="causal", help=config_help)
    p.add_argument("--mode", choices=("stream", "offline"), default="stream")
    p.add_argument("--out", required=True)

    p = add("analyze-latency", cmd_analyze_latency, "print the algorithm-latency ledger")
    p.add_argument("--config", default="causal", help=config_help)

    p = add("bench", cmd_bench, "measure per-frame processing time")
    p.add_argument("--config", default="causal", help=config_help)
    p.add_argument("--weights")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--cropping-ms", type=float, help="add a mouth-cropping time to the report")

    p = add("verify-causality", cmd_verify_causality, "future-perturbation and parity checks")
    p.add_argument("--config", default="causal", help=config_help)
    p.add_argument("--weights")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--parity-steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = add("mix", cmd_mix, "mix clean speech with interferers and noise at given SIR/SNR")
    p.add_argument("--clean", required=True)
    p.add_argument("--interferer", action="append", default=[])
    p.add_argument("--noise", action="append", default=[])
    p.add_argument("--sir", type=float, default=0.0)
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("params", cmd_params, "count learnable parameters per module")
    p.add_argument("--config", default="causal", help=config_help)

    p = add("init-weights", cmd_init_weights, "write seeded initial weights to a .rtw file")
    p.add_argument("--config", default="causal", help=config_help)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("config", cmd_config, "print a preset as a JSON config")
    p.add_argument("preset", choices=sorted(PRESETS))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_FORMAT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"error": str(exc), "exit_code": exc.code}))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
