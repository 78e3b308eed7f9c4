import json
import logging

import numpy as np
import pytest

from causal_avse import media
from causal_avse.cli import SEED_ENV, main
from causal_avse.pipeline import preset, weights_init
from causal_avse.weights import load, save
from conftest import random_media


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def run_json(capsys, *argv):
    code, cap = run(capsys, *argv, "--json")
    return code, json.loads(cap.out)


@pytest.fixture
def desk_files(tmp_path):
    cfg = preset("desk")
    video, audio = random_media(cfg, 12, seed=11)
    media.write_vraw(tmp_path / "in.vraw", video)
    media.write_wav(tmp_path / "in.wav", audio)
    save(weights_init(cfg, 0), tmp_path / "w.rtw")
    (tmp_path / "desk.json").write_text(cfg.to_json())
    return tmp_path


def _enhance(capsys, d, mode, out, video="in.vraw", audio="in.wav"):
    return run(capsys, "enhance", "--video", d / video, "--audio", d / audio, "--weights", d / "w.rtw",
               "--config", d / "desk.json", "--mode", mode, "--out", d / out)


def test_enhance_stream_and_offline_files_are_byte_identical(desk_files, capsys):
    d = desk_files
    assert _enhance(capsys, d, "stream", "s.wav")[0] == 0
    assert _enhance(capsys, d, "offline", "o.wav")[0] == 0
    assert (d / "s.wav").read_bytes() == (d / "o.wav").read_bytes()
    assert media.read_wav(d / "s.wav").size == 12 * 640


def test_enhance_50_frames_gives_32000_samples(tmp_path, capsys):
    video, audio = random_media(preset("desk"), 50, seed=1)
    media.write_vraw(tmp_path / "v.vraw", video)
    media.write_wav(tmp_path / "a.wav", audio)
    code, data = run_json(capsys, "enhance", "--video", tmp_path / "v.vraw", "--audio", tmp_path / "a.wav",
                          "--config", "desk", "--out", tmp_path / "o.wav")
    assert code == 0 and data["samples"] == 32000 and data["frames"] == 50
    assert media.read_wav(tmp_path / "o.wav").size == 32000


def test_enhance_trims_misaligned_inputs_with_warning(desk_files, capsys, caplog):
    d = desk_files
    audio = media.read_wav(d / "in.wav")
    media.write_wav(d / "long.wav", np.concatenate([audio, audio[:300]]))
    with caplog.at_level(logging.WARNING, logger="causal_avse"):
        code, _ = _enhance(capsys, d, "stream", "t.wav", audio="long.wav")
    assert code == 0
    assert any("trimming" in r.message for r in caplog.records)
    assert media.read_wav(d / "t.wav").size == 12 * 640


@pytest.mark.parametrize("blob", [b"VRAW\x01\x00\x00\x00", b"GARBAGE" * 4])
def test_enhance_bad_video_exits_2(desk_files, capsys, blob):
    (desk_files / "bad.vraw").write_bytes(blob)
    assert _enhance(capsys, desk_files, "stream", "x.wav", video="bad.vraw")[0] == 2


def test_enhance_wrong_frame_size_exits_2(desk_files, capsys):
    media.write_vraw(desk_files / "small.vraw", np.zeros((12, 64, 64), np.uint8))
    code, cap = _enhance(capsys, desk_files, "stream", "x.wav", video="small.vraw")
    assert code == 2 and "width" in cap.err


def test_weight_mismatch_exits_3_and_names_tensor(desk_files, capsys):
    store = load(desk_files / "w.rtw")
    save(store.without("mel_head.bias"), desk_files / "w.rtw")
    code, cap = _enhance(capsys, desk_files, "offline", "x.wav")
    assert code == 3 and "mel_head.bias" in cap.err


def test_corrupt_weight_file_exits_2(desk_files, capsys):
    (desk_files / "w.rtw").write_bytes(b"RTWL\x01")
    assert _enhance(capsys, desk_files, "offline", "x.wav")[0] == 2


def test_streaming_a_non_causal_config_exits_3(desk_files, capsys):
    cfg = preset("desk_noncausal")
    (desk_files / "nc.json").write_text(cfg.to_json())
    code, _ = run(capsys, "enhance", "--video", desk_files / "in.vraw", "--audio", desk_files / "in.wav",
                  "--config", desk_files / "nc.json", "--mode", "stream", "--out", desk_files / "x.wav")
    assert code == 3


def test_invalid_config_exits_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"audio_encoder": "nope"}')
    assert run(capsys, "analyze-latency", "--config", tmp_path / "bad.json")[0] == 2
    (tmp_path / "broken.json").write_text("{")
    assert run(capsys, "params", "--config", tmp_path / "broken.json")[0] == 2
    assert run(capsys, "params", "--config", tmp_path / "missing.json")[0] == 2
    assert run(capsys, "params", "--bogus")[0] == 2


def test_analyze_latency(capsys):
    code, data = run_json(capsys, "analyze-latency", "--config", "causal")
    assert code == 0 and data["total_ms"] == 40 and data["render"] == "40" and data["causal"]
    code, data = run_json(capsys, "analyze-latency", "--config", "mel_linear")
    assert data["total_ms"] == 55 and data["render"] == "55 (40 + 15)"
    code, cap = run(capsys, "analyze-latency", "--config", "mel_linear")
    assert "55 (40 + 15)" in cap.out


def test_analyze_latency_video_front_end_line(tmp_path, capsys):
    cfg = preset("causal")
    cfg = cfg.replace(video_encoder=cfg.video_encoder.__class__(causal=False))
    (tmp_path / "c.json").write_text(cfg.to_json())
    code, data = run_json(capsys, "analyze-latency", "--config", tmp_path / "c.json")
    line = next(s for s in data["stages"] if s["name"] == "video front-end")
    assert line["latency_ms"] == 120 and line["lookahead_ms"] == 80
    assert data["total_ms"] == 120
    code, data = run_json(capsys, "analyze-latency", "--config", "noncausal")
    assert data["total_ms"] == "inf" and not data["causal"]


def test_bench_json_schema(capsys):
    code, data = run_json(capsys, "bench", "--config", "desk", "--steps", "10", "--warmup", "1",
                          "--cropping-ms", "7.27")
    assert code == 0
    assert {"mean", "std", "realtime"} <= set(data)
    assert data["steps"] == 10 and data["algorithm_latency_ms"] == 40
    assert data["end_to_end_ms"] == pytest.approx(data["mean"] + 7.27)
    assert run(capsys, "bench", "--config", "desk", "--steps", "0")[0] == 2


def test_bench_text(capsys):
    code, cap = run(capsys, "bench", "--config", "desk", "--steps", "3", "--warmup", "0")
    assert code == 0 and "ms/frame over 3 steps" in cap.out and "realtime" in cap.out


def test_verify_causality_passes_causal_desk(capsys):
    code, data = run_json(capsys, "verify-causality", "--config", "desk", "--trials", "4",
                          "--parity-steps", "6")
    assert code == 0 and data["end_to_end"] == "PASS" and not data["unexpected"]
    assert all(c["verdict"] == "PASS" for c in data["checks"])
    assert data["parity"]["identical"]


def test_verify_causality_non_causal_prints_witness(capsys):
    code, cap = run(capsys, "verify-causality", "--config", "desk_noncausal", "--trials", "3",
                    "--parity-steps", "4")
    assert code == 0  # non-causal verdicts are expected for this config
    assert "FAIL" in cap.out and "witness: perturbing step" in cap.out
    assert "end-to-end: FAIL" in cap.out


def test_verify_causality_zero_trials_is_vacuous(capsys, caplog):
    with caplog.at_level(logging.WARNING, logger="causal_avse"):
        code, data = run_json(capsys, "verify-causality", "--config", "desk", "--trials", "0",
                              "--parity-steps", "2")
    assert code == 0 and data["end_to_end"] == "PASS"
    assert any("vacuous" in r.message for r in caplog.records)


def test_verify_causality_unexpected_verdict_exits_1(tmp_path, capsys, monkeypatch):
    import causal_avse.verify as verify

    real = verify.verify_model

    def flipped(model, trials, seed, parity_steps):
        checks, parity = real(model, trials, seed, parity_steps)
        checks[0] = verify.CheckResult(checks[0].name, True, checks[0].trials, 1, 1.0, None, "forced")
        return checks, parity

    monkeypatch.setattr(verify, "verify_model", flipped)
    code, cap = run(capsys, "verify-causality", "--config", "desk", "--trials", "2", "--parity-steps", "2")
    assert code == 1 and "unexpected" in cap.out


def _wav(path, rng, scale=1.0, n=16000):
    x = rng.standard_normal(n)
    media.write_wav(path, scale * x / np.sqrt(np.mean(x * x)) * 0.1)


def test_mix_equal_power_logs_unit_scale(tmp_path, capsys, caplog, rng):
    _wav(tmp_path / "c.wav", rng)
    media.write_wav(tmp_path / "n.wav", media.read_wav(tmp_path / "c.wav")[::-1])
    with caplog.at_level(logging.INFO, logger="causal_avse"):
        code, data = run_json(capsys, "mix", "--clean", tmp_path / "c.wav", "--noise", tmp_path / "n.wav",
                              "--snr", "0", "--out", tmp_path / "m.wav", "-v")
    assert code == 0 and data["noise_scales"] == [pytest.approx(1.0)]
    assert any("noise 0 scale 1" in r.getMessage() for r in caplog.records)


def test_mix_errors_exit_2(tmp_path, capsys, rng):
    _wav(tmp_path / "c.wav", rng)
    media.write_wav(tmp_path / "z.wav", np.zeros(16000))
    media.write_wav(tmp_path / "s.wav", np.ones(10) * 0.1)
    for other in ("z.wav", "s.wav"):
        code, _ = run(capsys, "mix", "--clean", tmp_path / "c.wav", "--noise", tmp_path / other,
                      "--out", tmp_path / "m.wav")
        assert code == 2


def test_params(capsys):
    code, data = run_json(capsys, "params", "--config", "causal")
    assert code == 0 and abs(data["total"] / 114e6 - 1) <= 0.10
    assert data["total"] == sum(data["per_module"].values())
    code, cap = run(capsys, "params", "--config", "causal")
    assert "total" in cap.out and " M" in cap.out


def test_init_weights_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "init-weights", "--config", "desk", "--seed", "5", "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    run(capsys, "init-weights", "--config", "desk", "--seed", "6", "--out", tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_seed_environment_variable(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    code, data = run_json(capsys, "init-weights", "--config", "desk", "--out", tmp_path / "e")
    assert code == 0 and data["seed"] == 5
    run(capsys, "init-weights", "--config", "desk", "--seed", "5", "--out", tmp_path / "s")
    assert (tmp_path / "e").read_bytes() == (tmp_path / "s").read_bytes()
    monkeypatch.setenv(SEED_ENV, "five")
    assert run(capsys, "init-weights", "--config", "desk", "--out", tmp_path / "x")[0] == 3


def test_config_command_prints_loadable_json(tmp_path, capsys):
    code, cap = run(capsys, "config", "desk")
    assert code == 0
    (tmp_path / "d.json").write_text(cap.out)
    code, data = run_json(capsys, "analyze-latency", "--config", tmp_path / "d.json")
    assert data["total_ms"] == 40


def test_json_errors_are_structured(tmp_path, capsys):
    code, data = run_json(capsys, "analyze-latency", "--config", tmp_path / "none.json")
    assert code == 2 and data["exit_code"] == 2 and "none.json" in data["error"]
