import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_avse.causal import (
    AttentionSpec,
    Join,
    LookaheadSpec,
    PipelineGraph,
    PoolSpec,
    Stage,
    StftSpec,
    algorithm_latency,
    causal_pad_conv,
    causal_pad_conv_transpose,
    causal_transpose_spec,
    causalize,
    format_ms,
    latency_ledger,
    latest_input_offset,
    lookahead_of,
    new_stream_cache,
    receptive_past,
    stft_pad,
    stream_conv_1d,
    stream_window_covers,
    symmetric,
)
from causal_avse.frontends import AudioResNet, AudioResNetConfig
from causal_avse.tensor import ConvSpec, conv_nd, conv_transpose_1d
from oracles import index_receptive_field


@pytest.mark.parametrize("k,d,pad", [(3, 1, 1), (1, 7, 0), (7, 3, 9)])
def test_causal_pad_conv(k, d, pad):
    assert causal_pad_conv(k, d) == pad


@pytest.mark.parametrize("s,pad", [(8, 4), (5, 3), (2, 1)])
def test_causal_pad_conv_transpose(s, pad):
    assert causal_pad_conv_transpose(s) == pad


def test_stft_pad():
    assert stft_pad(640, 160) == 240
    assert stft_pad(160, 160) == 0
    assert stft_pad(400, 160) == 120
    with pytest.raises(ValueError, match="odd"):
        stft_pad(401, 160)


def test_causalize_moves_padding_left():
    spec = causalize(ConvSpec.make(1, 1, 5, padding=2))
    assert (spec.pad_left, spec.pad_right) == ((4,), (0,))
    pointwise = ConvSpec.make(2, 2, 1)
    assert causalize(pointwise) == pointwise


def test_causalize_only_touches_the_temporal_axis():
    spec = causalize(ConvSpec.make(1, 8, (5, 7, 7), (1, 2, 2), 1, (2, 3, 3)), axis=0)
    assert spec.pad_left == (4, 3, 3) and spec.pad_right == (0, 3, 3)


def test_causal_impulse_response_starts_at_the_impulse(rng):
    spec = causalize(ConvSpec.make(1, 1, 3, padding=1))
    x = np.zeros((1, 12), np.float32)
    x[0, 5] = 1
    out = conv_nd(x, spec, rng.uniform(0.5, 1, (1, 1, 3)))[0]
    assert set(np.flatnonzero(out)) <= {5, 6, 7}
    assert np.all(out[:5] == 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16))
def test_causalize_has_zero_lookahead_for_all_kernels(k, d):
    assert causal_pad_conv(k, 1) == k // 2
    spec = causalize(symmetric(ConvSpec.make(1, 1, k, 1, d)))
    assert lookahead_of(spec).lookahead == 0
    assert spec.output_extent(0, 50) == 50


def test_symmetric_conv_lookahead_is_half_kernel():
    spec = symmetric(ConvSpec.make(1, 1, 7, 1, 3))
    assert lookahead_of(spec).lookahead == causal_pad_conv(7, 3) == 9


def test_video_front_end_lookahead():
    front = ConvSpec.make(1, 64, (5, 7, 7), (1, 2, 2), 1, (2, 3, 3))
    la = lookahead_of(front, 25)
    assert la.lookahead == 2 and la.lookahead_ms == 80
    assert lookahead_of(causalize(front), 25).lookahead_ms == 0


def test_stft_lookahead():
    assert lookahead_of(StftSpec(640, 160, "centered"), 16000).lookahead == 240
    assert lookahead_of(StftSpec(640, 160, "centered"), 16000).lookahead_ms == 15
    assert lookahead_of(StftSpec(640, 160, "causal"), 16000).lookahead == 0


def test_attention_lookahead():
    assert lookahead_of(AttentionSpec(4, 64), 100).causal
    assert lookahead_of(AttentionSpec(4, None, bidirectional=True), 100).lookahead_ms == math.inf


def test_lookahead_ms_is_exact():
    la = LookaheadSpec(1, 3)
    assert la.lookahead_ms == Fraction(1000, 3)
    with pytest.raises(ValueError):
        LookaheadSpec(-1, 16000)


def test_transposed_causal_trim_sees_only_past_frames(rng):
    """Output t must not change when frames after t // s are perturbed."""
    for k, s in [(16, 8), (10, 5), (4, 2), (7, 3)]:
        spec = causal_transpose_spec(2, 2, k, s)
        assert lookahead_of(spec, 100, transposed=True).causal
        w = rng.uniform(-1, 1, (2, 2, k))
        x = rng.uniform(-1, 1, (2, 6)).astype(np.float32)
        base = conv_transpose_1d(x, spec, w)
        assert base.shape[1] == 6 * s
        for cut in range(5):
            y = x.copy()
            y[:, cut + 1:] += 1
            out = conv_transpose_1d(y, spec, w)
            assert np.array_equal(out[:, : (cut + 1) * s], base[:, : (cut + 1) * s])
            assert not np.array_equal(out, base)


# ------------------------------------------------------------------ ledger


def _causal_graph():
    return PipelineGraph([
        Join("fusion", {
            "audio": [Stage("resnet", LookaheadSpec(0, 16000), Fraction(1, 160))],
            "video": [Stage("front", LookaheadSpec(0, 25)), Stage("repeat", LookaheadSpec(0, 25), 4)],
        }),
        Stage("emformer", lookahead_of(AttentionSpec(4, 64), 100)),
    ])


def test_empty_graph_is_one_frame():
    assert algorithm_latency(PipelineGraph([])) == 40


def test_causal_graph_is_40ms():
    assert algorithm_latency(_causal_graph()) == 40


def test_centered_stft_graph_is_55ms():
    graph = PipelineGraph([Stage("stft", lookahead_of(StftSpec(640, 160), 16000), Fraction(1, 160)),
                           Stage("emformer", LookaheadSpec(0, 100))])
    ledger = latency_ledger(graph)
    assert ledger.total_ms == 55
    assert ledger.render() == "55 (40 + 15)"
    assert format_ms(40, 0) == "40"


def test_join_takes_branch_maximum_and_reports_branch_latency():
    graph = PipelineGraph([Join("fusion", {
        "audio": [Stage("stft", LookaheadSpec(240, 16000), Fraction(1, 160))],
        "video": [Stage("front", LookaheadSpec(2, 25), 4)],
    })])
    ledger = latency_ledger(graph)
    assert ledger.total_ms == 120
    assert ledger.branch_latency("video") == 120
    assert ledger.branch_latency("audio") == 55


def test_zero_lookahead_stages_do_not_change_latency():
    graph = _causal_graph()
    graph.nodes.append(Stage("identity", LookaheadSpec(0, 100)))
    assert algorithm_latency(graph) == 40


def test_serial_lookaheads_add():
    graph = PipelineGraph([Stage("a", LookaheadSpec(2, 25), 4), Stage("b", LookaheadSpec(3, 100))])
    assert algorithm_latency(graph) == 40 + 80 + 30


def test_inconsistent_rates_are_rejected():
    graph = PipelineGraph([Stage("a", LookaheadSpec(0, 16000)), Stage("b", LookaheadSpec(0, 100))])
    with pytest.raises(ValueError, match="receives"):
        algorithm_latency(graph)
    bad_join = PipelineGraph([Join("j", {"x": [Stage("a", LookaheadSpec(0, 25))],
                                         "y": [Stage("b", LookaheadSpec(0, 100))]})])
    with pytest.raises(ValueError, match="different rates"):
        algorithm_latency(bad_join)


def test_unbounded_stage_gives_infinite_latency():
    graph = PipelineGraph([Stage("t", lookahead_of(AttentionSpec(4, None, True), 100))])
    assert algorithm_latency(graph) == math.inf


def test_graph_dict_round_trip():
    graph = _causal_graph()
    again = PipelineGraph.from_dict(graph.to_dict())
    assert again.to_dict() == graph.to_dict()
    assert algorithm_latency(again) == 40


# --------------------------------------------------------- receptive field


def _geom(stack):
    out = []
    for layer in stack:
        if isinstance(layer, PoolSpec):
            out.append((layer.kernel, layer.stride, 1, layer.pad_left))
        else:
            out.append((layer.kernel_size[0], layer.stride[0], layer.dilation[0], layer.pad_left[0]))
    return out


def _oracle_past(stack, n=4000):
    geom = _geom(stack)
    lengths = [n]
    for k, s, d, pl in geom:
        lengths.append((lengths[-1] + pl - d * (k - 1) - 1) // s + 1)
    field = index_receptive_field(geom, n, lengths[-1] - 1)
    return max(field) - min(field)


def test_receptive_past_single_conv():
    assert receptive_past([causalize(ConvSpec.make(1, 1, 3))]) == 2


def test_receptive_past_stem_then_conv_by_perturbation(rng):
    stem = causalize(ConvSpec.make(1, 1, 80, 4))
    conv = causalize(ConvSpec.make(1, 1, 3))
    assert receptive_past([stem, conv]) == 87 == _oracle_past([stem, conv])
    # perturbation check with strictly positive weights: 88 samples reach the last output
    x = rng.uniform(0.1, 1, (1, 400)).astype(np.float32)

    def run(v):
        h = conv_nd(v, stem, np.ones((1, 1, 80)))
        return conv_nd(h, conv, np.ones((1, 1, 3)))[0, -1]

    base = run(x)
    reach = [i for i in range(400) if run(np.where(np.arange(400) == i, x + 1, x).astype(np.float32)) != base]
    assert len(reach) == 88


@pytest.mark.parametrize("rate,expected", [(100, 631), (25, 1111)])
def test_audio_resnet_receptive_past_fits_two_frames(rate, expected):
    enc = AudioResNet(AudioResNetConfig(rate=rate), None)
    stack = enc.temporal_stack()
    assert receptive_past(stack) == expected == _oracle_past(stack)
    assert expected <= 1280
    assert stream_window_covers(stack, 1280, 640)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=5))
def test_receptive_past_matches_index_oracle(layers):
    stack = [causalize(ConvSpec.make(1, 1, k, s, d)) for k, s, d in layers]
    assert receptive_past(stack) == _oracle_past(stack)


def test_latest_input_offset_matches_index_oracle():
    stack = AudioResNet(AudioResNetConfig(rate=100), None).temporal_stack()
    jump, offset = latest_input_offset(stack)
    geom = _geom(stack)
    field = index_receptive_field(geom, 3200, 10)
    assert (jump, offset) == (160, 128)
    assert max(field) == jump * 10 + offset


def test_receptive_past_rejects_non_causal():
    with pytest.raises(ValueError, match="not causal"):
        receptive_past([ConvSpec.make(1, 1, 3, padding=1)])


def test_window_too_small_is_detected():
    big = AudioResNet(AudioResNetConfig(rate=25, kernel=9), None)
    assert receptive_past(big.temporal_stack()) > 1280
    assert not stream_window_covers(big.temporal_stack(), 1280, 640)


# ---------------------------------------------------------------- streaming


def _stream(spec, w, b, x, sizes):
    cache = new_stream_cache(spec, w, b)
    outs, pos = [], 0
    for n in sizes:
        cache, out = stream_conv_1d(cache, x[:, pos:pos + n])
        outs.append(out)
        pos += n
    return np.concatenate(outs, axis=1), cache


def test_unit_chunks_equal_offline(rng):
    spec = causalize(ConvSpec.make(2, 3, 3))
    w, b = rng.uniform(-1, 1, (3, 2, 3)), rng.uniform(-1, 1, 3)
    x = rng.uniform(-1, 1, (2, 32)).astype(np.float32)
    out, cache = _stream(spec, w, b, x, [1] * 32)
    assert out.tobytes() == conv_nd(x, spec, w, b).tobytes()
    assert cache.history.shape[1] <= receptive_past([spec])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.integers(1, 4),
       st.lists(st.integers(0, 9), min_size=1, max_size=12), st.integers(0, 2**31 - 1))
def test_any_chunking_equals_offline(k, d, s, sizes, seed):
    rng = np.random.default_rng(seed)
    spec = causalize(ConvSpec.make(2, 2, k, s, d))
    w, b = rng.uniform(-1, 1, (2, 2, k)), rng.uniform(-1, 1, 2)
    total = sum(sizes)
    if total == 0:
        return
    x = rng.uniform(-1, 1, (2, total)).astype(np.float32)
    out, cache = _stream(spec, w, b, x, sizes)
    ref = conv_nd(x, spec, w, b)
    assert out.tobytes() == ref.tobytes()
    assert cache.history.shape[1] <= (k - 1) * d + s


def test_streaming_future_chunk_leaves_past_outputs(rng):
    spec = causalize(ConvSpec.make(1, 1, 5, 1, 2))
    w = rng.uniform(-1, 1, (1, 1, 5))
    x = rng.uniform(-1, 1, (1, 20)).astype(np.float32)
    a, _ = _stream(spec, w, None, x, [5, 5, 5, 5])
    y = x.copy()
    y[:, 10:] = 9
    b, _ = _stream(spec, w, None, y, [5, 5, 5, 5])
    assert a[:, :10].tobytes() == b[:, :10].tobytes()


def test_stream_cache_requires_causal_layer():
    with pytest.raises(ValueError, match="causal"):
        new_stream_cache(ConvSpec.make(1, 1, 3, padding=1), np.zeros((1, 1, 3)))
