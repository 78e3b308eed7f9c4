import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_avse.weights import (
    BIAS,
    RUNNING_MEAN,
    RUNNING_VAR,
    SCALE,
    WEIGHT,
    WEIGHT_T,
    ParamSpec,
    WeightError,
    WeightFileError,
    WeightStore,
    dumps,
    init_store,
    load,
    loads,
    save,
)

SPECS = [
    ParamSpec("conv.weight", (4, 3, 5)),
    ParamSpec("conv.bias", (4,), BIAS),
    ParamSpec("up.weight", (4, 2, 8), WEIGHT_T),
    ParamSpec("bn.scale", (4,), SCALE),
    ParamSpec("bn.mean", (4,), RUNNING_MEAN),
    ParamSpec("bn.var", (4,), RUNNING_VAR),
]


def test_file_layout_matches_hand_built_bytes():
    store = WeightStore({"a": np.array([1.5, -2.0], np.float32), "bé": np.zeros((1, 2, 1), np.float32)})
    expected = b"RTWL" + struct.pack("<II", 1, 2)
    expected += struct.pack("<H", 1) + b"a" + struct.pack("<B", 1) + struct.pack("<I", 2)
    expected += struct.pack("<2f", 1.5, -2.0)
    name = "bé".encode()
    expected += struct.pack("<H", len(name)) + name + struct.pack("<B", 3) + struct.pack("<3I", 1, 2, 1)
    expected += struct.pack("<2f", 0.0, 0.0)
    assert dumps(store) == expected


def test_save_load_save_is_byte_identical(tmp_path):
    store = init_store(SPECS, 7)
    save(store, tmp_path / "a.rtw")
    again = load(tmp_path / "a.rtw")
    assert again.equal(store)
    save(again, tmp_path / "b.rtw")
    assert (tmp_path / "a.rtw").read_bytes() == (tmp_path / "b.rtw").read_bytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=12),
                          st.lists(st.integers(0, 3), min_size=0, max_size=3)),
                min_size=0, max_size=5, unique_by=lambda t: t[0]),
       st.integers(0, 2**31))
def test_round_trip_property(entries, seed):
    rng = np.random.default_rng(seed)
    store = WeightStore({name: rng.standard_normal(shape).astype(np.float32) for name, shape in entries})
    blob = dumps(store)
    assert loads(blob).equal(store)
    assert dumps(loads(blob)) == blob


def test_seeded_init_is_deterministic_and_seed_sensitive():
    assert dumps(init_store(SPECS, 3)) == dumps(init_store(SPECS, 3))
    a, b = init_store(SPECS, 3), init_store(SPECS, 4)
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def test_init_follows_parameter_kinds():
    store = init_store(SPECS, 0)
    assert np.all(np.abs(store["conv.weight"]) <= np.sqrt(1 / 15))
    assert np.abs(store["conv.weight"]).max() > 0.5 * np.sqrt(1 / 15)
    assert np.all(np.abs(store["up.weight"]) <= np.sqrt(1 / 16))
    assert np.all(store["conv.bias"] == 0) and np.all(store["bn.mean"] == 0)
    assert np.all(store["bn.scale"] == 1) and np.all(store["bn.var"] == 1)
    assert all(store[k].dtype == np.float32 for k in store)


def test_store_is_read_only():
    store = init_store(SPECS, 0)
    with pytest.raises(ValueError):
        store["conv.bias"][0] = 1


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:10], "truncated"),
])
def test_corrupt_files_raise(mutate, match):
    with pytest.raises(WeightFileError, match=match):
        loads(mutate(dumps(init_store(SPECS, 0))))


def test_validate_names_missing_and_misshaped_tensors():
    store = init_store(SPECS, 0)
    store.validate(SPECS)
    with pytest.raises(WeightError, match="conv.bias") as info:
        store.without("conv.bias").validate(SPECS)
    assert info.value.name == "conv.bias"
    with pytest.raises(WeightError, match="shape") as info:
        store.replace(**{"bn.var": np.ones(5)}).validate(SPECS)
    assert info.value.name == "bn.var"
    with pytest.raises(WeightError):
        store.replace(nope=np.ones(1))
    with pytest.raises(WeightError, match="missing"):
        store["absent"]


def test_float64_cache_matches():
    store = init_store(SPECS, 0)
    w64 = store.f64("conv.weight")
    assert w64.dtype == np.float64 and np.array_equal(w64, store["conv.weight"])
    assert store.f64("conv.weight") is w64


def test_kind_is_checked():
    with pytest.raises(ValueError):
        init_store([ParamSpec("x", (1,), "mystery")], 0)
    assert ParamSpec("w", (8, 4, 3), WEIGHT).fan_in == 12
