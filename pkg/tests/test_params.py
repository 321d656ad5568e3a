"""ParamStore registration rules and ADLB checkpoint round-trips."""

import numpy as np
import pytest

from adaptlab.params import CheckpointError, DuplicateParamError, ParamStore
from adaptlab.tensor import Tensor


def make_store(gen) -> ParamStore:
    store = ParamStore()
    store.register("w1", Tensor(gen.standard_normal((3, 4)).astype(np.float32)),
                   trainable=True, group="backbone")
    store.register("b1", Tensor(np.zeros(4, dtype=np.float32)), trainable=False)
    store.register("scalarish", Tensor(gen.standard_normal(1)), trainable=True, group="adapter")
    store.register("wide", Tensor(gen.standard_normal((2, 3, 5)).astype(np.float64)),
                   trainable=True, group="head")
    return store


def test_duplicate_rejected(gen):
    store = make_store(gen)
    with pytest.raises(DuplicateParamError):
        store.register("w1", Tensor(np.ones(2)), trainable=True)


def test_trainable_flag_drives_requires_grad(gen):
    store = make_store(gen)
    assert store["w1"].requires_grad
    assert not store["b1"].requires_grad
    store.set_trainable("b1", True)
    assert store["b1"].requires_grad


def test_num_params_and_groups(gen):
    store = make_store(gen)
    assert store.num_params(trainable_only=True) == 12 + 1 + 30
    assert store.num_params(trainable_only=True, exclude_groups=("head",)) == 13
    assert store.num_params(trainable_only=False) == 12 + 4 + 1 + 30


def test_roundtrip_bit_exact(tmp_path, gen):
    store = make_store(gen)
    path = tmp_path / "model.adlb"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded[name].data, store[name].data)
        assert loaded[name].dtype == store[name].dtype
        assert loaded.is_trainable(name) == store.is_trainable(name)


def test_write_read_write_identical_bytes(tmp_path, gen):
    store = make_store(gen)
    first = tmp_path / "a.adlb"
    second = tmp_path / "b.adlb"
    store.save(first)
    ParamStore.load(first).save(second)
    assert first.read_bytes() == second.read_bytes()


def test_bad_magic(tmp_path, gen):
    path = tmp_path / "bad.adlb"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        ParamStore.load(path)


def test_bad_version(tmp_path, gen):
    store = make_store(gen)
    path = tmp_path / "v.adlb"
    store.save(path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        ParamStore.load(path)


def test_truncation(tmp_path, gen):
    store = make_store(gen)
    path = tmp_path / "t.adlb"
    store.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(CheckpointError, match="truncated"):
        ParamStore.load(path)


def test_trailing_garbage(tmp_path, gen):
    store = make_store(gen)
    path = tmp_path / "g.adlb"
    store.save(path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        ParamStore.load(path)


def test_snapshot_restore(gen):
    store = make_store(gen)
    snap = store.snapshot()
    store["w1"].data += 5.0
    store.restore(snap)
    np.testing.assert_array_equal(store["w1"].data, snap["w1"])


def test_load_values_from_shape_mismatch(gen):
    store = make_store(gen)
    other = ParamStore()
    other.register("w1", Tensor(np.zeros((9, 9), dtype=np.float32)), trainable=True)
    with pytest.raises(CheckpointError, match="shape"):
        store.load_values_from(other)
