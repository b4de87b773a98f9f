"""ParamStore checkpoint format tests."""

import numpy as np
import pytest

from dualground.autodiff import ContractError
from dualground.params import ParamStore


def populated_store(seed=0):
    store = ParamStore(seed)
    store.xavier("a.w", 4, 6)
    store.zeros("a.b", (6,))
    store.normal("embed", (5, 4), std=2.0)
    store.ones("ln", (4,))
    return store


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        store = populated_store()
        # scribble odd values: negative zero, tiny, huge
        store["a.w"].data[0, 0] = -0.0
        store["a.w"].data[0, 1] = 5e-324
        store["a.w"].data[0, 2] = 1.7976931348623157e308
        path = tmp_path / "s.ckpt"
        store.save(path, meta={"note": "x"})
        loaded, meta = ParamStore.load(path)
        assert meta == {"note": "x"}
        assert loaded.init_seed == store.init_seed
        assert loaded.names() == store.names()
        for name, t in store.items():
            got = loaded[name]
            assert got.data.shape == t.data.shape
            assert got.data.tobytes() == t.data.tobytes()
            assert got.requires_grad

    def test_save_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        populated_store(3).save(a, meta={"k": 1})
        populated_store(3).save(b, meta={"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_version_header_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("dualground-checkpoint v999\nseed 0\nmeta {}\nend\n")
        with pytest.raises(ContractError):
            ParamStore.load(path)

    def test_truncated_rejected(self, tmp_path):
        store = populated_store()
        path = tmp_path / "t.ckpt"
        store.save(path)
        clipped = path.read_text().splitlines()[:-1]
        path.write_text("\n".join(clipped) + "\n")
        with pytest.raises(ContractError):
            ParamStore.load(path)

    def test_duplicate_name_rejected(self):
        store = ParamStore(0)
        store.zeros("x", (2,))
        with pytest.raises(ContractError):
            store.zeros("x", (2,))

    def test_copy_from_prefix(self):
        a = populated_store(1)
        b = populated_store(2)
        assert a["a.w"].data.tobytes() != b["a.w"].data.tobytes()
        copied = b.copy_from(a, prefix="a.")
        assert copied == 2
        assert b["a.w"].data.tobytes() == a["a.w"].data.tobytes()
        assert b["embed"].data.tobytes() != a["embed"].data.tobytes()

    def test_copy_from_shape_mismatch(self):
        a = ParamStore(0)
        a.zeros("x", (2, 3))
        b = ParamStore(1)
        b.zeros("x", (3, 2))
        with pytest.raises(ContractError):
            b.copy_from(a)
