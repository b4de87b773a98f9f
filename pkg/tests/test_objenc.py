"""Object encoder tests: normalization, invariances, gradient oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualground import autodiff as ad
from dualground import objenc as oe
from dualground.autodiff import ContractError, DegenerateInputError, Tensor
from dualground.params import ParamStore


def random_points(rng, n=16):
    xyz = rng.normal(size=(n, 3))
    rgb = rng.uniform(0, 1, size=(n, 3))
    return np.concatenate([xyz, rgb], axis=1)


class TestNormalizePoints:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        pts = random_points(rng)
        pts[:, :3] -= pts[:, :3].mean(axis=0)
        pts[:, :3] /= np.linalg.norm(pts[:, :3], axis=1).max()
        out = oe.normalize_points(pts)
        np.testing.assert_allclose(out[:, :3], pts[:, :3], atol=1e-12)

    def test_centroid_and_radius_forced(self):
        rng = np.random.default_rng(1)
        pts = random_points(rng)
        pts[:, :3] = pts[:, :3] * 3.7 + 2.0
        out = oe.normalize_points(pts)
        assert np.abs(out[:, :3].mean(axis=0)).max() < 1e-12
        assert abs(np.linalg.norm(out[:, :3], axis=1).max() - 1.0) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation_invariance(self, dx, dy, dz):
        rng = np.random.default_rng(7)
        pts = random_points(rng)
        moved = pts.copy()
        moved[:, :3] += np.array([dx, dy, dz])
        a = oe.normalize_points(pts)
        b = oe.normalize_points(moved)
        np.testing.assert_allclose(a[:, :3], b[:, :3], atol=1e-9)

    def test_degenerate_single_point(self):
        pts = np.tile([1.0, 2.0, 3.0, 0.5, 0.5, 0.5], (10, 1))
        with pytest.raises(DegenerateInputError):
            oe.normalize_points(pts)


def _student(d=8, hidden=8, seed=0):
    enc = oe.AttributePointEncoder(d, hidden)
    store = ParamStore(seed)
    enc.register(store)
    return enc, store


class TestStudentEncoder:
    def test_permutation_invariance_exact(self):
        enc, store = _student()
        rng = np.random.default_rng(2)
        pts = oe.normalize_points(random_points(rng, 20))
        perm = rng.permutation(20)
        a = enc.encode_one(store, pts)
        b = enc.encode_one(store, pts[perm])
        assert a.data.tobytes() == b.data.tobytes()

    def test_duplication_invariance(self):
        enc, store = _student()
        rng = np.random.default_rng(3)
        pts = oe.normalize_points(random_points(rng, 12))
        doubled = np.concatenate([pts, pts], axis=0)
        a = enc.encode_one(store, pts)
        b = enc.encode_one(store, doubled)
        assert a.data.tobytes() == b.data.tobytes()

    def test_rejects_unnormalized(self):
        enc, store = _student()
        rng = np.random.default_rng(4)
        pts = random_points(rng)
        pts[:, :3] += 5.0
        with pytest.raises(ContractError):
            enc.encode_one(store, pts)

    def test_batched_encode_matches_per_object(self):
        enc, store = _student()
        rng = np.random.default_rng(9)
        sets = [oe.normalize_points(random_points(rng, 16)) for _ in range(5)]
        batched = enc.encode(store, sets)
        single = np.stack([enc.encode_one(store, p).data for p in sets])
        # BLAS blocking may differ between the batched and per-object paths
        np.testing.assert_allclose(batched.data, single, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        enc, store = _student(seed=5)
        rng = np.random.default_rng(5)
        pts = oe.normalize_points(random_points(rng, 16))
        probe = Tensor(rng.normal(size=(8,)))

        def f(ps):
            return ad.sum_all(ad.mul(enc.encode_one(ps, pts), probe))

        err, _ = ad.finite_diff_check(f, store)
        assert err < 1e-5


def _teacher(d=8, n_cat=5, n_col=4, seed=0):
    enc = oe.AttributeTeacherEncoder(d, n_cat, n_col)
    store = ParamStore(seed)
    enc.register(store)
    return enc, store


class TestTeacherEncoder:
    def test_deterministic(self):
        enc, store = _teacher()
        a = enc.encode(store, [1, 2], [0, 3])
        b = enc.encode(store, [1, 2], [0, 3])
        assert a.data.tobytes() == b.data.tobytes()

    def test_distinct_colors_distinct_features(self):
        enc, store = _teacher()
        out = enc.encode(store, [2, 2], [0, 1]).data
        assert np.abs(out[0] - out[1]).max() > 1e-8

    def test_unknown_identifier(self):
        enc, store = _teacher()
        with pytest.raises(ContractError):
            enc.encode(store, [5], [0])

    def test_gradient_check(self):
        enc, store = _teacher(seed=6)
        probe = Tensor(np.random.default_rng(6).normal(size=(3, 8)))

        def f(ps):
            return ad.sum_all(ad.mul(enc.encode(ps, [0, 1, 4], [3, 3, 0]), probe))

        err, _ = ad.finite_diff_check(f, store)
        assert err < 1e-6


class TestSpatialEncoder:
    def test_zero_input_zero_bias_gives_zero(self):
        enc = oe.SpatialEncoder(8)
        store = ParamStore(0)
        enc.register(store)
        out = enc.encode(store, np.zeros((3, 6)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 8)))

    def test_linearity_with_zero_bias(self):
        enc = oe.SpatialEncoder(8)
        store = ParamStore(1)
        enc.register(store)
        rng = np.random.default_rng(1)
        b1, b2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        lhs = enc.encode(store, b1 + b2).data + enc.encode(store, np.zeros((2, 6))).data
        rhs = enc.encode(store, b1).data + enc.encode(store, b2).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gradient_check(self):
        enc = oe.SpatialEncoder(8)
        store = ParamStore(2)
        enc.register(store)
        rng = np.random.default_rng(2)
        feats = rng.uniform(0, 1, size=(4, 6))
        probe = Tensor(rng.normal(size=(4, 8)))

        def f(ps):
            return ad.sum_all(ad.mul(enc.encode(ps, feats), probe))

        err, _ = ad.finite_diff_check(f, store)
        assert err < 1e-6


class TestFuseGlobal:
    def test_add_identity(self):
        rng = np.random.default_rng(3)
        fa = Tensor(rng.normal(size=(4, 8)))
        zero = Tensor(np.zeros((4, 8)))
        np.testing.assert_array_equal(oe.fuse_global(fa, zero, "add").data, fa.data)

    def test_add_commutative_and_exact(self):
        rng = np.random.default_rng(4)
        fa = Tensor(rng.normal(size=(4, 8)))
        fs = Tensor(rng.normal(size=(4, 8)))
        ab = oe.fuse_global(fa, fs, "add").data
        ba = oe.fuse_global(fs, fa, "add").data
        np.testing.assert_array_equal(ab, ba)
        np.testing.assert_array_equal(ab, fa.data + fs.data)

    def test_concat_project_shapes(self):
        rng = np.random.default_rng(5)
        for k, d in [(2, 4), (5, 8), (3, 16)]:
            store = ParamStore(k)
            w = store.xavier("w", 2 * d, d)
            b = store.zeros("b", (d,))
            fa = Tensor(rng.normal(size=(k, d)))
            fs = Tensor(rng.normal(size=(k, d)))
            out = oe.fuse_global(fa, fs, "concat_project", (w, b))
            assert out.shape == (k, d)

    def test_unknown_mode(self):
        fa = Tensor(np.zeros((2, 4)))
        with pytest.raises(ContractError):
            oe.fuse_global(fa, fa, "multiply")


class TestBranchSeparationOfEncoders:
    def test_translation_moves_spatial_not_attribute(self):
        """Translating one object changes its bbox row only; attribute
        features built from normalized points stay put."""
        from dualground import scenegen as sg
        from dualground.config import GenConfig

        cfg = GenConfig()
        scene = sg.generate_scene(cfg, seed=8, scene_id=0)
        feats = oe.bbox_features(scene)
        obj = scene.objects[2]
        obj.bbox = (obj.bbox[0] + 0.4, obj.bbox[1] - 0.3) + obj.bbox[2:]
        feats2 = oe.bbox_features(scene)
        delta = np.abs(feats - feats2).max(axis=1)
        assert delta[2] > 1e-6
        assert np.all(delta[np.arange(len(delta)) != 2] == 0.0)

        pts = sg.sample_points(obj, 32, seed=1)
        moved = pts.copy()
        moved[:, :3] += np.array([0.4, -0.3, 0.0])
        np.testing.assert_allclose(oe.normalize_points(pts)[:, :3],
                                   oe.normalize_points(moved)[:, :3], atol=1e-9)
