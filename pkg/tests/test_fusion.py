import numpy as np
import pytest

from cmac import autodiff as ad
from cmac import fusion as fu
from cmac.errors import ContractError, DimensionError

from oracles import max_pool_loops, roi_pool_loops, rel_err


def random_box(rng, w, h, allow_tiny=False):
    if allow_tiny and rng.random() < 0.2:
        # sub-cell rois exercise the center-cell collapse rule
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        dw, dh = rng.uniform(0, 1.5), rng.uniform(0, 1.5)
        return fu.Box(max(0, cx - dw), max(0, cy - dh),
                      min(w, cx + dw), min(h, cy + dh))
    x = np.sort(rng.uniform(0, w, size=2))
    y = np.sort(rng.uniform(0, h, size=2))
    return fu.Box(x[0], y[0], x[1], y[1])


class TestBox:
    def test_basic_properties(self):
        b = fu.Box(1, 2, 4, 8)
        assert b.width == 3 and b.height == 6 and b.area == 18
        assert b.center() == (2.5, 5.0)

    def test_corner_order_enforced(self):
        with pytest.raises(ContractError):
            fu.Box(5, 0, 1, 2)

    def test_clip(self):
        assert fu.Box(-3, -1, 70, 80).clip(64, 64) == fu.Box(0, 0, 64, 64)


class TestRoiPool:
    def test_bit_matches_oracle_100_random_rois(self):
        rng = np.random.default_rng(99)
        for trial in range(100):
            fmap = rng.normal(size=(3, 8, 8))
            scale = rng.choice([1.0, 0.5, 0.25])
            w_img = 8.0 / scale
            roi = random_box(rng, w_img, w_img, allow_tiny=True)
            s = int(rng.integers(1, 5))
            got = fu.roi_pool(ad.const(fmap), roi, scale, s).data
            want, _ = roi_pool_loops(fmap, roi.as_tuple(), scale, s)
            assert np.array_equal(got, want), f"trial {trial}"

    def test_full_map_identity(self):
        rng = np.random.default_rng(4)
        fmap = rng.normal(size=(2, 4, 4))
        out = fu.roi_pool(ad.const(fmap), fu.Box(0, 0, 4, 4), 1.0, 4).data
        assert np.array_equal(out, fmap)

    def test_constant_map(self):
        fmap = np.full((2, 8, 8), 1.75)
        rng = np.random.default_rng(5)
        for _ in range(10):
            roi = random_box(rng, 8, 8, allow_tiny=True)
            out = fu.roi_pool(ad.const(fmap), roi, 1.0, 3).data
            assert np.all(out == 1.75)

    def test_ramp_window_maxima(self):
        fmap = np.arange(36, dtype=np.float64).reshape(1, 6, 6)
        out = fu.roi_pool(ad.const(fmap), fu.Box(0, 0, 6, 6), 1.0, 3).data
        want, _ = max_pool_loops(fmap, 3, 3)
        assert np.array_equal(out, want)
        assert out[0, 0, 0] == 7.0  # max of rows 0-1 x cols 0-1

    def test_nested_roi_monotonicity_on_aligned_grids(self):
        # inner window (i,j) sits inside outer quadrant (i,j), so the pooled
        # maxima must dominate elementwise
        rng = np.random.default_rng(6)
        for seed in range(20):
            fmap = np.random.default_rng(seed).normal(size=(3, 4, 4))
            outer = fu.roi_pool(ad.const(fmap), fu.Box(0, 0, 4, 4), 1.0, 2).data
            inner = fu.roi_pool(ad.const(fmap), fu.Box(1, 1, 3, 3), 1.0, 2).data
            assert np.all(inner <= outer)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        fmap = rng.normal(size=(4, 8, 8))
        rois = [random_box(rng, 32, 32, allow_tiny=True) for _ in range(12)]
        batch = fu.roi_pool_batch(ad.const(fmap), rois, 0.25, 4).data
        for i, roi in enumerate(rois):
            single = fu.roi_pool(ad.const(fmap), roi, 0.25, 4).data
            assert np.array_equal(batch[i], single)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        base = rng.permutation(64).astype(np.float64).reshape(1, 8, 8) / 64.0
        fmap = np.concatenate([base, base[:, ::-1] + 0.007], axis=0)
        rois = [fu.Box(1, 1, 7, 6), fu.Box(0, 0, 8, 8), fu.Box(3.2, 2.9, 3.4, 3.1)]
        r = rng.normal(size=(3, 2, 2, 2))

        def build(tape, p):
            return ad.sum_all(ad.mul(fu.roi_pool_batch(p["f"], rois, 1.0, 2),
                                     ad.const(r)))

        tape = ad.Tape()
        leaf = tape.leaf(fmap)
        got = tape.backward(build(tape, {"f": leaf})).of(leaf)

        def f(ps):
            t2 = ad.Tape()
            return float(build(t2, {"f": t2.leaf(ps["f"])}).data)

        want = ad.finite_diff_grad(f, {"f": fmap}, eps=1e-3)["f"]
        assert rel_err(got, want) < 1e-4

    def test_gradient_scatters_only_to_argmax(self):
        fmap = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        tape = ad.Tape()
        leaf = tape.leaf(fmap)
        out = fu.roi_pool(leaf, fu.Box(0, 0, 4, 4), 1.0, 1)
        g = tape.backward(ad.sum_all(out)).of(leaf)
        assert g[0, 3, 3] == 1.0 and g.sum() == 1.0


class TestPoolGlobal:
    def test_identity_and_quadrants(self):
        rng = np.random.default_rng(9)
        fmap = rng.normal(size=(2, 4, 4))
        assert np.array_equal(fu.pool_global(ad.const(fmap), 4).data, fmap)
        got = fu.pool_global(ad.const(fmap), 2).data
        want, _ = max_pool_loops(fmap, 2, 2)
        assert np.array_equal(got, want)

    def test_k_too_large(self):
        with pytest.raises(DimensionError):
            fu.pool_global(ad.const(np.zeros((1, 4, 4))), 5)


class TestFuse:
    def test_rgb_first_and_roundtrip(self):
        rng = np.random.default_rng(10)
        a, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(5, 2, 2))
        out = fu.fuse(ad.const(a), ad.const(b))
        assert out.data.shape == (8, 2, 2)
        assert np.array_equal(out.data[:3], a)
        assert np.array_equal(out.data[3:8], b)

    def test_single_stream_identity(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 2, 2))
        empty = ad.const(np.zeros((0, 2, 2)))
        assert np.array_equal(fu.fuse(ad.const(a), empty).data, a)
        assert np.array_equal(fu.fuse(ad.const(a), None).data, a)
        assert np.array_equal(fu.fuse(None, ad.const(a)).data, a)

    def test_both_absent(self):
        with pytest.raises(ContractError):
            fu.fuse(None, None)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            fu.fuse(ad.const(np.zeros((1, 2, 2))), ad.const(np.zeros((1, 3, 3))))

    def test_batched(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(6, 3, 2, 2)), rng.normal(size=(6, 5, 2, 2))
        out = fu.fuse(ad.const(a), ad.const(b)).data
        assert out.shape == (6, 8, 2, 2)
        assert np.array_equal(out[:, 3:], b)


class TestConv1x1:
    def test_identity_selection(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 3, 3))
        w = np.zeros((4, 2))
        w[1, 0] = 1.0  # output 0 <- channel 1
        w[3, 1] = 1.0  # output 1 <- channel 3
        out = fu.conv1x1(ad.const(x), ad.const(w), ad.const(np.zeros(2))).data
        assert np.array_equal(out[0], x[1])
        assert np.array_equal(out[1], x[3])

    def test_equals_conv2d_op(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(5, 4, 4))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        got = fu.conv1x1(ad.const(x), ad.const(w), ad.const(b)).data
        want = ad.conv2d(ad.const(x), ad.const(w.T.reshape(3, 5, 1, 1)),
                         ad.const(b)).data
        assert np.allclose(got, want, atol=1e-12)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(7, 5, 4, 4))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        batch = fu.conv1x1(ad.const(x), ad.const(w), ad.const(b)).data
        for i in range(7):
            one = fu.conv1x1(ad.const(x[i]), ad.const(w), ad.const(b)).data
            assert np.allclose(batch[i], one, atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 4, 3, 3))
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(2, 3, 3, 3))
        params = {"x": x, "w": w, "b": b}

        def build(tape, p):
            return ad.sum_all(ad.mul(fu.conv1x1(p["x"], p["w"], p["b"]), ad.const(r)))

        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        grads = tape.backward(build(tape, leaves))

        def f(ps):
            t2 = ad.Tape()
            return float(build(t2, {k: t2.leaf(v) for k, v in ps.items()}).data)

        want = ad.finite_diff_grad(f, params, eps=1e-3)
        for k in params:
            assert rel_err(grads.of(leaves[k]), want[k]) < 1e-4, k


class TestSlices:
    def test_k2_row_major_order(self):
        cube = np.zeros((2, 2, 2))
        cube[:, 0, 0] = (1, 10)
        cube[:, 0, 1] = (2, 20)
        cube[:, 1, 0] = (3, 30)
        cube[:, 1, 1] = (4, 40)
        s = fu.slice_features(ad.const(cube)).data
        assert s.shape == (4, 2)
        assert np.array_equal(s, [[1, 10], [2, 20], [3, 30], [4, 40]])

    def test_k1_single_slice(self):
        cube = np.array([[[3.0]], [[7.0]]])
        s = fu.slice_features(ad.const(cube)).data
        assert np.array_equal(s, [[3.0, 7.0]])

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(17)
        cube = rng.normal(size=(5, 3, 3))
        s = fu.slice_features(ad.const(cube))
        back = fu.unslice_features(s, 3).data
        assert np.array_equal(back, cube)


class TestEmbedContext:
    def test_shapes_and_z(self):
        rng = np.random.default_rng(18)
        gf = rng.normal(size=(6, 4, 4))
        lf = rng.normal(size=(6, 2, 2))
        wg, bg = rng.normal(size=(6, 3)), rng.normal(size=3)
        wl, bl = rng.normal(size=(6, 3)), rng.normal(size=3)
        feats = fu.embed_context(ad.const(gf), ad.const(lf), ad.const(wg),
                                 ad.const(bg), ad.const(wl), ad.const(bl))
        assert feats.global_slices.data.shape == (16, 3)
        assert feats.local_embedded.data.shape == (3, 2, 2)
        assert feats.z.data.shape == (3,)
        want_z = feats.local_embedded.data.mean(axis=(1, 2))
        assert np.allclose(feats.z.data, want_z, atol=1e-12)

    def test_identity_embedding(self):
        rng = np.random.default_rng(19)
        gf = rng.normal(size=(2, 3, 3))
        lf = rng.normal(size=(2, 2, 2))
        eye = np.eye(2)
        z2 = np.zeros(2)
        feats = fu.embed_context(ad.const(gf), ad.const(lf), ad.const(eye),
                                 ad.const(z2), ad.const(eye), ad.const(z2))
        assert np.array_equal(feats.local_embedded.data, lf)
        back = fu.unslice_features(feats.global_slices, 3).data
        assert np.array_equal(back, gf)
