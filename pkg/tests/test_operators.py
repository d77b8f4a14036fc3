import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spisr.cube import CubeError, PhotonCountingCube, Rng
from spisr.operators import (ScaleFactor, TransformSpec, apply_transform, apply_transform_lr, downsample,
                             random_transform, upsample_nearest, upsample_trilinear)


def _trilinear_oracle(x, s):
    """Voxel-by-voxel half-pixel trilinear interpolation with clamped edges."""
    T, R, C = x.shape
    out = np.zeros((T * s[0], R * s[1], C * s[2]))

    def coord(j, f, n):
        p = min(max((j + 0.5) / f - 0.5, 0.0), n - 1)
        lo = int(np.floor(p))
        return lo, min(lo + 1, n - 1), p - lo

    for t, i, j in itertools.product(*(range(n) for n in out.shape)):
        (t0, t1, a), (i0, i1, b), (j0, j1, c) = coord(t, s[0], T), coord(i, s[1], R), coord(j, s[2], C)
        v = 0.0
        for tt, wt in ((t0, 1 - a), (t1, a)):
            for ii, wi in ((i0, 1 - b), (i1, b)):
                for jj, wj in ((j0, 1 - c), (j1, c)):
                    v += wt * wi * wj * x[tt, ii, jj]
        out[t, i, j] = v
    return out


class TestDownsample:
    def test_constant(self):
        assert np.all(downsample(np.full((4, 6, 6), 2.5), 2) == 2.5)

    def test_block_0_to_7(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        assert downsample(x, 2).item() == 3.5

    def test_linearity(self, nprng):
        a, b = nprng.random((4, 6, 6)), nprng.random((4, 6, 6))
        np.testing.assert_allclose(downsample(a + b, 2), downsample(a, 2) + downsample(b, 2), atol=1e-12, rtol=0)

    def test_indivisible(self):
        with pytest.raises(CubeError):
            downsample(np.zeros((3, 4, 4)), 2)

    def test_anisotropic_array(self, nprng):
        x = nprng.random((6, 4, 4))
        y = downsample(x, (3, 2, 1))
        assert y.shape == (2, 2, 4)
        np.testing.assert_allclose(y[1, 0, 3], x[3:6, 0:2, 3].mean(), rtol=1e-15)

    def test_cube_type_kept(self, nprng):
        x = PhotonCountingCube(nprng.random((6, 4, 4)))
        y = downsample(x, (3, 2, 2))
        assert isinstance(y, PhotonCountingCube) and y.dims.shape == (2, 2, 2)
        np.testing.assert_allclose(y.data[1, 0, 1], x.data[3:6, 0:2, 2:4].mean(), rtol=1e-15)

    def test_cube_non_square_result_rejected(self, nprng):
        with pytest.raises(CubeError):
            downsample(PhotonCountingCube(nprng.random((6, 4, 4))), (3, 2, 1))

    def test_mass_preserved(self, nprng):
        x = nprng.random((4, 6, 6))
        assert np.isclose(downsample(x, 2).sum() * 8, x.sum(), rtol=1e-13)


class TestUpsample:
    def test_constant(self):
        assert np.all(upsample_trilinear(np.full((3, 2, 2), 4.0), 2) == 4.0)

    @pytest.mark.parametrize("scale", [(2, 2, 2), (1, 2, 2), (3, 1, 2)])
    def test_matches_oracle(self, nprng, scale):
        x = nprng.random((3, 4, 4))
        np.testing.assert_allclose(upsample_trilinear(x, scale), _trilinear_oracle(x, scale), atol=1e-13)

    def test_ramp_roundtrip_interior(self):
        # exact on every block whose interpolation stencil avoids the clamped edge
        t, i, j = np.meshgrid(np.arange(6.0), np.arange(5.0), np.arange(5.0), indexing="ij")
        for ramp in (t, 2 * i + 1, 3 * j - t + 0.5 * i):
            back = downsample(upsample_trilinear(ramp, 2), 2)
            np.testing.assert_allclose(back[1:-1, 1:-1, 1:-1], ramp[1:-1, 1:-1, 1:-1], atol=1e-13, rtol=0)

    def test_ramp_roundtrip_edges_clamped(self):
        ramp = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 2, 2)).copy()
        back = downsample(upsample_trilinear(ramp, 2), 2)
        assert back[0, 0, 0] == pytest.approx(0.125) and back[-1, 0, 0] == pytest.approx(2.875)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 7, elements=st.floats(-100, 100)))
    def test_monotone_ramp_stays_monotone(self, v):
        ramp = np.sort(v)[:, None, None] * np.ones((1, 2, 2))
        up = upsample_trilinear(ramp, 2)[:, 0, 0]
        assert np.all(np.diff(up) >= -1e-12)

    def test_nearest_then_mean_is_identity(self, nprng):
        x = nprng.random((3, 4, 4))
        np.testing.assert_array_equal(downsample(upsample_nearest(x, 2), 2), x)


def _cube(seed, shape=(8, 6, 6)):
    return np.random.default_rng(seed).random(shape)


class TestTransforms:
    def test_identity(self):
        x = _cube(0)
        assert np.array_equal(apply_transform(x, TransformSpec(0, 0)), x)

    def test_quarter_turn_inverse(self):
        x = _cube(1)
        assert np.array_equal(apply_transform(apply_transform(x, TransformSpec(1, 0)), TransformSpec(3, 0)), x)

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_shift_inverse(self, k):
        x = _cube(2)
        T = x.shape[0]
        assert np.array_equal(apply_transform(apply_transform(x, TransformSpec(0, k)), TransformSpec(0, T - k)), x)

    def test_non_square(self):
        with pytest.raises(CubeError):
            apply_transform(np.zeros((2, 3, 4)), TransformSpec(1, 0))

    def test_rotation_direction(self):
        x = np.zeros((1, 3, 3))
        x[0, 0, 2] = 1.0
        # counter-clockwise quarter turn moves the top-right corner to the top-left
        assert apply_transform(x, TransformSpec(1, 0))[0, 0, 0] == 1.0

    def test_shift_direction(self):
        x = np.zeros((5, 1, 1))
        x[1] = 1.0
        assert apply_transform(x, TransformSpec(0, 2))[3, 0, 0] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(q1=st.integers(0, 3), s1=st.integers(0, 7), q2=st.integers(0, 3), s2=st.integers(0, 7),
           q3=st.integers(0, 3), s3=st.integers(0, 7), seed=st.integers(0, 1000))
    def test_group_laws(self, q1, s1, q2, s2, q3, s3, seed):
        T = 8
        a, b, c = TransformSpec(q1, s1), TransformSpec(q2, s2), TransformSpec(q3, s3)
        x = _cube(seed)
        # closure / composition agrees with sequential application
        assert np.array_equal(apply_transform(apply_transform(x, b), a), apply_transform(x, a.compose(b, T)))
        # associativity
        assert a.compose(b, T).compose(c, T) == a.compose(b.compose(c, T), T)
        # inverse
        assert a.compose(a.inverse(T), T) == TransformSpec(0, 0)
        assert np.array_equal(apply_transform(apply_transform(x, a), a.inverse(T)), x)

    def test_permutation_preserves_values(self):
        x = _cube(3)
        y = apply_transform(x, TransformSpec(3, 5))
        assert np.array_equal(np.sort(x, axis=None), np.sort(y, axis=None))

    @pytest.mark.parametrize("q,s", [(0, 0), (1, 2), (2, 4), (3, 6)])
    def test_commutes_with_downsample(self, q, s):
        x = _cube(4)
        g = TransformSpec(q, s)
        assert np.array_equal(downsample(apply_transform(x, g), 2), apply_transform_lr(downsample(x, 2), g, 2))

    def test_lr_action_rejects_odd_shift(self):
        with pytest.raises(ValueError):
            apply_transform_lr(np.zeros((4, 2, 2)), TransformSpec(0, 1), 2)

    def test_leading_axes(self):
        x = np.random.default_rng(5).random((3, 8, 6, 6))
        g = TransformSpec(1, 3)
        y = apply_transform(x, g)
        for c in range(3):
            assert np.array_equal(y[c], apply_transform(x[c], g))


class TestRandomTransform:
    def test_quarter_turn_frequencies(self):
        root = Rng(0)
        q = np.array([random_transform(root.spawn(i), 64, 2).quarter_turns for i in range(100_000)])
        freq = np.bincount(q, minlength=4) / q.size
        assert np.all(np.abs(freq - 0.25) <= 0.01)

    def test_shift_multiple_of_scale(self):
        root = Rng(1)
        shifts = {random_transform(root.spawn(i), 64, 2).shift_bins for i in range(2000)}
        assert all(s % 2 == 0 and 0 <= s < 64 for s in shifts)
        assert len(shifts) == 32

    def test_deterministic(self):
        assert random_transform(Rng(7), 16, 2) == random_transform(Rng(7), 16, 2)


def test_scale_factor():
    s = ScaleFactor.of((2, 2, 2))
    assert s.total == 8 and tuple(s) == (2, 2, 2) and ScaleFactor.of(3).total == 27
    with pytest.raises(ValueError):
        ScaleFactor(0, 1, 1)
