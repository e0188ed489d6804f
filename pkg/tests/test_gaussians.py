import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ovsplat.diffcore import Tensor
from ovsplat.gaussians import (AttributeDecoder, build_covariance, covariances, init_anchor_grid,
                               quaternion_to_rotation, rotation_matrices, spawn_gaussians)

quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)


class TestQuaternion:
    def test_identity(self):
        np.testing.assert_array_equal(quaternion_to_rotation([1, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_x(self):
        c = np.cos(np.pi / 4)
        r = quaternion_to_rotation([c, c, 0, 0])
        np.testing.assert_allclose(r, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            quaternion_to_rotation([0, 0, 0, 0])

    @given(quats)
    @settings(max_examples=100, deadline=None)
    def test_orthogonal(self, q):
        r = quaternion_to_rotation(q)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_batched_matches_scalar(self, rng):
        q = rng.normal(size=(6, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        batched = rotation_matrices(Tensor(q)).numpy()
        for i in range(6):
            np.testing.assert_allclose(batched[i], quaternion_to_rotation(q[i]), atol=1e-14)


class TestCovariance:
    def test_axis_aligned(self):
        np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [1, 2, 3]), np.diag([1, 4, 9]))

    @given(quats, st.floats(0.01, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_isotropic(self, q, s):
        np.testing.assert_allclose(build_covariance(q, [s, s, s]), s * s * np.eye(3), atol=1e-12 * max(1, s * s))

    @given(quats, arrays(np.float64, 3, elements=st.floats(0.05, 3.0)))
    @settings(max_examples=100, deadline=None)
    def test_eigenvalues_are_squared_scales(self, q, s):
        ev = np.sort(np.linalg.eigvalsh(build_covariance(q, s)))
        np.testing.assert_allclose(ev, np.sort(s * s), atol=1e-10)

    def test_batched_matches_scalar(self, rng):
        q = rng.normal(size=(5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        s = rng.uniform(0.1, 2, (5, 3))
        cov = covariances(Tensor(q), Tensor(s)).numpy()
        for i in range(5):
            np.testing.assert_allclose(cov[i], build_covariance(q[i], s[i]), atol=1e-13)

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            build_covariance([1, 0, 0, 0], [1, 0, 1])


class TestSpawn:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.anchors = init_anchor_grid(1.0, 2, 3, rng, 8, 8)
        self.decoder = AttributeDecoder(3, 8, 8, 4, 16, rng)

    def test_zero_offsets_put_means_on_anchors(self):
        self.anchors.offsets.assign(np.zeros_like(self.anchors.offsets.data))
        b = spawn_gaussians(self.anchors, self.decoder, [0, -4, 0])
        np.testing.assert_array_equal(b.means.numpy(), np.repeat(self.anchors.positions, 3, axis=0))

    def test_arity(self):
        rng = np.random.default_rng(0)
        anchors = init_anchor_grid(1.0, 1, 3, rng, 8, 8)
        b = spawn_gaussians(anchors, self.decoder, [0, -4, 0])
        assert len(b) == 3 and anchors.n == 1
        np.testing.assert_array_equal(b.anchor_index, [0, 0, 0])

    def test_view_dependence_only_in_geometry_heads(self):
        b1 = spawn_gaussians(self.anchors, self.decoder, [0, -4, 0])
        b2 = spawn_gaussians(self.anchors, self.decoder, [3, 1, 2])
        np.testing.assert_array_equal(b1.features.numpy(), b2.features.numpy())
        np.testing.assert_array_equal(b1.means.numpy(), b2.means.numpy())
        assert not np.allclose(b1.opacities.numpy(), b2.opacities.numpy())
        assert not np.allclose(b1.colors.numpy(), b2.colors.numpy())

    def test_ranges(self):
        b = spawn_gaussians(self.anchors, self.decoder, [0, -4, 0])
        assert np.all((b.opacities.numpy() > 0) & (b.opacities.numpy() < 1))
        assert np.all(b.scales.numpy() > 0)
        np.testing.assert_allclose(np.linalg.norm(b.rotations.numpy(), axis=1), 1.0, atol=1e-12)

    def test_camera_on_anchor_is_flagged(self):
        b = spawn_gaussians(self.anchors, self.decoder, self.anchors.positions[0])
        assert b.degenerate_view
        assert np.all(np.isfinite(b.colors.numpy()))

    def test_positions_are_frozen(self):
        with pytest.raises(ValueError):
            self.anchors.positions[0, 0] = 1.0


def test_anchor_grid_shape(rng):
    a = init_anchor_grid(1.0, 3, 4, rng, 5, 6)
    assert a.positions.shape == (27, 3)
    assert a.offsets.shape == (27, 4, 3)
    assert a.geo_features.shape == (27, 5) and a.seg_features.shape == (27, 6)
    assert np.all(np.abs(a.positions) <= 1.0)
