from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pytest import approx

from xtalkit.harmonics import (
    degree1_to_vector,
    edge_frames,
    from_grid,
    make_grid,
    real_sph_harm,
    rotation_from_edge,
    s2_activation,
    silu,
    sph_harm_matrix,
    split_point,
    to_grid,
    vector_to_degree1,
    wigner_d,
    wigner_stack,
)

from conftest import random_rotation


def random_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


class TestRealHarmonics:
    def test_degree_zero_constant(self, rng):
        want = 1.0 / np.sqrt(4.0 * np.pi)
        assert real_sph_harm(0, 0, np.array([0.0, 0.0, 1.0])) == approx(want)
        for _ in range(10):
            assert real_sph_harm(0, 0, random_direction(rng)) == approx(0.28209479, abs=1e-8)

    def test_degree_one_spans_y_z_x(self, rng):
        scale = np.sqrt(3.0 / (4.0 * np.pi))
        for _ in range(20):
            d = random_direction(rng)
            got = [real_sph_harm(1, m, d) for m in (-1, 0, 1)]
            assert_allclose(got, scale * np.array([d[1], d[2], d[0]]), atol=1e-12)

    def test_degree_two_analytic_forms(self, rng):
        c = np.sqrt(15.0 / (4.0 * np.pi))
        for _ in range(20):
            x, y, z = random_direction(rng)
            want = [
                c * x * y,
                c * y * z,
                np.sqrt(5.0 / (16.0 * np.pi)) * (3.0 * z * z - 1.0),
                c * z * x,
                0.5 * c * (x * x - y * y),
            ]
            got = [real_sph_harm(2, m, np.array([x, y, z])) for m in range(-2, 3)]
            assert_allclose(got, want, atol=1e-12)

    def test_orthonormal_on_fine_grid(self):
        # quadrature check: <Y_lm, Y_l'm'> = delta
        grid = make_grid(8)
        cols = []
        for l in range(3):
            cols.append(sph_harm_matrix(l, grid.points))
        basis = np.concatenate(cols, axis=1)
        gram = (basis * grid.weights[:, None]).T @ basis
        assert_allclose(gram, np.eye(9), atol=1e-10)

    def test_matrix_agrees_with_scalar(self, rng):
        dirs = np.array([random_direction(rng) for _ in range(5)])
        mat = sph_harm_matrix(2, dirs)
        for i, d in enumerate(dirs):
            for k, m in enumerate(range(-2, 3)):
                assert mat[i, k] == approx(real_sph_harm(2, m, d), abs=1e-12)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            real_sph_harm(1, 2, np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            sph_harm_matrix(1, np.zeros((1, 3)))


class TestVectorPacking:
    def test_roundtrip(self, rng):
        v = rng.standard_normal(3)
        assert_allclose(degree1_to_vector(vector_to_degree1(v)), v)

    def test_component_order(self):
        assert_allclose(vector_to_degree1(np.array([1.0, 2.0, 3.0])), [2.0, 3.0, 1.0])


class TestWigner:
    def test_identity_rotation(self):
        for l in range(4):
            assert_allclose(wigner_d(l, np.eye(3)), np.eye(2 * l + 1), atol=1e-12)

    def test_transforms_harmonics(self, rng):
        # defining property: Y_l(R v) = D_l(R) Y_l(v)
        for _ in range(10):
            rot = random_rotation(rng)
            v = random_direction(rng)
            for l in range(4):
                lhs = sph_harm_matrix(l, (rot @ v)[None])[0]
                rhs = wigner_d(l, rot) @ sph_harm_matrix(l, v[None])[0]
                assert np.abs(lhs - rhs).max() < 1e-10

    def test_orthogonal(self, rng):
        for _ in range(10):
            rot = random_rotation(rng)
            for l in range(1, 4):
                d = wigner_d(l, rot)
                assert_allclose(d @ d.T, np.eye(2 * l + 1), atol=1e-10)

    def test_degree_one_is_permuted_rotation(self, rng):
        rot = random_rotation(rng)
        d1 = wigner_d(1, rot)
        perm = [1, 2, 0]  # (y, z, x) ordering of the degree-1 components
        assert_allclose(d1, rot[np.ix_(perm, perm)], atol=1e-12)

    def test_composition(self, rng):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        for l in range(3):
            assert_allclose(wigner_d(l, r1 @ r2), wigner_d(l, r1) @ wigner_d(l, r2), atol=1e-9)

    def test_rejects_improper_rotation(self, rng):
        rot = random_rotation(rng)
        with pytest.raises(ValueError, match="improper"):
            wigner_d(2, -rot)

    def test_stack_matches_single(self, rng):
        rots = np.array([random_rotation(rng) for _ in range(4)])
        stack = wigner_stack(2, rots)
        assert set(stack) == {0, 1, 2}
        for l in range(3):
            assert stack[l].shape == (4, 2 * l + 1, 2 * l + 1)
            for k in range(4):
                assert_allclose(stack[l][k], wigner_d(l, rots[k]), atol=1e-12)


class TestEdgeFrames:
    def test_maps_edge_onto_z(self, rng):
        for _ in range(25):
            disp = rng.standard_normal(3) * rng.uniform(0.1, 5.0)
            frame = rotation_from_edge(disp)
            assert_allclose(frame @ (disp / np.linalg.norm(disp)), [0.0, 0.0, 1.0], atol=1e-12)
            assert_allclose(frame @ frame.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(frame) == approx(1.0)

    def test_z_aligned_edge_uses_fallback_axis(self):
        frame = rotation_from_edge(np.array([0.0, 0.0, 2.0]))
        assert_allclose(frame @ np.array([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0], atol=1e-12)
        assert np.linalg.det(frame) == approx(1.0)

    def test_zero_displacement_rejected(self):
        with pytest.raises(ValueError):
            rotation_from_edge(np.zeros(3))

    def test_batched_matches_loop(self, rng):
        disps = rng.standard_normal((6, 3))
        frames = edge_frames(disps)
        assert frames.shape == (6, 3, 3)
        for k in range(6):
            assert_allclose(frames[k], rotation_from_edge(disps[k]), atol=1e-12)


class TestSphericalGrid:
    def test_weights_sum_to_sphere_area(self):
        for res in (1, 2, 4, 8):
            grid = make_grid(res)
            assert grid.points.shape == (res * res, 3)
            assert grid.weights.sum() == approx(4.0 * np.pi, abs=1e-10)

    def test_points_are_unit_vectors(self):
        grid = make_grid(5)
        assert_allclose(np.linalg.norm(grid.points, axis=1), 1.0, atol=1e-12)

    def test_resolution_must_be_positive(self):
        with pytest.raises(ValueError):
            make_grid(0)

    def test_projection_roundtrip(self, rng):
        # forward then inverse transform recovers the coefficients exactly
        # once the quadrature is fine enough for the bandwidth
        grid = make_grid(6)
        blocks = {l: rng.standard_normal((2 * l + 1, 4)) for l in range(3)}
        signal = to_grid(blocks, grid)
        assert signal.shape == (36, 4)
        back = from_grid(signal, grid, 2)
        for l in range(3):
            assert_allclose(back[l], blocks[l], atol=1e-10)


class TestS2Activation:
    def test_scalar_split_channels_bypass_grid(self, rng):
        grid = make_grid(6)
        blocks = {0: rng.standard_normal((1, 8)), 1: rng.standard_normal((3, 8))}
        out = s2_activation(blocks, grid, split=8)
        # split=channels sends every scalar channel through the plain
        # nonlinearity; l=0 output is then silu exactly
        assert_allclose(out[0][:, :8], silu(blocks[0][:, :8]), atol=1e-12)

    def test_default_split_is_half(self):
        assert split_point(16, None) == 8
        assert split_point(16, 5) == 5

    def test_preserves_shapes(self, rng):
        grid = make_grid(4)
        blocks = {l: rng.standard_normal((2 * l + 1, 6)) for l in range(3)}
        out = s2_activation(blocks, grid)
        for l in range(3):
            assert out[l].shape == (2 * l + 1, 6)

    def test_equivariance_improves_with_resolution(self, rng):
        # the grid nonlinearity commutes with rotations up to quadrature
        # error, which must shrink as the grid is refined
        rot = random_rotation(rng)
        blocks = {l: rng.standard_normal((2 * l + 1, 4)) for l in range(3)}
        errs = []
        for res in (2, 6, 12):
            grid = make_grid(res)
            wig = {l: wigner_d(l, rot) for l in range(3)}
            rotated_first = s2_activation({l: wig[l] @ blocks[l] for l in range(3)}, grid)
            rotated_last = {l: wig[l] @ out for l, out in s2_activation(blocks, grid).items()}
            errs.append(max(np.abs(rotated_first[l] - rotated_last[l]).max() for l in range(3)))
        assert errs[1] <= errs[0] + 1e-12
        assert errs[2] <= errs[1] + 1e-12
