from __future__ import annotations

from itertools import product

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pytest import approx

from xtalkit.geometry import (
    CUTOFF,
    SELF_LOOP,
    build_crystal_graph,
    build_graph,
    build_molecular_graph,
    cart_to_frac,
    cell_volume,
    crystal_edges,
    dump_edges,
    frac_to_cart,
    molecular_edges,
    wrap_to_cell,
)
from xtalkit.structio import AtomicSystem

from conftest import random_crystal, random_molecule


def exhaustive_crystal_edges(positions, lattice, r_c):
    """Literal enumeration of the first-image-shell cutoff pairs plus the
    three per-atom self-loops, written independently of the library code."""
    positions = np.asarray(positions, dtype=float)
    lattice = np.asarray(lattice, dtype=float)
    n = len(positions)
    cutoff = set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for shift in product((-1, 0, 1), repeat=3):
                disp = positions[i] - positions[j] + np.asarray(shift, dtype=float) @ lattice
                if np.linalg.norm(disp) <= r_c:
                    cutoff.add((i, j, shift))
    loops = {(i, i, tuple(int(v) for v in np.eye(3, dtype=int)[axis]))
             for i in range(n) for axis in range(3)}
    return cutoff, loops


def graph_edge_keys(edges):
    cutoff = {(e.src, e.dst, e.image) for e in edges if e.kind == CUTOFF}
    loops = {(e.src, e.dst, e.image) for e in edges if e.kind == SELF_LOOP}
    return cutoff, loops


class TestCoordinateTransforms:
    def test_roundtrip_random_lattices(self, rng):
        for _ in range(50):
            lattice = rng.uniform(-3.0, 3.0, (3, 3)) + np.eye(3) * 5.0
            cart = rng.uniform(-10.0, 10.0, (7, 3))
            back = frac_to_cart(cart_to_frac(cart, lattice), lattice)
            assert np.abs(back - cart).max() < 1e-12

    def test_wrap_point_inside_unchanged(self):
        lattice = np.eye(3) * 4.0
        cart = np.array([[1.0, 2.0, 3.0]])
        assert_allclose(wrap_to_cell(cart, lattice), cart)

    def test_wrap_lands_in_unit_cell(self, rng):
        lattice = np.diag([3.0, 4.0, 5.0]) + rng.uniform(-0.4, 0.4, (3, 3))
        cart = rng.uniform(-40.0, 40.0, (1000, 3))
        frac = cart_to_frac(wrap_to_cell(cart, lattice), lattice)
        assert frac.min() >= 0.0
        assert frac.max() < 1.0

    def test_wrap_is_lattice_translation(self, rng):
        lattice = np.diag([3.0, 4.0, 5.0])
        cart = rng.uniform(-20.0, 20.0, (100, 3))
        shift = cart_to_frac(wrap_to_cell(cart, lattice) - cart, lattice)
        assert np.abs(shift - np.round(shift)).max() < 1e-9


class TestCellVolume:
    def test_diagonal(self):
        assert cell_volume(np.diag([3.0, 3.0, 3.0])) == approx(27.0)
        assert cell_volume(np.eye(3)) == approx(1.0)

    def test_matches_triple_product(self, rng):
        for _ in range(20):
            lattice = rng.uniform(-4.0, 4.0, (3, 3))
            expected = abs(float(np.dot(lattice[0], np.cross(lattice[1], lattice[2]))))
            assert cell_volume(lattice) == approx(expected, abs=1e-12)


class TestMolecularEdges:
    def test_two_atoms_two_directed_edges(self):
        edges = molecular_edges(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 2.0, None)
        assert len(edges) == 2
        assert {(e.src, e.dst) for e in edges} == {(0, 1), (1, 0)}
        assert_allclose(edges[0].displacement, [-1.0, 0.0, 0.0])
        assert_allclose(edges[1].displacement, [1.0, 0.0, 0.0])

    def test_matches_all_pairs_oracle(self, rng):
        for _ in range(20):
            pos = rng.uniform(0.0, 5.0, (4, 3))
            r_c = rng.uniform(1.0, 6.0)
            edges = molecular_edges(pos, r_c, None)
            expected = {(i, j) for i in range(4) for j in range(4)
                        if i != j and np.linalg.norm(pos[i] - pos[j]) <= r_c}
            assert {(e.src, e.dst) for e in edges} == expected
            for e in edges:
                assert_allclose(e.displacement, pos[e.src] - pos[e.dst])

    def test_translation_leaves_displacements_unchanged(self, rng):
        pos = rng.uniform(0.0, 5.0, (5, 3))
        base = molecular_edges(pos, 4.0, None)
        moved = molecular_edges(pos + np.array([11.0, -3.0, 7.0]), 4.0, None)
        assert [(e.src, e.dst) for e in base] == [(e.src, e.dst) for e in moved]
        for a, b in zip(base, moved):
            assert_allclose(a.displacement, b.displacement, atol=1e-12)

    def test_neighbor_cap_keeps_nearest(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
        edges = molecular_edges(pos, 10.0, 2)
        from_first = [e for e in edges if e.src == 0]
        assert {e.dst for e in from_first} == {1, 2}


class TestCrystalEdges:
    def test_single_atom_worked_example(self):
        # 1 atom, cubic a=3, r_c=12: the i != j rule excludes every image of
        # the atom itself, leaving only the 3 fixed self-loops.
        lattice = np.eye(3) * 3.0
        edges = crystal_edges(np.zeros((1, 3)), lattice, 12.0, None)
        cutoff, loops = graph_edge_keys(edges)
        assert len(cutoff) == 0
        assert len(loops) == 3
        loop_disp = np.array([e.displacement for e in edges if e.kind == SELF_LOOP])
        assert_allclose(np.sort(loop_disp, axis=0), np.sort(lattice, axis=0))

    def test_two_atom_worked_example_uncapped(self):
        # every one of the 27 images of the other atom is within reach
        # (max pair distance sqrt(3 * 4.5^2) = 7.79 <= 12)
        pos = np.array([[0.0, 0.0, 0.0], [1.5, 1.5, 1.5]])
        edges = crystal_edges(pos, np.eye(3) * 3.0, 12.0, None)
        cutoff, loops = graph_edge_keys(edges)
        assert len(cutoff) == 54
        assert sum(1 for (i, j, _) in cutoff if (i, j) == (0, 1)) == 27
        assert sum(1 for (i, j, _) in cutoff if (i, j) == (1, 0)) == 27
        assert len(loops) == 6

    def test_two_atom_worked_example_capped(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.5, 1.5, 1.5]])
        edges = crystal_edges(pos, np.eye(3) * 3.0, 12.0, 20)
        cutoff_edges = [e for e in edges if e.kind == CUTOFF]
        assert len(cutoff_edges) == 40
        # each source keeps its 20 nearest images of the other atom
        for src in (0, 1):
            kept = sorted(e.length for e in cutoff_edges if e.src == src)
            all_dist = sorted(
                e.length for e in crystal_edges(pos, np.eye(3) * 3.0, 12.0, None)
                if e.kind == CUTOFF and e.src == src)
            assert_allclose(kept, all_dist[:20], atol=1e-12)

    def test_matches_exhaustive_enumeration(self, rng):
        for _ in range(20):
            system = random_crystal(rng, n_min=1, n_max=6)
            r_c = rng.uniform(2.5, 5.5)
            edges = crystal_edges(system.positions, system.lattice, r_c, None)
            cutoff, loops = graph_edge_keys(edges)
            want_cut, want_loops = exhaustive_crystal_edges(system.positions, system.lattice, r_c)
            assert cutoff == want_cut
            assert loops == want_loops

    def test_self_loop_displacements_equal_lattice_rows(self, rng):
        system = random_crystal(rng, n_min=2, n_max=4)
        edges = crystal_edges(system.positions + 1.23, system.lattice, 5.0, None)
        for e in edges:
            if e.kind == SELF_LOOP:
                axis = int(np.argmax(e.image))
                assert_allclose(e.displacement, system.lattice[axis], atol=1e-12)

    def test_self_images_excluded_by_default(self):
        lattice = np.eye(3) * 3.0
        with_images = crystal_edges(np.zeros((1, 3)), lattice, 12.0, None, keep_self_images=True)
        cutoff, _ = graph_edge_keys(with_images)
        assert len(cutoff) == 26
        assert all(image != (0, 0, 0) for (_, _, image) in cutoff)

    def test_deterministic_ordering(self, rng):
        system = random_crystal(rng, n_min=3, n_max=6)
        g1 = build_crystal_graph(system, r_c=5.0, max_neighbors=None)
        g2 = build_crystal_graph(system.copy(), r_c=5.0, max_neighbors=None)
        assert dump_edges(g1) == dump_edges(g2)
        keys = [(e.src, e.kind == SELF_LOOP, e.image, e.dst) for e in g1.edges if e.kind == CUTOFF]
        assert keys == sorted(keys)


class TestGraphBuilders:
    def test_dispatch_on_periodicity(self, rng):
        crystal = random_crystal(rng)
        molecule = random_molecule(rng)
        assert any(e.kind == SELF_LOOP for e in build_graph(crystal).edges)
        assert all(e.kind == CUTOFF for e in build_graph(molecule).edges)

    def test_avg_degree_counts_cutoff_only(self):
        pos = np.array([[0.0, 0.0, 0.0], [1.5, 1.5, 1.5]])
        system = AtomicSystem([3, 9], pos, np.eye(3) * 3.0)
        graph = build_crystal_graph(system, r_c=12.0, max_neighbors=None)
        assert graph.avg_degree == approx(27.0)

    def test_crystal_graph_requires_lattice(self, rng):
        with pytest.raises(ValueError, match="lattice"):
            build_crystal_graph(random_molecule(rng))

    def test_edge_arrays_shapes(self, rng):
        graph = build_graph(random_crystal(rng, n_min=2, n_max=4), r_c=5.0)
        src, dst, disp, loop = graph.edge_arrays()
        assert src.shape == dst.shape == loop.shape == (len(graph.edges),)
        assert disp.shape == (len(graph.edges), 3)
        assert loop.sum() == 3 * graph.n_atoms
