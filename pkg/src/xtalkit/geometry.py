"""Periodic geometry helpers and radius-graph construction.

Row-vector convention: cartesian = fractional @ lattice, lattice rows are the
cell vectors. Edge displacement for (i, j, z) is x_i - x_j + z @ lattice, so a
degree-1 feature aligned with the displacement points from neighbor to center.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .structio import AtomicSystem

CUTOFF = "cutoff"
SELF_LOOP = "self_loop"

# shared numeric defaults for graph construction
DEFAULT_CUTOFF = 12.0
DEFAULT_NEIGHBOR_CAP = 20

# image shifts, lexicographic; index 13 is (0,0,0)
_SHIFTS = np.array(sorted(product((-1, 0, 1), repeat=3)), dtype=int)


# ---- coordinate transforms --------------------------------------------------

def frac_to_cart(frac: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    return np.asarray(frac, dtype=float) @ np.asarray(lattice, dtype=float)


def cart_to_frac(cart: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    return np.asarray(cart, dtype=float) @ np.linalg.inv(np.asarray(lattice, dtype=float))


def wrap_to_cell(cart: np.ndarray, lattice: np.ndarray) -> np.ndarray:
    """Translate positions by lattice vectors so fractional coords land in [0, 1)."""
    frac = cart_to_frac(cart, lattice)
    frac -= np.floor(frac)
    # floor can round fractional parts like -1e-18 up to exactly 1.0
    frac[frac >= 1.0] -= 1.0
    return frac @ np.asarray(lattice, dtype=float)


def cell_volume(lattice: np.ndarray) -> float:
    return float(abs(np.linalg.det(np.asarray(lattice, dtype=float))))


# ---- graph types -------------------------------------------------------------

@dataclass
class Edge:
    src: int
    dst: int
    displacement: np.ndarray  # (3,) cartesian, x_src - x_dst + image @ lattice
    kind: str                 # "cutoff" or "self_loop"
    image: tuple[int, int, int] = (0, 0, 0)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.displacement))


@dataclass
class GeometricGraph:
    system: AtomicSystem
    edges: list[Edge]
    r_c: float
    avg_degree: float  # cutoff edges per atom; self-loops not counted

    @property
    def n_atoms(self) -> int:
        return self.system.n_atoms

    def edge_arrays(self):
        """(src, dst, displacement, is_self_loop) as flat arrays for vectorized use."""
        if not self.edges:
            z = np.zeros(0, dtype=int)
            return z, z, np.zeros((0, 3)), np.zeros(0, dtype=bool)
        src = np.array([e.src for e in self.edges], dtype=int)
        dst = np.array([e.dst for e in self.edges], dtype=int)
        disp = np.array([e.displacement for e in self.edges], dtype=float)
        loop = np.array([e.kind == SELF_LOOP for e in self.edges], dtype=bool)
        return src, dst, disp, loop


# ---- construction ------------------------------------------------------------

def _cap_and_sort(edges: list[Edge], max_neighbors: int | None) -> list[Edge]:
    """Keep the max_neighbors shortest cutoff edges per source, then order the

    whole list deterministically by (src, image, dst). Self-loops sort after
    cutoff edges of the same source and are never capped.
    """
    if max_neighbors is not None:
        by_src: dict[int, list[Edge]] = {}
        for e in edges:
            if e.kind == CUTOFF:
                by_src.setdefault(e.src, []).append(e)
        drop: set[int] = set()
        for src_edges in by_src.values():
            if len(src_edges) <= max_neighbors:
                continue
            src_edges.sort(key=lambda e: (e.length, e.dst, e.image))
            drop.update(id(e) for e in src_edges[max_neighbors:])
        if drop:
            edges = [e for e in edges if id(e) not in drop]
    edges.sort(key=lambda e: (e.src, e.kind == SELF_LOOP, e.image, e.dst))
    return edges


def molecular_edges(positions: np.ndarray, r_c: float, max_neighbors: int | None) -> list[Edge]:
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]   # diff[i, j] = x_i - x_j
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    ii, jj = np.nonzero(dist <= r_c)
    edges = [Edge(int(i), int(j), diff[i, j].copy(), CUTOFF) for i, j in zip(ii, jj)]
    return _cap_and_sort(edges, max_neighbors)


def crystal_edges(positions: np.ndarray, lattice: np.ndarray, r_c: float,
                  max_neighbors: int | None, keep_self_images: bool = False) -> list[Edge]:
    """Cutoff edges over the 27 neighbor images plus 3 fixed self-loops per atom.

    keep_self_images=True additionally admits i == j pairs at nonzero image
    shift as cutoff edges (off by default: self interaction is carried by the
    self-loops alone).
    """
    positions = np.asarray(positions, dtype=float)
    lattice = np.asarray(lattice, dtype=float)
    n = positions.shape[0]
    shift_cart = _SHIFTS @ lattice                                # (27, 3)
    diff = positions[:, None, None, :] - positions[None, :, None, :] + shift_cart[None, None, :, :]
    dist = np.linalg.norm(diff, axis=-1)                          # (n, n, 27)
    within = dist <= r_c
    if not keep_self_images:
        within[np.arange(n), np.arange(n), :] = False
    else:
        within[np.arange(n), np.arange(n), 13] = False            # zero shift never pairs i with itself
    ii, jj, kk = np.nonzero(within)
    edges = [
        Edge(int(i), int(j), diff[i, j, k].copy(), CUTOFF, tuple(int(s) for s in _SHIFTS[k]))
        for i, j, k in zip(ii, jj, kk)
    ]
    edges = _cap_and_sort(edges, max_neighbors)
    for i in range(n):
        for axis in range(3):
            image = tuple(int(v) for v in np.eye(3, dtype=int)[axis])
            edges.append(Edge(i, i, lattice[axis].copy(), SELF_LOOP, image))
    return edges


def build_molecular_graph(system: AtomicSystem, r_c: float = DEFAULT_CUTOFF,
                          max_neighbors: int | None = DEFAULT_NEIGHBOR_CAP) -> GeometricGraph:
    """All-pairs radius graph for a finite molecule (no images, no self-loops)."""
    edges = molecular_edges(system.positions, r_c, max_neighbors)
    return GeometricGraph(system, edges, r_c, len(edges) / system.n_atoms)


def build_crystal_graph(system: AtomicSystem, r_c: float = DEFAULT_CUTOFF,
                        max_neighbors: int | None = DEFAULT_NEIGHBOR_CAP,
                        keep_self_images: bool = False) -> GeometricGraph:
    """Periodic radius graph over first-shell images plus 3 self-loops per atom."""
    if system.lattice is None:
        raise ValueError("crystal graph needs a lattice; use build_molecular_graph")
    edges = crystal_edges(system.positions, system.lattice, r_c, max_neighbors, keep_self_images)
    n_cut = sum(1 for e in edges if e.kind == CUTOFF)
    return GeometricGraph(system, edges, r_c, n_cut / system.n_atoms)


def build_graph(system: AtomicSystem, r_c: float = DEFAULT_CUTOFF,
                max_neighbors: int | None = DEFAULT_NEIGHBOR_CAP) -> GeometricGraph:
    if system.is_periodic:
        return build_crystal_graph(system, r_c, max_neighbors)
    return build_molecular_graph(system, r_c, max_neighbors)


# ---- debug dump ---------------------------------------------------------------

def dump_edges(graph: GeometricGraph) -> str:
    """One line per edge: `i j dx dy dz kind`."""
    lines = []
    for e in graph.edges:
        d = e.displacement
        lines.append(f"{e.src} {e.dst} {d[0]:.10g} {d[1]:.10g} {d[2]:.10g} {e.kind}")
    return "\n".join(lines) + ("\n" if lines else "")
