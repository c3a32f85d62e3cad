from __future__ import annotations

import numpy as np
import pytest

from xtalkit.structio import AtomicSystem


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random proper rotation via QR with sign fixing."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_crystal(rng: np.random.Generator, n_min: int = 1, n_max: int = 6,
                   a_lo: float = 6.0, a_hi: float = 9.0) -> AtomicSystem:
    """Small random periodic system: skewed near-diagonal cell, atoms inside."""
    n = int(rng.integers(n_min, n_max + 1))
    lattice = np.diag(rng.uniform(a_lo, a_hi, 3)) + rng.uniform(-0.5, 0.5, (3, 3))
    if np.linalg.det(lattice) < 0:
        lattice[2] *= -1
    frac = rng.uniform(0.0, 1.0, (n, 3))
    numbers = rng.integers(1, 30, n)
    return AtomicSystem(numbers, frac @ lattice, lattice)


def random_molecule(rng: np.random.Generator, n_min: int = 2, n_max: int = 6,
                    box: float = 5.0) -> AtomicSystem:
    n = int(rng.integers(n_min, n_max + 1))
    return AtomicSystem(rng.integers(1, 30, n), rng.uniform(0.0, box, (n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
