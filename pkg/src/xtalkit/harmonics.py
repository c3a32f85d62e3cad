"""Real spherical harmonics, rotation matrices on them, and S2 grid transforms.

Basis conventions, used by every consumer in this package:
  * real harmonics, orthonormal on the unit sphere, no Condon-Shortley phase
  * per degree l the components are ordered m = -l..l
  * degree 1 spans (y, z, x): Y_{1,-1} ~ y, Y_{1,0} ~ z, Y_{1,1} ~ x
  * wigner_d(l, R) satisfies Y_l(R v) = D @ Y_l(v) for column vectors v with
    rotations acting as v -> R v
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "real_sph_harm", "sph_harm_matrix", "wigner_d", "rotation_from_edge",
    "SphericalGrid", "make_grid", "to_grid", "from_grid", "s2_activation",
    "vector_to_degree1", "degree1_to_vector", "silu",
]


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


# ---- associated Legendre, positive (no Condon-Shortley) ----------------------

def _legendre_all(l_max: int, x: np.ndarray) -> np.ndarray:
    """P_l^m(x) for 0 <= m <= l <= l_max, shape (l_max+1, l_max+1, *x.shape).

    Uses P_m^m = (2m-1)!! (1-x^2)^(m/2) with a plus sign, then the upward
    recurrence in l.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((l_max + 1, l_max + 1) + x.shape)
    out[0, 0] = 1.0
    for m in range(1, l_max + 1):
        out[m, m] = (2 * m - 1) * s * out[m - 1, m - 1]
    for m in range(l_max):
        out[m + 1, m] = (2 * m + 1) * x * out[m, m]
    for m in range(l_max + 1):
        for l in range(m + 2, l_max + 1):
            out[l, m] = ((2 * l - 1) * x * out[l - 1, m] - (l + m - 1) * out[l - 2, m]) / (l - m)
    return out


def _norm_lm(l: int, m: int) -> float:
    from math import factorial, pi, sqrt
    return sqrt((2 * l + 1) / (4.0 * pi) * factorial(l - m) / factorial(l + m))


def sph_harm_matrix(l: int, directions: np.ndarray) -> np.ndarray:
    """Y_{l,m} for m = -l..l evaluated on unit directions, shape (n, 2l+1)."""
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero direction vector")
    d = d / norms[:, None]
    ct = np.clip(d[:, 2], -1.0, 1.0)
    phi = np.arctan2(d[:, 1], d[:, 0])
    leg = _legendre_all(l, ct)
    out = np.empty((d.shape[0], 2 * l + 1))
    out[:, l] = _norm_lm(l, 0) * leg[l, 0]
    sq2 = np.sqrt(2.0)
    for m in range(1, l + 1):
        base = sq2 * _norm_lm(l, m) * leg[l, m]
        out[:, l + m] = base * np.cos(m * phi)
        out[:, l - m] = base * np.sin(m * phi)
    return out


def real_sph_harm(l: int, m: int, direction: np.ndarray) -> float | np.ndarray:
    """Single real harmonic Y_{l,m}; direction may be one vector or a batch."""
    if not 0 <= abs(m) <= l:
        raise ValueError(f"need |m| <= l, got l={l}, m={m}")
    d = np.asarray(direction, dtype=float)
    single = d.ndim == 1
    vals = sph_harm_matrix(l, d.reshape(-1, 3))[:, l + m]
    return float(vals[0]) if single else vals


# ---- rotations of real harmonics ---------------------------------------------

def _check_rotation(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=float).reshape(3, 3)
    if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-8:
        raise ValueError("matrix is not orthonormal within 1e-8")
    if np.linalg.det(rot) < 0.0:
        raise ValueError("improper rotation (det < 0) not supported")
    return rot


def wigner_d(l: int, rot: np.ndarray) -> np.ndarray:
    """Real-basis rotation matrix D of size (2l+1, 2l+1): Y_l(R v) = D @ Y_l(v).

    Built by the standard recursion on degree, seeded from the 3x3 rotation
    re-indexed to the (y, z, x) order of the degree-1 basis.
    """
    rot = _check_rotation(rot)
    return wigner_stack(l, rot[None])[l][0]


def wigner_stack(l_max: int, rots: np.ndarray) -> dict[int, np.ndarray]:
    """All degrees at once for a batch of rotations: {l: (B, 2l+1, 2l+1)}."""
    rots = np.asarray(rots, dtype=float).reshape(-1, 3, 3)
    b = rots.shape[0]
    out = {0: np.ones((b, 1, 1))}
    if l_max == 0:
        return out
    perm = (1, 2, 0)
    M = rots[:, perm][:, :, perm]  # (B, 3, 3) in (y, z, x) order
    out[1] = M
    for deg in range(2, l_max + 1):
        out[deg] = _wigner_step(deg, M, out[deg - 1])
    return out


def _wigner_step(l: int, M: np.ndarray, Rprev: np.ndarray) -> np.ndarray:
    """One degree raise of the real-basis recursion, batched over rotations."""
    dim = 2 * l + 1
    b = M.shape[0]
    out = np.empty((b, dim, dim))

    def rp(mu: int, mp: int) -> np.ndarray:
        return Rprev[:, mu + l - 1, mp + l - 1]

    def mm(i: int, j: int) -> np.ndarray:
        return M[:, i + 1, j + 1]

    def P(i: int, mu: int, mp: int) -> np.ndarray:
        if abs(mp) < l:
            return mm(i, 0) * rp(mu, mp)
        if mp == l:
            return mm(i, 1) * rp(mu, l - 1) - mm(i, -1) * rp(mu, -l + 1)
        return mm(i, 1) * rp(mu, -l + 1) + mm(i, -1) * rp(mu, l - 1)

    for m in range(-l, l + 1):
        for mp in range(-l, l + 1):
            if abs(mp) < l:
                denom = (l + mp) * (l - mp)
            else:
                denom = (2 * l) * (2 * l - 1)
            u = np.sqrt((l + m) * (l - m) / denom)
            if m == 0:
                v = -0.5 * np.sqrt(2.0 * (l - 1) * l / denom)
                w = 0.0
            else:
                am = abs(m)
                v = 0.5 * np.sqrt((l + am - 1) * (l + am) / denom)
                w = -0.5 * np.sqrt((l - am - 1) * (l - am) / denom)

            total = np.zeros(b)
            if u != 0.0:
                total += u * P(0, m, mp)
            if v != 0.0:
                if m == 0:
                    total += v * (P(1, 1, mp) + P(-1, -1, mp))
                elif m > 0:
                    t = P(1, m - 1, mp) * (np.sqrt(2.0) if m == 1 else 1.0)
                    if m != 1:
                        t = t - P(-1, -m + 1, mp)
                    total += v * t
                else:
                    t = P(-1, -m - 1, mp) * (np.sqrt(2.0) if m == -1 else 1.0)
                    if m != -1:
                        t = t + P(1, m + 1, mp)
                    total += v * t
            if w != 0.0:
                if m > 0:
                    total += w * (P(1, m + 1, mp) + P(-1, -m - 1, mp))
                else:
                    total += w * (P(1, m - 1, mp) - P(-1, -m + 1, mp))
            out[:, m + l, mp + l] = total
    return out


def vector_to_degree1(vec: np.ndarray) -> np.ndarray:
    """Cartesian (..., 3) -> degree-1 coefficients ordered m = -1, 0, 1."""
    vec = np.asarray(vec, dtype=float)
    return np.stack([vec[..., 1], vec[..., 2], vec[..., 0]], axis=-1)


def degree1_to_vector(coeff: np.ndarray) -> np.ndarray:
    """Degree-1 coefficients (m = -1, 0, 1) -> Cartesian (..., 3)."""
    coeff = np.asarray(coeff, dtype=float)
    return np.stack([coeff[..., 2], coeff[..., 0], coeff[..., 1]], axis=-1)


_AUX_CHAIN = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


def rotation_from_edge(displacement: np.ndarray, aux: np.ndarray | None = None) -> np.ndarray:
    """Orthonormal frame (rows) with the edge direction as third axis.

    Applied to column vectors the returned R maps the edge direction onto z,
    so features expressed in the edge frame see the edge along their m = 0 axis.
    When aux is (nearly) parallel to the edge the fixed fallback axes (0,1,0)
    then (1,0,0) are used, in that order.
    """
    d = np.asarray(displacement, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ValueError("zero-length displacement has no frame")
    e3 = d / n
    candidates = (_AUX_CHAIN if aux is None
                  else (np.asarray(aux, dtype=float),) + _AUX_CHAIN)
    for a in candidates:
        an = np.linalg.norm(a)
        if an == 0.0:
            continue
        if abs(float(e3 @ a) / an) > 1.0 - 1e-6:
            continue
        e1 = np.cross(e3, a / an)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(e3, e1)
        return np.stack([e1, e2, e3])
    raise ValueError("no usable auxiliary axis")


def edge_frames(displacements: np.ndarray) -> np.ndarray:
    """rotation_from_edge for a batch: (E, 3) -> (E, 3, 3), default aux chain."""
    d = np.asarray(displacements, dtype=float).reshape(-1, 3)
    n = np.linalg.norm(d, axis=1)
    if np.any(n == 0.0):
        raise ValueError("zero-length displacement has no frame")
    e3 = d / n[:, None]
    aux = np.tile(_AUX_CHAIN[0], (d.shape[0], 1))
    near = np.abs(e3 @ _AUX_CHAIN[0]) > 1.0 - 1e-6
    aux[near] = _AUX_CHAIN[1]
    e1 = np.cross(e3, aux)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(e3, e1)
    return np.stack([e1, e2, e3], axis=1)


# ---- S2 grid -----------------------------------------------------------------

@dataclass
class SphericalGrid:
    """Equiangular product grid: theta_i = (i+1/2) pi / R, phi_j = 2 pi j / R.

    Point k = i * R + j. Weights integrate any polynomial of degree < R in
    cos(theta) exactly (together with the uniform phi rule this makes
    from_grid(to_grid(.)) the identity for bandlimits L with 2L + 1 < R) and
    sum to 4 pi. They approach (pi/R)(2 pi/R) sin(theta_k) as R grows.
    """

    resolution: int
    thetas: np.ndarray
    phis: np.ndarray
    points: np.ndarray      # (R*R, 3) unit vectors
    weights: np.ndarray     # (R*R,)
    _basis: dict = field(default_factory=dict, repr=False)

    def basis(self, l: int) -> np.ndarray:
        """Y_l at the grid points, cached, shape (R*R, 2l+1)."""
        if l not in self._basis:
            self._basis[l] = sph_harm_matrix(l, self.points)
        return self._basis[l]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def dump(self) -> str:
        lines = ["# k theta phi weight"]
        R = self.resolution
        for k in range(self.n_points):
            i, j = divmod(k, R)
            lines.append(f"{k} {self.thetas[i]:.12g} {self.phis[j]:.12g} {self.weights[k]:.12g}")
        return "\n".join(lines) + "\n"


def _theta_weights(res: int) -> np.ndarray:
    """Node weights q_i at cos(theta_i) with sum q = 2, exact through degree res-1."""
    x = np.cos((np.arange(res) + 0.5) * np.pi / res)
    vander = np.polynomial.legendre.legvander(x, res - 1).T
    rhs = np.zeros(res)
    rhs[0] = 2.0
    return np.linalg.solve(vander, rhs)


@lru_cache(maxsize=32)
def _grid_arrays(res: int):
    thetas = (np.arange(res) + 0.5) * np.pi / res
    phis = np.arange(res) * 2.0 * np.pi / res
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    st, ct = np.sin(tt), np.cos(tt)
    pts = np.stack([st * np.cos(pp), st * np.sin(pp), ct], axis=-1).reshape(-1, 3)
    w = np.repeat(_theta_weights(res), res) * (2.0 * np.pi / res)
    return thetas, phis, pts, w


def make_grid(resolution: int) -> SphericalGrid:
    if resolution < 1:
        raise ValueError("grid resolution must be >= 1")
    thetas, phis, pts, w = _grid_arrays(resolution)
    return SphericalGrid(resolution, thetas, phis, pts.copy(), w.copy())


def to_grid(blocks: dict[int, np.ndarray], grid: SphericalGrid) -> np.ndarray:
    """Evaluate sum_l sum_m h_{l,m,c} Y_{l,m} at the grid points -> (R*R, C)."""
    out = None
    for l, coeff in blocks.items():
        coeff = np.asarray(coeff, dtype=float)
        term = grid.basis(l) @ coeff
        out = term if out is None else out + term
    if out is None:
        raise ValueError("no degree blocks given")
    return out


def from_grid(signal: np.ndarray, grid: SphericalGrid, l_max: int) -> dict[int, np.ndarray]:
    """Quadrature projection of a grid signal onto degrees 0..l_max."""
    signal = np.asarray(signal, dtype=float)
    weighted = grid.weights[:, None] * signal
    return {l: grid.basis(l).T @ weighted for l in range(l_max + 1)}


def split_point(channels: int, split: int | None) -> int:
    s = channels // 2 if split is None else int(split)
    if not 0 <= s <= channels:
        raise ValueError(f"split {s} outside 0..{channels}")
    return s


def s2_activation(blocks: dict[int, np.ndarray], grid: SphericalGrid,
                  nonlinearity=silu, split: int | None = None) -> dict[int, np.ndarray]:
    """Separable grid nonlinearity on steerable features.

    Degree-0 channels are split in two groups: the first gets the pointwise
    nonlinearity directly; the second rides the grid pathway together with all
    degree > 0 content (spectral -> spatial -> nonlinearity -> spectral).
    Outputs are concatenated back along channels, so shapes are preserved.
    """
    l_max = max(blocks)
    channels = np.asarray(blocks[0]).shape[-1]
    s = split_point(channels, split)

    spectral_in = {l: np.asarray(b, dtype=float).copy() for l, b in blocks.items()}
    spectral_in[0][:, :s] = 0.0
    spatial = nonlinearity(to_grid(spectral_in, grid))
    spectral_out = from_grid(spatial, grid, l_max)

    out = {l: spectral_out[l] for l in range(1, l_max + 1)}
    head = nonlinearity(np.asarray(blocks[0], dtype=float)[:, :s])
    out[0] = np.concatenate([head, spectral_out[0][:, s:]], axis=-1)
    return out
