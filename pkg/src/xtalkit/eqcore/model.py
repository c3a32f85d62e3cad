"""Equivariant network forward pass: embeddings, attention blocks and heads.

Steerable features are dicts {l: Tensor of shape (batch, 2l+1, C)} with the
degree components ordered m = -l..l. All constants tied to a structure (edge
frames, their rotation matrices, radial basis values, grid matrices) live in a
GraphCache so repeated passes over the same structure do no redundant work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .. import harmonics as sph
from ..geometry import GeometricGraph, molecular_edges, crystal_edges
from ..structio import AtomicSystem
from .config import ModelConfig
from .params import ModelParams

ALL_MODES = ("energy", "forces", "pos_noise", "cell_noise", "property", "classify")


# ---- structure-tied constants -------------------------------------------------

_GRIDMATS: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = {}


def grid_matrices(resolution: int, l_max: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(to_grid, from_grid) constant matrices per degree, cached per (R, L)."""
    key = (resolution, l_max)
    if key not in _GRIDMATS:
        grid = sph.make_grid(resolution)
        mats = []
        for l in range(l_max + 1):
            basis = grid.basis(l)                        # (P, 2l+1)
            mats.append((basis, (basis * grid.weights[:, None]).T))
        _GRIDMATS[key] = mats
    return _GRIDMATS[key]


@dataclass
class GraphCache:
    n_atoms: int
    z_index: np.ndarray          # (N,)
    src: np.ndarray              # (E,)
    dst: np.ndarray              # (E,)
    disp: np.ndarray             # (E, 3)
    rbf: np.ndarray              # (E, n_radial)
    d_in: dict                   # l -> (E, 2l+1, 2l+1), global -> edge frame
    d_out: dict                  # l -> transpose of d_in
    edge_col: dict               # l -> (E, 2l+1), m=0 row of d_in
    denom: float                 # mean out-degree over aggregated edges, >= 1
    gridmats: list
    lattice: np.ndarray | None


def radial_basis(dist: np.ndarray, r_c: float, n_radial: int) -> np.ndarray:
    centers = np.linspace(0.0, r_c, n_radial)
    width = r_c / max(n_radial - 1, 1)
    return np.exp(-0.5 * ((dist[:, None] - centers[None, :]) / width) ** 2)


def build_cache(numbers: np.ndarray, positions: np.ndarray, lattice: np.ndarray | None,
                cfg: ModelConfig) -> GraphCache:
    numbers = np.asarray(numbers, dtype=int)
    positions = np.asarray(positions, dtype=float)
    if lattice is None:
        edges = molecular_edges(positions, cfg.r_c, cfg.max_neighbors)
    else:
        lattice = np.asarray(lattice, dtype=float)
        edges = crystal_edges(positions, lattice, cfg.r_c, cfg.max_neighbors)
    n = numbers.shape[0]
    e = len(edges)
    if e:
        src = np.array([ed.src for ed in edges], dtype=int)
        dst = np.array([ed.dst for ed in edges], dtype=int)
        disp = np.array([ed.displacement for ed in edges], dtype=float)
        frames = sph.edge_frames(disp)
        d_in = sph.wigner_stack(cfg.l_max, frames)
        rbf = radial_basis(np.linalg.norm(disp, axis=1), cfg.r_c, cfg.n_radial)
    else:
        src = dst = np.zeros(0, dtype=int)
        disp = np.zeros((0, 3))
        d_in = {l: np.zeros((0, 2 * l + 1, 2 * l + 1)) for l in range(cfg.l_max + 1)}
        rbf = np.zeros((0, cfg.n_radial))
    d_out = {l: np.swapaxes(m, 1, 2).copy() for l, m in d_in.items()}
    edge_col = {l: d_in[l][:, l, :].copy() for l in d_in}
    return GraphCache(
        n_atoms=n, z_index=numbers, src=src, dst=dst, disp=disp, rbf=rbf,
        d_in=d_in, d_out=d_out, edge_col=edge_col,
        denom=max(e / n, 1.0),
        gridmats=grid_matrices(cfg.grid_resolution, cfg.l_max),
        lattice=None if lattice is None else np.asarray(lattice, dtype=float),
    )


def cache_from_graph(graph: GeometricGraph, cfg: ModelConfig) -> GraphCache:
    """Cache for a prebuilt graph (its edge list is reused as-is)."""
    sysm = graph.system
    n = sysm.n_atoms
    e = len(graph.edges)
    if e:
        src, dst, disp, _ = graph.edge_arrays()
        frames = sph.edge_frames(disp)
        d_in = sph.wigner_stack(cfg.l_max, frames)
        rbf = radial_basis(np.linalg.norm(disp, axis=1), cfg.r_c, cfg.n_radial)
    else:
        src = dst = np.zeros(0, dtype=int)
        disp = np.zeros((0, 3))
        d_in = {l: np.zeros((0, 2 * l + 1, 2 * l + 1)) for l in range(cfg.l_max + 1)}
        rbf = np.zeros((0, cfg.n_radial))
    d_out = {l: np.swapaxes(m, 1, 2).copy() for l, m in d_in.items()}
    edge_col = {l: d_in[l][:, l, :].copy() for l in d_in}
    return GraphCache(
        n_atoms=n, z_index=sysm.numbers.copy(), src=src, dst=dst, disp=disp, rbf=rbf,
        d_in=d_in, d_out=d_out, edge_col=edge_col,
        denom=max(e / n, 1.0),
        gridmats=grid_matrices(cfg.grid_resolution, cfg.l_max),
        lattice=None if sysm.lattice is None else sysm.lattice.copy(),
    )


# ---- building blocks ------------------------------------------------------------

def layer_norm(feats: dict[int, Tensor], gamma: Tensor) -> dict[int, Tensor]:
    """Per-degree RMS normalization over (m, channel), learnable channel scale.

    No mean subtraction anywhere: for l > 0 it would break equivariance and for
    l = 0 the uniform rule keeps the map linear-homogeneous.
    """
    out = {}
    for l, h in feats.items():
        ms = (h * h).mean(axis=(1, 2), keepdims=True)
        out[l] = h / (ms + 1e-12) ** 0.5 * gamma[l]
    return out


def s2_activation_t(feats: dict[int, Tensor], gridmats: list, split: int | None) -> dict[int, Tensor]:
    """Separable grid nonlinearity on Tensor features (see harmonics.s2_activation)."""
    l_max = max(feats)
    batch = feats[0].shape[0]
    channels = feats[0].shape[2]
    s = sph.split_point(channels, split)

    spectral0 = ad.concat([Tensor(np.zeros((batch, 1, s))), feats[0][:, :, s:]], axis=2) \
        if s else feats[0]
    signal = ad.mid_matmul(gridmats[0][0], spectral0)
    for l in range(1, l_max + 1):
        signal = signal + ad.mid_matmul(gridmats[l][0], feats[l])
    act = signal.silu()

    out = {l: ad.mid_matmul(gridmats[l][1], act) for l in range(1, l_max + 1)}
    back0 = ad.mid_matmul(gridmats[0][1], act)
    if s:
        out[0] = ad.concat([feats[0][:, :, :s].silu(), back0[:, :, s:]], axis=2)
    else:
        out[0] = back0
    return out


def so3_linear(feats: dict[int, Tensor], params: ModelParams, prefix: str,
               bias: str | None = None) -> dict[int, Tensor]:
    """Per-degree channel mixing; bias only on the invariant degree."""
    out = {}
    for l, h in feats.items():
        y = h @ params[f"{prefix}.l{l}"]
        if l == 0 and bias is not None:
            y = y + params[bias]
        out[l] = y
    return out


def _so2_linear(feats: dict[int, Tensor], params: ModelParams, prefix: str,
                l_max: int, cv: int, cu: int):
    """Per-azimuthal-order linear map in the edge frame.

    For m = 0 a plain linear layer mixes the m = 0 components of all degrees
    (optionally emitting cu extra invariant channels); for m > 0 the (+m, -m)
    component pair of every degree >= m is mixed with the rotation-commuting
    [[Wr, -Wi], [Wi, Wr]] structure. Returns ({l: (E, 2l+1, cv)}, u or None).
    """
    comp: dict[tuple[int, int], Tensor] = {}

    x0 = ad.concat([feats[l][:, l, :] for l in range(l_max + 1)], axis=1)
    y0 = x0 @ params[f"{prefix}.m0.W"] + params[f"{prefix}.m0.b"]
    for l in range(l_max + 1):
        comp[(l, 0)] = y0[:, l * cv:(l + 1) * cv]
    u = y0[:, (l_max + 1) * cv:] if cu else None

    for m in range(1, l_max + 1):
        degs = list(range(m, l_max + 1))
        xp = ad.concat([feats[l][:, l + m, :] for l in degs], axis=1)
        xm = ad.concat([feats[l][:, l - m, :] for l in degs], axis=1)
        wr = params[f"{prefix}.m{m}.Wr"]
        wi = params[f"{prefix}.m{m}.Wi"]
        yp = xp @ wr - xm @ wi
        ym = xp @ wi + xm @ wr
        for k, l in enumerate(degs):
            comp[(l, m)] = yp[:, k * cv:(k + 1) * cv]
            comp[(l, -m)] = ym[:, k * cv:(k + 1) * cv]

    out = {}
    for l in range(l_max + 1):
        out[l] = ad.stack([comp[(l, m)] for m in range(-l, l + 1)], axis=1)
    return out, u


def _segment_softmax(logits: Tensor, index: np.ndarray, n_segments: int) -> Tensor:
    """Softmax over groups of rows sharing an index; stable via constant max shift."""
    shift = np.full((n_segments,) + logits.shape[1:], -np.inf)
    np.maximum.at(shift, index, logits.data)
    e = (logits - shift[index]).exp()
    total = ad.segment_sum(e, index, n_segments)
    return e / total[index]


def attention(feats: dict[int, Tensor], params: ModelParams, cfg: ModelConfig,
              cache: GraphCache, prefix: str) -> dict[int, Tensor]:
    """Edge-frame attention: rotate messages into each edge frame, mix with
    per-order maps around a grid nonlinearity, softmax-aggregate per center."""
    L, C = cfg.l_max, cfg.channels
    z_src = {l: feats[l] @ params[f"{prefix}.src.l{l}"] for l in range(L + 1)}
    z_dst = {l: feats[l] @ params[f"{prefix}.dst.l{l}"] for l in range(L + 1)}

    msg = {l: z_src[l][cache.src] + z_dst[l][cache.dst] for l in range(L + 1)}
    msg = {l: ad.rot_apply(cache.d_in[l], msg[l]) for l in range(L + 1)}

    v, u = _so2_linear(msg, params, f"{prefix}.so2a", L, C, C)
    v = s2_activation_t(v, cache.gridmats, cfg.s2_split)
    v, _ = _so2_linear(v, params, f"{prefix}.so2b", L, C, 0)

    alpha = _segment_softmax(u @ params[f"{prefix}.alpha.W"], cache.src, cache.n_atoms)
    ch = C // cfg.heads
    e = cache.src.shape[0]
    out = {}
    for l in range(L + 1):
        weighted = v[l].reshape(e, 2 * l + 1, cfg.heads, ch) * alpha.reshape(e, 1, cfg.heads, 1)
        weighted = weighted.reshape(e, 2 * l + 1, C)
        back = ad.rot_apply(cache.d_out[l], weighted)
        out[l] = ad.segment_sum(back, cache.src, cache.n_atoms)
    out = so3_linear(out, params, f"{prefix}.proj", bias=f"{prefix}.proj.b")
    return out


def ffn(feats: dict[int, Tensor], params: ModelParams, cfg: ModelConfig,
        cache: GraphCache, prefix: str) -> dict[int, Tensor]:
    h = so3_linear(feats, params, f"{prefix}.W1", bias=f"{prefix}.b1")
    h = s2_activation_t(h, cache.gridmats, cfg.s2_split)
    return so3_linear(h, params, f"{prefix}.W2", bias=f"{prefix}.b2")


def _add(a: dict[int, Tensor], b: dict[int, Tensor]) -> dict[int, Tensor]:
    return {l: a[l] + b[l] for l in a}


# ---- embedding and trunk ---------------------------------------------------------

def sinusoidal_encoding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half, 1))
    enc = np.zeros(dim)
    enc[0:2 * half:2] = np.sin(t * freqs)
    enc[1:2 * half:2] = np.cos(t * freqs)
    return enc


def embed(cache: GraphCache, params: ModelParams, cfg: ModelConfig,
          timestep: float | None = None) -> dict[int, Tensor]:
    """Initial features: invariant atom-type embedding plus geometry-aware
    edge-degree embedding (invariant radial message oriented along each edge,
    averaged over the neighborhood). Optional timestep conditioning enters the
    invariant channel."""
    L, C = cfg.l_max, cfg.channels
    n = cache.n_atoms

    w_embed = params["atom_embed.W"]
    a0 = w_embed[cache.z_index] + params["atom_embed.b"]          # (N, C)
    h0 = a0.reshape(n, 1, C)
    if timestep is not None:
        enc = Tensor(sinusoidal_encoding(float(timestep), C))
        h0 = h0 + (enc @ params["time_embed.W"] + params["time_embed.b"]).reshape(1, 1, C)

    feats = {0: h0}
    for l in range(1, L + 1):
        feats[l] = Tensor(np.zeros((n, 2 * l + 1, C)))

    if cache.src.shape[0]:
        src_emb = w_embed[cache.z_index[cache.src]]
        dst_emb = w_embed[cache.z_index[cache.dst]]
        phi_in = ad.concat([Tensor(cache.rbf), src_emb, dst_emb], axis=1)
        hidden = (phi_in @ params["edge_phi.W1"] + params["edge_phi.b1"]).silu()
        phi = hidden @ params["edge_phi.W2"] + params["edge_phi.b2"]  # (E, (L+1)C)
        e = cache.src.shape[0]
        for l in range(L + 1):
            phi_l = phi[:, l * C:(l + 1) * C].reshape(e, 1, C)
            contrib = phi_l * cache.edge_col[l][:, :, None]
            feats[l] = feats[l] + ad.segment_sum(contrib, cache.src, n) * (1.0 / cache.denom)
    return feats


def forward(cache: GraphCache, params: ModelParams, cfg: ModelConfig,
            timestep: float | None = None) -> dict[int, Tensor]:
    """Embedding, T attention blocks with residuals (re-injecting the initial
    embedding on the configured blocks), final norm. Zero blocks is the
    degenerate case: the embedding is returned untouched."""
    h0 = embed(cache, params, cfg, timestep)
    if cfg.blocks == 0:
        return h0
    lrc = cfg.lrc_set()
    h = h0
    for t in range(1, cfg.blocks + 1):
        a = attention(layer_norm(h, params[f"block{t}.ln1.g"]), params, cfg, cache, f"block{t}.attn")
        h = _add(h, a)
        f = ffn(layer_norm(h, params[f"block{t}.ln2.g"]), params, cfg, cache, f"block{t}.ffn")
        h = _add(h, f)
        if t in lrc:
            h = _add(h, h0)
        for l, hv in h.items():
            if not np.all(np.isfinite(hv.data)):
                raise RuntimeError(f"non-finite features after block {t} (degree {l})")
    return layer_norm(h, params["final_ln.g"])


# ---- heads -----------------------------------------------------------------------

@dataclass
class PredictionBundle:
    energy: Tensor | None = None
    atom_energies: Tensor | None = None
    forces: Tensor | None = None
    pos_noise: Tensor | None = None
    cell_noise: Tensor | None = None
    property_vector: Tensor | None = None
    class_logit: Tensor | None = None

    def value(self, name: str):
        t = getattr(self, name)
        return None if t is None else t.data.copy()


def _scalar_head(feats, params, cfg, cache, prefix: str) -> Tensor:
    """Per-atom invariant readout: per-degree linear, grid nonlinearity, take
    the invariant block, project. Shape (N, out_dim)."""
    h = so3_linear(feats, params, f"{prefix}.lin1", bias=f"{prefix}.lin1.b")
    h = s2_activation_t(h, cache.gridmats, cfg.s2_split)
    n = cache.n_atoms
    flat = h[0].reshape(n, cfg.channels)
    return flat @ params[f"{prefix}.out.W"] + params[f"{prefix}.out.b"]


def _vector_head(feats, params, cfg, cache, prefix: str) -> Tensor:
    """Per-atom equivariant vector via a dedicated attention pass, shape (N, 3)."""
    h = attention(feats, params, cfg, cache, prefix)
    coeff = (h[1] @ params[f"{prefix}.out.l1"]).reshape(cache.n_atoms, 3)
    # degree-1 components (m=-1,0,1) span (y, z, x); reorder to Cartesian
    return ad.concat([coeff[:, 2:3], coeff[:, 0:1], coeff[:, 1:2]], axis=1)


def heads(feats: dict[int, Tensor], cache: GraphCache, params: ModelParams,
          cfg: ModelConfig, modes=("energy", "forces"),
          lattice: np.ndarray | None = None) -> PredictionBundle:
    """Run the requested output heads on trunk features.

    `lattice` is the (possibly perturbed) cell the lattice-noise head couples
    to; it defaults to the cache's lattice.
    """
    bundle = PredictionBundle()
    unknown = set(modes) - set(ALL_MODES)
    if unknown:
        raise ValueError(f"unknown head modes: {sorted(unknown)}")
    if "energy" in modes:
        per_atom = _scalar_head(feats, params, cfg, cache, "head_energy")
        bundle.atom_energies = per_atom.reshape(cache.n_atoms)
        bundle.energy = per_atom.sum()
    if "forces" in modes:
        bundle.forces = _vector_head(feats, params, cfg, cache, "head_force")
    if "pos_noise" in modes:
        bundle.pos_noise = _vector_head(feats, params, cfg, cache, "head_pos")
    if "cell_noise" in modes:
        cell = lattice if lattice is not None else cache.lattice
        if cell is None:
            raise ValueError("cell_noise head needs a lattice")
        m = _scalar_head(feats, params, cfg, cache, "head_cell").sum(axis=0).reshape(3, 3)
        bundle.cell_noise = m @ Tensor(np.asarray(cell, dtype=float))
    if "property" in modes:
        bundle.property_vector = _scalar_head(feats, params, cfg, cache, "head_prop").mean(axis=0)
    if "classify" in modes:
        bundle.class_logit = _scalar_head(feats, params, cfg, cache, "head_cls").mean()
    return bundle


def predict(system: AtomicSystem, params: ModelParams, cfg: ModelConfig,
            modes=("energy", "forces"), timestep: float | None = None,
            cache: GraphCache | None = None) -> PredictionBundle:
    """Graph build, trunk and heads in one call."""
    if cache is None:
        cache = build_cache(system.numbers, system.positions, system.lattice, cfg)
    feats = forward(cache, params, cfg, timestep)
    return heads(feats, cache, params, cfg, modes)


def make_denoiser(params: ModelParams, cfg: ModelConfig):
    """Raw adapter over the noise heads: maps a (numbers, positions, lattice,
    t) state to the heads' displacement fields as numpy arrays. The diffusion
    module converts these into noise estimates; see
    diffusion.noise_from_displacement. Interim sampler states may be
    unphysical; no validation happens here."""

    def denoise(numbers, positions, lattice, t):
        cache = build_cache(numbers, positions, lattice, cfg)
        feats = forward(cache, params, cfg, timestep=t)
        bundle = heads(feats, cache, params, cfg, modes=("pos_noise", "cell_noise"),
                       lattice=lattice)
        return bundle.pos_noise.data.copy(), bundle.cell_noise.data.copy()

    return denoise
