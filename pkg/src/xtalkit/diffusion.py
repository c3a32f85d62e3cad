"""Prior-informed Cartesian diffusion over atom positions and lattice rows.

The forward process pulls positions toward the center of a typical cell and
lattice rows toward an isotropic cell of the expected size, instead of toward
zero; the reverse process alternates a Langevin corrector on positions with a
deterministic predictor on positions and lattice. Noise prediction comes from
an external denoiser callable, keeping this module free of model internals.
"""

import math
from dataclasses import dataclass

import numpy as np

from .structio import AtomicSystem
from .eqcore import ModelConfig, TrainConfig, ModelParams, make_denoiser
from .eqcore.model import build_cache, forward, heads

# Cell-size prior: mean lattice scale mu = (c N)^(1/3) Angstrom and spread
# sigma = (nu N)^(1/3). The alternative density constant below matches a looser
# packing sometimes preferred for small cells.
DEFAULT_C = 2.0
ALT_C = 0.5 ** (2.0 / 3.0)
DEFAULT_NU = 0.0075 ** (2.0 / 3.0)

# Cosine schedule offset and the conventional cap on per-step corruption.
_COSINE_S = 0.008
_MAX_BETA = 0.999
_LINEAR_BETA = (1e-4, 0.02)

# Corrector step size delta_t = rate * (1 - alpha_bar_t).
DEFAULT_CORRECTOR_RATE = 0.05


# ---- schedule ----------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step retention factors alpha_t and their running products, t = 1..T."""

    kind: str
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.alphas)

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product through step t; t = 0 returns 1 by convention."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int):
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside 1..{self.n_steps}")


def make_schedule(n_steps: int, kind: str = "cosine") -> DiffusionSchedule:
    """Build a noise schedule. Kinds: "cosine" (default) and "linear"."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if kind == "cosine":
        ts = np.arange(n_steps + 1) / n_steps
        f = np.cos((ts + _COSINE_S) / (1.0 + _COSINE_S) * (np.pi / 2.0)) ** 2
        raw = f[1:] / f[:-1]
        alphas = np.clip(raw, 1.0 - _MAX_BETA, None)
    elif kind == "linear":
        betas = np.linspace(_LINEAR_BETA[0], _LINEAR_BETA[1], n_steps)
        alphas = 1.0 - betas
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(kind, alphas, np.cumprod(alphas))


# ---- limit distribution ------------------------------------------------------------

@dataclass(frozen=True)
class LimitParams:
    """Size-aware endpoint of the forward process for an N-atom cell."""

    mu: float
    sigma: float
    c: float
    nu: float
    n_atoms: int


def limit_params(n_atoms: int, c: float = DEFAULT_C, nu: float = DEFAULT_NU) -> LimitParams:
    if n_atoms < 1:
        raise ValueError(f"n_atoms must be >= 1, got {n_atoms}")
    mu = (c * n_atoms) ** (1.0 / 3.0)
    sigma = (nu * n_atoms) ** (1.0 / 3.0)
    return LimitParams(mu, sigma, c, nu, n_atoms)


# ---- forward process ---------------------------------------------------------------

def forward_sample(positions: np.ndarray, lattice: np.ndarray, t: int,
                   schedule: DiffusionSchedule, limits: LimitParams,
                   rng: np.random.Generator):
    """Draw (X_t, L_t) from the closed-form forward marginal at step t.

    Positions drift toward the cell center mu/2 per coordinate with unit noise
    scale; lattice rows drift toward mu * I with noise scale sigma. Returns
    (X_t, L_t, eps_x, eps_L) with the standard-normal draws that produced the
    sample, which are the denoiser's regression targets.
    """
    ab = schedule.alpha_bar(t)
    root = math.sqrt(ab)
    spread = math.sqrt(1.0 - ab)
    eps_x = rng.standard_normal(positions.shape)
    eps_l = rng.standard_normal((3, 3))
    center = limits.mu / 2.0
    x_t = root * positions + (1.0 - root) * center + spread * eps_x
    l_t = root * lattice + (1.0 - root) * limits.mu * np.eye(3) + spread * limits.sigma * eps_l
    return x_t, l_t, eps_x, eps_l


# ---- reverse process ---------------------------------------------------------------

def corrector_delta(t: int, schedule: DiffusionSchedule,
                    rate: float = DEFAULT_CORRECTOR_RATE) -> float:
    """Langevin step size scheduled by the marginal variance at step t."""
    return rate * (1.0 - schedule.alpha_bar(t))


def corrector_step(positions: np.ndarray, eps_pos: np.ndarray, delta: float,
                   rng: np.random.Generator) -> np.ndarray:
    """One Langevin move on positions only: X - delta * eps + sqrt(2 delta) * eta."""
    if delta < 0:
        raise ValueError(f"negative corrector step {delta}")
    if delta == 0.0:
        return positions.copy()
    eta = rng.standard_normal(positions.shape)
    return positions - delta * eps_pos + math.sqrt(2.0 * delta) * eta


def predictor_step(positions: np.ndarray, lattice: np.ndarray,
                   eps_pos: np.ndarray, eps_cell: np.ndarray, t: int,
                   schedule: DiffusionSchedule, limits: LimitParams):
    """Deterministic reverse step t -> t-1 around the shifted means."""
    if t < 1:
        raise ValueError(f"predictor needs t >= 1, got {t}")
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    coef = (1.0 - a) / math.sqrt(1.0 - ab)
    center = limits.mu / 2.0
    anchor = limits.mu * np.eye(3)
    x_prev = center + (positions - center - coef * eps_pos) / math.sqrt(a)
    l_prev = anchor + (lattice - anchor - coef * limits.sigma * eps_cell) / math.sqrt(a)
    return x_prev, l_prev


# ---- generation --------------------------------------------------------------------

def prior_lattice(limits: LimitParams, rng: np.random.Generator) -> np.ndarray:
    """One draw of the lattice limit distribution, entrywise N(mu*I, sigma^2)."""
    return limits.mu * np.eye(3) + limits.sigma * rng.standard_normal((3, 3))


def prior_positions(n_atoms: int, limits: LimitParams, rng: np.random.Generator) -> np.ndarray:
    """One draw of the position limit distribution, N(mu/2, 1) per coordinate."""
    return limits.mu / 2.0 + rng.standard_normal((n_atoms, 3))


def generate(numbers, denoiser, schedule: DiffusionSchedule,
             limits: LimitParams | None = None,
             rng: np.random.Generator | None = None,
             corrector_rate: float = DEFAULT_CORRECTOR_RATE,
             trace_path=None, max_prior_tries: int = 1000) -> AtomicSystem:
    """Sample one structure for a fixed composition.

    `denoiser(numbers, positions, lattice, t_frac) -> (eps_pos, eps_cell)` is
    queried twice per step: once for the corrector and again, after the
    corrector has moved the positions, for the predictor. Atom identities
    never change. Fractional coordinates are wrapped into [0, 1) only after
    the final step. An optional trace CSV records one row per step.
    """
    numbers = np.asarray(numbers, dtype=int)
    n = len(numbers)
    if n < 1:
        raise ValueError("empty composition")
    rng = rng or np.random.default_rng()
    limits = limits or limit_params(n)

    lattice = prior_lattice(limits, rng)
    tries = 1
    while np.linalg.det(lattice) <= 0.0:
        if tries >= max_prior_tries:
            raise RuntimeError(f"no positive-volume prior lattice in {max_prior_tries} draws")
        lattice = prior_lattice(limits, rng)
        tries += 1
    positions = prior_positions(n, limits, rng)

    steps = schedule.n_steps
    rows = []
    for t in range(steps, 0, -1):
        t_frac = t / steps
        eps_pos, _ = _query(denoiser, numbers, positions, lattice, t_frac, t)
        positions = corrector_step(positions, eps_pos, corrector_delta(t, schedule, corrector_rate), rng)
        eps_pos, eps_cell = _query(denoiser, numbers, positions, lattice, t_frac, t)
        positions, lattice = predictor_step(positions, lattice, eps_pos, eps_cell,
                                            t, schedule, limits)
        if trace_path is not None:
            mean_norm = float(np.linalg.norm(eps_pos, axis=1).mean())
            rows.append((t, mean_norm, float(np.linalg.det(lattice))))

    frac = positions @ np.linalg.inv(lattice)
    frac -= np.floor(frac)
    positions = frac @ lattice

    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write("t,mean_pred_noise,det_lattice\n")
            for t, mean_norm, det in rows:
                fh.write(f"{t},{mean_norm:.10g},{det:.10g}\n")

    # A badly trained denoiser can still end on a left-handed or flat cell;
    # downstream screening rejects those, so no validation here.
    return AtomicSystem(numbers, positions, lattice, validate=False)


def _query(denoiser, numbers, positions, lattice, t_frac, t):
    eps_pos, eps_cell = denoiser(numbers, positions, lattice, t_frac)
    eps_pos = np.asarray(eps_pos, dtype=float)
    eps_cell = np.asarray(eps_cell, dtype=float)
    if not (np.isfinite(eps_pos).all() and np.isfinite(eps_cell).all()):
        raise RuntimeError(f"non-finite model noise at step {t}")
    return eps_pos, eps_cell


def oracle_denoiser(system: AtomicSystem, schedule: DiffusionSchedule,
                    limits: LimitParams):
    """Denoiser that back-solves the exact forward noise for one known structure.

    Given any interim state it returns the epsilons that would have produced
    that state from the reference structure, so the reverse chain contracts
    onto the reference exactly. Used for sampler verification.
    """
    x0, l0 = system.positions, system.lattice

    def denoise(numbers, positions, lattice, t_frac):
        t = int(round(t_frac * schedule.n_steps))
        ab = schedule.alpha_bar(t)
        root = math.sqrt(ab)
        spread = math.sqrt(1.0 - ab)
        if spread == 0.0:
            return np.zeros_like(x0), np.zeros((3, 3))
        center = limits.mu / 2.0
        eps_x = (positions - root * x0 - (1.0 - root) * center) / spread
        eps_l = (lattice - root * l0 - (1.0 - root) * limits.mu * np.eye(3)) / (spread * limits.sigma)
        return eps_x, eps_l

    return denoise


# ---- network parameterization ------------------------------------------------------

def noise_from_displacement(positions, lattice, disp_pos, disp_cell, t: int,
                            schedule: DiffusionSchedule, limits: LimitParams):
    """Turn predicted clean-state displacements into forward-noise estimates.

    The network head outputs a displacement field (clean state minus current
    state) for positions and cell rows. Substituting that into the forward
    corruption identity gives the implied noise: an analytic term that only
    depends on the current deviation from the prior mean, plus the learned
    displacement scaled by the signal level. Keeping the learned part a
    bounded displacement instead of raw noise keeps its magnitude of the order
    of interatomic distances at every noise level, which makes it far easier
    to regress; the unbounded part is supplied in closed form.

    Works on plain arrays and on autodiff tensors alike.
    """
    ab = schedule.alpha_bar(t)
    root = math.sqrt(ab)
    spread = math.sqrt(1.0 - ab)
    drift = (1.0 - root) / spread
    gain = root / spread
    center = limits.mu / 2.0
    eps_x = drift * (positions - center) - gain * disp_pos
    eps_l = (drift * (lattice - limits.mu * np.eye(3)) - gain * disp_cell) * (1.0 / limits.sigma)
    return eps_x, eps_l


def model_denoiser(params: ModelParams, cfg: ModelConfig, schedule: DiffusionSchedule,
                   c: float = DEFAULT_C, nu: float = DEFAULT_NU):
    """Wrap a trained network as the noise denoiser `generate` consumes.

    The network's noise heads are read as clean-state displacements and
    converted with `noise_from_displacement`, matching how the training loss
    interprets them.
    """
    raw = make_denoiser(params, cfg)
    steps = schedule.n_steps

    def denoise(numbers, positions, lattice, t_frac):
        t = int(round(t_frac * steps))
        limits = limit_params(len(numbers), c, nu)
        disp_pos, disp_cell = raw(numbers, positions, lattice, t_frac)
        return noise_from_displacement(positions, lattice, disp_pos, disp_cell,
                                       t, schedule, limits)

    return denoise


# ---- denoiser training -------------------------------------------------------------

def make_diffusion_loss(cfg: ModelConfig, tc: TrainConfig, schedule: DiffusionSchedule,
                        c: float = DEFAULT_C, nu: float = DEFAULT_NU,
                        t_weights=None):
    """Batch loss for denoiser training; dataset items are AtomicSystem.

    Each call draws a fresh timestep and fresh noise per structure, corrupts
    it with the forward process, and scores the model's noise prediction on
    the corrupted state. The prediction is assembled from the network's
    displacement outputs exactly as at sampling time, and scored against the
    drawn noise with mean absolute error. Plugs into the generic training loop.

    `t_weights` optionally biases which corruption levels are drawn (one
    non-negative weight per step, uniform when omitted). Sampling quality is
    most sensitive to the low-noise steps, so oversampling them is a useful
    curriculum on small datasets; it reweights the objective without changing
    what a perfect denoiser would output.
    """
    steps = schedule.n_steps
    t_prob = None
    if t_weights is not None:
        t_prob = np.asarray(t_weights, dtype=float)
        if t_prob.shape != (steps,) or (t_prob < 0).any() or t_prob.sum() <= 0:
            raise ValueError("t_weights needs one non-negative weight per step")
        t_prob = t_prob / t_prob.sum()

    def batch_loss(params: ModelParams, batch: list, rng: np.random.Generator):
        w = tc.loss_weights
        total = None
        for system in batch:
            limits = limit_params(system.n_atoms, c, nu)
            if t_prob is None:
                t = int(rng.integers(1, steps + 1))
            else:
                t = int(rng.choice(np.arange(1, steps + 1), p=t_prob))
            x_t, l_t, eps_x, eps_l = forward_sample(system.positions, system.lattice,
                                                    t, schedule, limits, rng)
            cache = build_cache(system.numbers, x_t, l_t, cfg)
            feats = forward(cache, params, cfg, timestep=t / steps)
            bundle = heads(feats, cache, params, cfg, modes=("pos_noise", "cell_noise"))
            eps_x_hat, eps_l_hat = noise_from_displacement(
                x_t, l_t, bundle.pos_noise, bundle.cell_noise, t, schedule, limits)
            loss = (eps_x_hat - eps_x).abs().mean() * w.pos \
                + (eps_l_hat - eps_l).abs().mean() * w.cell
            total = loss if total is None else total + loss
        return total * (1.0 / len(batch))

    return batch_loss
