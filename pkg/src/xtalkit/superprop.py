"""Superconductivity formulas: Allen-Dynes Tc, screening score, demagnetization.

Small closed-form pieces shared by the screening pipeline. Everything here is
a pure function over plain numbers; model inference and stability live in
their own modules.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MU_STAR = 0.1

# Composite score mixing weights over min-max normalized columns.
_W_TC = 0.5
_W_EFORM = 0.25
_W_EHULL = 0.25


@dataclass(frozen=True)
class EPCInputs:
    """Electron-phonon coupling strength, log-average phonon frequency (K),
    and the Coulomb pseudopotential."""

    lam: float
    omega_log: float
    mu_star: float = DEFAULT_MU_STAR

    def __post_init__(self):
        if self.omega_log < 0:
            raise ValueError(f"omega_log must be >= 0, got {self.omega_log}")
        if not 0.0 <= self.mu_star <= 0.3:
            raise ValueError(f"mu_star outside [0, 0.3]: {self.mu_star}")


def allen_dynes_tc(inputs: EPCInputs) -> float:
    """Modified McMillan critical temperature in K.

    Returns 0 when the coupling is too weak for the formula's denominator to
    stay positive; screening treats that as a non-superconductor rather than
    an error.
    """
    denom = inputs.lam - inputs.mu_star * (1.0 + 0.62 * inputs.lam)
    if denom <= 0.0:
        return 0.0
    exponent = -1.04 * (1.0 + inputs.lam) / denom
    return (inputs.omega_log / 1.2) * math.exp(exponent)


# ---- composite screening score -----------------------------------------------------

@dataclass(frozen=True)
class CandidateScoreRow:
    """Score inputs for one candidate."""

    identifier: str
    tc_pred: float
    e_form: float
    e_hull: float
    confidence: float = 1.0

    def __post_init__(self):
        vals = (self.tc_pred, self.e_form, self.e_hull, self.confidence)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite score inputs for {self.identifier!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0,1] for {self.identifier!r}")


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def composite_score(rows: list) -> np.ndarray:
    """0.5 n(Tc) - 0.25 n(E_form) - 0.25 n(E_hull) with per-batch min-max columns.

    Normalization bounds come from the presented batch, so scores are only
    comparable within one call; a constant column contributes 0 everywhere.
    """
    if not rows:
        raise ValueError("composite_score needs at least one row")
    tc = _minmax(np.array([r.tc_pred for r in rows], dtype=float))
    ef = _minmax(np.array([r.e_form for r in rows], dtype=float))
    eh = _minmax(np.array([r.e_hull for r in rows], dtype=float))
    return _W_TC * tc - _W_EFORM * ef - _W_EHULL * eh


def write_score_csv(path, rows: list, scores=None):
    """Score table sorted by descending score."""
    scores = composite_score(rows) if scores is None else np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identifier", "tc_pred", "e_form", "e_hull", "confidence", "score"])
        for k in order:
            r = rows[k]
            writer.writerow([r.identifier, f"{r.tc_pred:.10g}", f"{r.e_form:.10g}",
                             f"{r.e_hull:.10g}", f"{r.confidence:.10g}", f"{scores[k]:.10g}"])


# ---- demagnetization ---------------------------------------------------------------

def demag_factor(height: float, diameter: float) -> float:
    """Equivalent axial demagnetization factor of a cylinder, 1/(1 + 1.6 H/D)."""
    if height <= 0 or diameter <= 0:
        raise ValueError(f"sample dimensions must be positive, got H={height}, D={diameter}")
    return 1.0 / (1.0 + 1.6 * height / diameter)


def correct_susceptibility(chi_obs: float, n_factor: float) -> float:
    """chi_true = chi_obs / (1 - N chi_obs), with chi in 4 pi chi units."""
    denom = 1.0 - n_factor * chi_obs
    if abs(denom) < 1e-12:
        raise ValueError(f"demagnetization correction singular: 1 - N*chi = {denom:g}")
    return chi_obs / denom
