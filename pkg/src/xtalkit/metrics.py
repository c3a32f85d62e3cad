"""Evaluation metrics: error statistics, classification scores, and a
deterministic structure matcher.

The matcher implements a documented subset of the usual crystal-matching
semantics: equal reduced compositions and equal atom counts, lattice agreement
after greedy basis reduction, then a species-respecting site assignment under
one global fractional translation. No supercell or primitive-cell detection is
attempted. Displacements are measured with the average metric tensor of the
two cells and normalized by the cube root of the volume per atom.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .structio import AtomicSystem


# ---- regression metrics ------------------------------------------------------------

def mae_energy_per_atom(pred_energies, true_energies, atom_counts) -> float:
    """Mean |energy error| / atom count, reported in meV/atom."""
    pred = np.asarray(pred_energies, dtype=float)
    true = np.asarray(true_energies, dtype=float)
    counts = np.asarray(atom_counts, dtype=float)
    if not (pred.shape == true.shape == counts.shape):
        raise ValueError(f"length mismatch: {pred.shape}, {true.shape}, {counts.shape}")
    return float(np.mean(np.abs(pred - true) / counts)) * 1000.0


def mae_property(preds, truths) -> float:
    pred = np.asarray(preds, dtype=float)
    true = np.asarray(truths, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return float(np.mean(np.abs(pred - true)))


def rmse_components(preds, truths) -> float:
    """Root mean square over every scalar component of the arrays."""
    pred = np.asarray(preds, dtype=float)
    true = np.asarray(truths, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def r_squared(preds, truths) -> float:
    """1 - SS_res / SS_tot over the target variance."""
    pred = np.asarray(preds, dtype=float)
    true = np.asarray(truths, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if true.size < 2:
        raise ValueError("r_squared needs at least two samples")
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r_squared undefined for constant truths")
    ss_res = float(np.sum((true - pred) ** 2))
    return 1.0 - ss_res / ss_tot


# ---- classification ----------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    auc: float


def _confusion_rates(tp: int, fp: int, fn: int, tn: int):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return precision, recall, f1


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationReport:
    """Threshold metrics plus ROC-AUC as the pair-ranking statistic.

    A sample is predicted positive when its score is at or above the
    threshold. AUC counts positive-negative score pairs ordered correctly,
    with half credit for ties; it needs both classes present.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {y.shape}")
    if not np.isfinite(s).all():
        raise ValueError("non-finite scores")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined with a single class")

    predicted = s >= threshold
    tp = int((predicted & y).sum())
    fp = int((predicted & ~y).sum())
    fn = int((~predicted & y).sum())
    tn = int((~predicted & ~y).sum())
    precision, recall, f1 = _confusion_rates(tp, fp, fn, tn)

    ranks = rankdata(s)
    auc = (float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return ClassificationReport(tp, fp, fn, tn, precision, recall, f1, auc)


def report_from_confusion(tp: int, fp: int, fn: int, tn: int):
    """(precision, recall, f1) straight from confusion counts."""
    return _confusion_rates(tp, fp, fn, tn)


# ---- structure matching ------------------------------------------------------------

@dataclass(frozen=True)
class MatchTolerances:
    stol: float = 0.5
    angle_tol: float = 10.0
    ltol: float = 0.3

    def __post_init__(self):
        if min(self.stol, self.angle_tol, self.ltol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class MatchReport:
    matched: bool
    site_rmse_normalized: float | None
    reason: str = ""


def _reduce_basis(lattice: np.ndarray) -> np.ndarray:
    """Greedy pairwise shortening of the three row vectors."""
    basis = lattice.astype(float).copy()
    for _ in range(100):
        changed = False
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                # integer shift of row i along row j that shortens it most
                shift = round(float(basis[i] @ basis[j]) / float(basis[j] @ basis[j]))
                if shift != 0:
                    trial = basis[i] - shift * basis[j]
                    if trial @ trial < basis[i] @ basis[i] - 1e-12:
                        basis[i] = trial
                        changed = True
        if not changed:
            return basis
    return basis


def _lengths_and_angles(basis: np.ndarray):
    lengths = np.linalg.norm(basis, axis=1)
    order = np.argsort(lengths)
    b = basis[order]
    lengths = lengths[order]
    angles = []
    for i, j in ((0, 1), (0, 2), (1, 2)):
        cosang = float(b[i] @ b[j]) / (lengths[i] * lengths[j])
        ang = math.degrees(math.acos(min(1.0, max(-1.0, cosang))))
        # reduced vectors carry an arbitrary sign, so fold onto [0, 90]
        angles.append(min(ang, 180.0 - ang))
    return lengths, np.array(angles)


def _reduced_counts(numbers: np.ndarray) -> dict:
    uniq, counts = np.unique(numbers, return_counts=True)
    g = math.gcd(*counts.tolist()) if len(counts) > 1 else int(counts[0])
    return {int(z): int(c) // g for z, c in zip(uniq, counts)}


def _site_search(sys_a: AtomicSystem, sys_b: AtomicSystem, g_avg: np.ndarray,
                 norm_len: float, stol: float):
    """Best species-blocked assignment over anchor translations a -> b.

    Returns the lowest RMS of normalized site displacements among translations
    whose worst displacement stays within stol, or None.
    """
    frac_a = sys_a.positions @ np.linalg.inv(sys_a.lattice)
    frac_b = sys_b.positions @ np.linalg.inv(sys_b.lattice)
    numbers = sys_a.numbers
    species = np.unique(numbers)
    anchor_z = species[np.argmin([np.sum(numbers == z) for z in species])]
    anchor = frac_a[np.flatnonzero(numbers == anchor_z)[0]]

    best = None
    for target in frac_b[sys_b.numbers == anchor_z]:
        tau = target - anchor
        disp = []
        for z in species:
            fa = frac_a[numbers == z] + tau
            fb = frac_b[sys_b.numbers == z]
            delta = fb[None, :, :] - fa[:, None, :]
            delta -= np.round(delta)
            cost = np.einsum("ijk,kl,ijl->ij", delta, g_avg, delta)
            rows, cols = linear_sum_assignment(cost)
            disp.extend(np.sqrt(cost[rows, cols]) / norm_len)
        disp = np.asarray(disp)
        if disp.max() <= stol:
            rms = float(np.sqrt(np.mean(disp ** 2)))
            if best is None or rms < best:
                best = rms
    return best


def structure_match(sys1: AtomicSystem, sys2: AtomicSystem,
                    tol: MatchTolerances | None = None) -> MatchReport:
    """Tolerance-based equivalence of two periodic structures.

    Matched when reduced compositions and atom counts agree, reduced-cell
    lengths agree within relative ltol and folded angles within angle_tol
    degrees, and some global fractional translation aligns all sites of equal
    species within stol (normalized). The reported RMSE is over the aligned
    normalized displacements.
    """
    tol = tol or MatchTolerances()
    if sys1.lattice is None or sys2.lattice is None:
        raise ValueError("structure_match needs periodic systems")
    if _reduced_counts(sys1.numbers) != _reduced_counts(sys2.numbers):
        return MatchReport(False, None, "compositions differ")
    if sys1.n_atoms != sys2.n_atoms:
        return MatchReport(False, None, "atom counts differ")

    len1, ang1 = _lengths_and_angles(_reduce_basis(sys1.lattice))
    len2, ang2 = _lengths_and_angles(_reduce_basis(sys2.lattice))
    rel = np.abs(len1 - len2) / np.minimum(len1, len2)
    if rel.max() > tol.ltol:
        return MatchReport(False, None, f"lattice lengths differ by {rel.max():.3g} (rel)")
    dang = np.abs(ang1 - ang2)
    if dang.max() > tol.angle_tol:
        return MatchReport(False, None, f"lattice angles differ by {dang.max():.3g} deg")

    g1 = sys1.lattice @ sys1.lattice.T
    g2 = sys2.lattice @ sys2.lattice.T
    g_avg = 0.5 * (g1 + g2)
    volume = math.sqrt(max(float(np.linalg.det(g_avg)), 0.0))
    norm_len = (volume / sys1.n_atoms) ** (1.0 / 3.0)

    # search both directions so the report is symmetric in its arguments
    rms_fwd = _site_search(sys1, sys2, g_avg, norm_len, tol.stol)
    rms_rev = _site_search(sys2, sys1, g_avg, norm_len, tol.stol)
    candidates = [r for r in (rms_fwd, rms_rev) if r is not None]
    if not candidates:
        return MatchReport(False, None, "no site alignment within stol")
    return MatchReport(True, min(candidates))


def match_rate_and_rmse(pred_systems: list, true_systems: list,
                        tol: MatchTolerances | None = None):
    """Fraction of truths recovered (percent) and mean normalized RMSE over
    the matched pairs (None if nothing matched)."""
    if len(pred_systems) != len(true_systems):
        raise ValueError(f"length mismatch: {len(pred_systems)} vs {len(true_systems)}")
    rmses = []
    for pred, true in zip(pred_systems, true_systems):
        report = structure_match(pred, true, tol)
        if report.matched:
            rmses.append(report.site_rmse_normalized)
    rate = 100.0 * len(rmses) / len(true_systems)
    return rate, (float(np.mean(rmses)) if rmses else None)


# ---- reports -----------------------------------------------------------------------

def write_metrics_csv(path, rows: list):
    """Rows of (metric name, value, count)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "count"])
        for name, value, count in rows:
            writer.writerow([name, f"{value:.10g}", count])
