"""Elemental references, formation energies and convex-hull stability.

Formation energies come from least-squares elemental references fitted on
total energies. Stability is judged by the distance to the convex hull of
competing phases, solved per candidate as a small linear program over the
reference set rather than by building the full facet lattice.
"""

import csv
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .structio import SYMBOL_TO_Z

_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")

# Stability thresholds, eV/atom; both criteria are strict inequalities.
FORMATION_THRESHOLD = 0.0
HULL_THRESHOLD = 0.05

_WEIGHT_EPS = 1e-9


class Composition:
    """Integer element counts with convenience views."""

    def __init__(self, counts: dict):
        if not counts:
            raise ValueError("empty composition")
        clean: dict[str, int] = {}
        for sym, cnt in counts.items():
            if sym not in SYMBOL_TO_Z:
                raise ValueError(f"unknown element symbol {sym!r}")
            if int(cnt) != cnt or cnt < 1:
                raise ValueError(f"count for {sym} must be a positive integer, got {cnt}")
            clean[sym] = clean.get(sym, 0) + int(cnt)
        self.counts = dict(sorted(clean.items()))
        self.n_atoms = sum(self.counts.values())

    @classmethod
    def from_formula(cls, formula: str) -> "Composition":
        s = formula.strip()
        counts: dict[str, int] = {}
        pos = 0
        while pos < len(s):
            m = _FORMULA_TOKEN.match(s, pos)
            if m is None:
                raise ValueError(f"cannot parse formula {formula!r} at position {pos}")
            sym, digits = m.groups()
            if sym not in SYMBOL_TO_Z:
                raise ValueError(f"unknown element symbol {sym!r} in formula {formula!r}")
            counts[sym] = counts.get(sym, 0) + (int(digits) if digits else 1)
            pos = m.end()
        return cls(counts)

    @classmethod
    def from_numbers(cls, numbers) -> "Composition":
        from .structio import symbol_of
        counts: dict[str, int] = {}
        for z in numbers:
            sym = symbol_of(int(z))
            counts[sym] = counts.get(sym, 0) + 1
        return cls(counts)

    @property
    def elements(self) -> tuple:
        return tuple(self.counts)

    def fraction(self, symbol: str) -> float:
        return self.counts.get(symbol, 0) / self.n_atoms

    def fractions(self) -> dict:
        return {sym: cnt / self.n_atoms for sym, cnt in self.counts.items()}

    def reduced(self) -> "Composition":
        g = math.gcd(*self.counts.values()) if len(self.counts) > 1 \
            else next(iter(self.counts.values()))
        return Composition({sym: cnt // g for sym, cnt in self.counts.items()})

    def formula(self) -> str:
        return "".join(f"{sym}{cnt if cnt != 1 else ''}" for sym, cnt in self.counts.items())

    def __eq__(self, other):
        return isinstance(other, Composition) and self.counts == other.counts

    def __hash__(self):
        return hash(tuple(self.counts.items()))

    def __repr__(self):
        return f"Composition({self.formula()})"


def _as_composition(value) -> Composition:
    if isinstance(value, Composition):
        return value
    if isinstance(value, str):
        return Composition.from_formula(value)
    return Composition(dict(value))


@dataclass(frozen=True)
class PhaseEntry:
    """A competing phase: composition plus its energy per atom (eV/atom)."""

    composition: Composition
    energy_per_atom: float
    source: str = ""

    def __post_init__(self):
        if not np.isfinite(self.energy_per_atom):
            raise ValueError(f"non-finite energy for {self.composition.formula()}")


# ---- elemental references ----------------------------------------------------------

@dataclass(frozen=True)
class ReferenceFit:
    """Fitted per-element energies plus the fit's residual report."""

    references: dict
    residuals: np.ndarray
    rmse: float


def fit_references(dataset: list) -> ReferenceFit:
    """Least-squares elemental energies from (composition, total energy) records.

    Raises if the composition matrix cannot pin down every element present,
    naming the unidentifiable ones.
    """
    if not dataset:
        raise ValueError("empty reference dataset")
    comps = [_as_composition(c) for c, _ in dataset]
    energies = np.array([float(e) for _, e in dataset])
    elements = sorted({el for c in comps for el in c.elements})
    design = np.array([[c.counts.get(el, 0) for el in elements] for c in comps], dtype=float)

    _, sing, vt = np.linalg.svd(design, full_matrices=True)
    rank = int((sing > 1e-10 * (sing[0] if len(sing) else 1.0)).sum())
    if rank < len(elements):
        null = vt[rank:]
        bad = sorted({elements[j] for j in range(len(elements))
                      if np.abs(null[:, j]).max() > 1e-8})
        raise ValueError("reference energies not identifiable for: " + ", ".join(bad))

    mu, _, _, _ = np.linalg.lstsq(design, energies, rcond=None)
    residuals = energies - design @ mu
    rmse = float(np.sqrt(np.mean(residuals ** 2)))
    return ReferenceFit(dict(zip(elements, mu.tolist())), residuals, rmse)


def formation_energy(total_energy: float, composition, references: dict) -> float:
    """(E_total - sum of elemental references) / N, in eV/atom."""
    comp = _as_composition(composition)
    missing = [el for el in comp.elements if el not in references]
    if missing:
        raise ValueError("missing elemental reference for: " + ", ".join(missing))
    baseline = sum(cnt * references[el] for el, cnt in comp.counts.items())
    return (float(total_energy) - baseline) / comp.n_atoms


# ---- convex hull -------------------------------------------------------------------

@dataclass(frozen=True)
class HullResult:
    """Energy above hull plus the decomposition realizing the hull energy."""

    e_hull: float
    hull_energy: float
    supporting: tuple

    def weights(self) -> dict:
        return {entry.composition.formula(): w for entry, w in self.supporting}


def energy_above_hull(candidate: PhaseEntry, references: list,
                      include_self: bool = False) -> HullResult:
    """Distance (eV/atom) from the candidate to the hull of competing phases.

    Only references made of the candidate's elements compete. The candidate
    itself is excluded unless include_self is set. Mixing weights are atom
    fractions; the optimum decomposition is returned with the result.
    """
    cand_elements = set(candidate.composition.elements)
    pool = [r for r in references if set(r.composition.elements) <= cand_elements]
    if include_self:
        pool = pool + [candidate]
    covered = {el for r in pool for el in r.composition.elements}
    missing = sorted(cand_elements - covered)
    if missing:
        raise ValueError("no reference phase contains: " + ", ".join(missing))

    order = sorted(cand_elements)
    a_eq = np.array([[r.composition.fraction(el) for r in pool] for el in order])
    b_eq = np.array([candidate.composition.fraction(el) for el in order])
    cost = np.array([r.energy_per_atom for r in pool])

    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0.0, None), method="highs")
    if not res.success:
        raise ValueError(f"no decomposition of {candidate.composition.formula()} "
                         f"over the reference set ({res.message})")
    hull_energy = float(res.fun)
    supporting = tuple((pool[k], float(w)) for k, w in enumerate(res.x) if w > _WEIGHT_EPS)
    return HullResult(candidate.energy_per_atom - hull_energy, hull_energy, supporting)


# ---- stability filter --------------------------------------------------------------

@dataclass(frozen=True)
class StabilityVerdict:
    passed: bool
    reasons: tuple


def stability_filter(e_form: float, e_hull: float,
                     form_threshold: float = FORMATION_THRESHOLD,
                     hull_threshold: float = HULL_THRESHOLD) -> StabilityVerdict:
    """Both criteria strict: E_form below form_threshold, E_hull below hull_threshold."""
    if not (np.isfinite(e_form) and np.isfinite(e_hull)):
        raise ValueError("stability_filter needs finite energies")
    reasons = []
    if not e_form < form_threshold:
        reasons.append(f"E_form {e_form:.4g} not below {form_threshold:g} eV/atom")
    if not e_hull < hull_threshold:
        reasons.append(f"E_hull {e_hull:.4g} not below {hull_threshold:g} eV/atom")
    return StabilityVerdict(not reasons, tuple(reasons))


# ---- files -------------------------------------------------------------------------

def read_reference_csv(path) -> list:
    """Load PhaseEntry rows from a CSV with columns formula, energy_per_atom[, source]."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                comp = Composition.from_formula(row["formula"])
                energy = float(row["energy_per_atom"])
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path} line {i}: {exc}") from exc
            entries.append(PhaseEntry(comp, energy, row.get("source", "") or ""))
    return entries


def write_hull_csv(path, rows: list):
    """Write one hull report row per (formula, e_form, HullResult)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["formula", "e_form", "e_hull", "decomposition"])
        for formula, e_form, result in rows:
            decomp = ";".join(f"{entry.composition.formula()}:{w:.6g}"
                              for entry, w in result.supporting)
            writer.writerow([formula, f"{e_form:.10g}", f"{result.e_hull:.10g}", decomp])
