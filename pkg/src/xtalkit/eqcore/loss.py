"""Perturbation sampling, target records and the masked multi-task loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor
from ..structio import AtomicSystem
from .config import LossWeights
from .model import PredictionBundle


@dataclass
class Targets:
    """Supervision for one structure; absent entries mask their loss term.

    energy is the total energy (eV), forces (N, 3) eV/A, pos_noise (N, 3) and
    cell_noise (3, 3) are the standard-normal draws a denoiser must recover,
    property_vector is free-form, class_label is 0/1. tag names the source
    dataset for energy standardization.
    """

    energy: float | None = None
    forces: np.ndarray | None = None
    pos_noise: np.ndarray | None = None
    cell_noise: np.ndarray | None = None
    property_vector: np.ndarray | None = None
    class_label: float | None = None
    tag: str | None = None

    def modes(self) -> tuple[str, ...]:
        out = []
        if self.energy is not None:
            out.append("energy")
        if self.forces is not None:
            out.append("forces")
        if self.pos_noise is not None:
            out.append("pos_noise")
        if self.cell_noise is not None:
            out.append("cell_noise")
        if self.property_vector is not None:
            out.append("property")
        if self.class_label is not None:
            out.append("classify")
        return tuple(out)


class EnergyStandardizer:
    """Per-dataset-tag affine energy normalization fitted on training data."""

    def __init__(self):
        self.stats: dict[str, tuple[float, float]] = {}

    def fit(self, tagged_energies: list[tuple[str, float]]) -> "EnergyStandardizer":
        by_tag: dict[str, list[float]] = {}
        for tag, e in tagged_energies:
            by_tag.setdefault(tag, []).append(float(e))
        for tag, vals in by_tag.items():
            arr = np.asarray(vals)
            std = float(arr.std())
            self.stats[tag] = (float(arr.mean()), std if std > 1e-8 else 1.0)
        return self

    def transform(self, tag: str, energy: float) -> float:
        mean, std = self.stats[tag]
        return (float(energy) - mean) / std

    def inverse(self, tag: str, value: float) -> float:
        mean, std = self.stats[tag]
        return float(value) * std + mean


def perturb(system: AtomicSystem, sigma_pos: float = 0.3, sigma_cell: float = 0.3,
            rng: np.random.Generator | None = None):
    """Gaussian-jitter positions (and lattice rows, if periodic).

    Returns (perturbed system, eps_pos, eps_cell); the epsilons are the raw
    standard-normal draws, the denoising targets. The perturbed system skips
    validation since a jittered cell may be unphysical.
    """
    rng = rng or np.random.default_rng()
    eps_pos = rng.standard_normal(system.positions.shape)
    positions = system.positions + sigma_pos * eps_pos
    if system.lattice is not None:
        eps_cell = rng.standard_normal((3, 3))
        lattice = system.lattice + sigma_cell * eps_cell
    else:
        eps_cell = None
        lattice = None
    jittered = AtomicSystem(system.numbers.copy(), positions, lattice,
                            dict(system.labels), validate=False)
    return jittered, eps_pos, eps_cell


def _bce_with_logit(logit: Tensor, label: float) -> Tensor:
    # max(l, 0) - l*y + log(1 + exp(-|l|)), stable for either sign
    a = logit.abs()
    return (logit + a) * 0.5 - logit * float(label) + ((-a).exp() + 1.0).log()


def multitask_loss(bundle: PredictionBundle, targets: Targets,
                   weights: LossWeights | None = None,
                   standardizer: EnergyStandardizer | None = None):
    """Weighted sum of mean-absolute-error terms over the supplied targets.

    A term with no target contributes exactly zero, to the value and to every
    gradient: it is never built into the tape. Returns (loss, breakdown) where
    breakdown maps term name to its unweighted float value.
    """
    weights = weights or LossWeights()
    terms: list[Tensor] = []
    breakdown: dict[str, float] = {}

    def need(name: str) -> Tensor:
        t = getattr(bundle, name)
        if t is None:
            raise ValueError(f"target {name!r} supplied but the bundle lacks that head")
        return t

    if targets.energy is not None:
        e_t = targets.energy
        if standardizer is not None and targets.tag is not None:
            e_t = standardizer.transform(targets.tag, e_t)
        term = (need("energy") - float(e_t)).abs()
        terms.append(term * weights.energy)
        breakdown["energy"] = term.item()
    if targets.forces is not None:
        term = (need("forces") - np.asarray(targets.forces, dtype=float)).abs().mean()
        terms.append(term * weights.force)
        breakdown["forces"] = term.item()
    if targets.pos_noise is not None:
        term = (need("pos_noise") - np.asarray(targets.pos_noise, dtype=float)).abs().mean()
        terms.append(term * weights.pos)
        breakdown["pos_noise"] = term.item()
    if targets.cell_noise is not None:
        term = (need("cell_noise") - np.asarray(targets.cell_noise, dtype=float)).abs().mean()
        terms.append(term * weights.cell)
        breakdown["cell_noise"] = term.item()
    if targets.property_vector is not None:
        term = (need("property_vector") - np.asarray(targets.property_vector, dtype=float)).abs().mean()
        terms.append(term * weights.prop)
        breakdown["property"] = term.item()
    if targets.class_label is not None:
        term = _bce_with_logit(need("class_logit"), targets.class_label)
        terms.append(term * weights.classify)
        breakdown["classify"] = term.item()

    if not terms:
        raise ValueError("all targets masked; nothing to optimize")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, breakdown
