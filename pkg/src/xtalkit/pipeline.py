"""Candidate evaluation skills and the batch screening loop.

Two entry points mirror how a candidate arrives: `skill_structure` takes a
ready structure and judges it; `skill_formula` first generates a structure for
a composition, then applies the stability gates and hands the survivor to the
structure skill. `screen` wraps either path over a whole candidate list with
per-candidate fault isolation and a ranked CSV report.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .structio import AtomicSystem, z_of
from .eqcore import ModelConfig, ModelParams, predict, EnergyStandardizer
from .diffusion import (DiffusionSchedule, LimitParams, generate, limit_params,
                        model_denoiser)
from .thermo import Composition, PhaseEntry, formation_energy, energy_above_hull
from .superprop import CandidateScoreRow, composite_score

# Screening gates, applied in a fixed order; every comparison is strict.
GATE_ORDER = ("generate", "stability", "tc", "confidence")


@dataclass(frozen=True)
class ScreenThresholds:
    tc_min: float = 4.0
    confidence_min: float = 0.5
    e_form_max: float = 0.0
    e_hull_max: float = 0.05

    def __post_init__(self):
        vals = (self.tc_min, self.confidence_min, self.e_form_max, self.e_hull_max)
        if not np.all(np.isfinite(vals)):
            raise ValueError("thresholds must be finite")


@dataclass
class StageResults:
    """Raw values observed at each stage; None marks a stage never reached."""

    generated: bool | None = None
    e_form: float | None = None
    e_hull: float | None = None
    stable: bool | None = None
    tc_pred: float | None = None
    confidence: float | None = None


@dataclass
class Verdict:
    identifier: str
    stages: StageResults
    decision: str  # "high_confidence" or "rejected"
    reason: str = ""  # first failed gate, from GATE_ORDER

    @property
    def accepted(self) -> bool:
        return self.decision == "high_confidence"


@dataclass
class ModelBundle:
    """Everything the skills need: one multi-head model plus thermo context."""

    params: ModelParams
    cfg: ModelConfig
    elemental_refs: dict = field(default_factory=dict)
    reference_phases: list = field(default_factory=list)
    standardizer: EnergyStandardizer | None = None
    energy_tag: str = "default"


def evaluate_structure(system: AtomicSystem, bundle: ModelBundle):
    """(tc_pred, confidence, e_form, e_hull) for one structure.

    Tc comes from the first property-head component, confidence from the
    classifier logit, and the stability numbers from the energy head combined
    with the bundle's elemental references and competing phases.
    """
    out = predict(system, bundle.params, bundle.cfg,
                  modes=("energy", "property", "classify"))
    tc_pred = float(out.property_vector.data[0])
    confidence = float(expit(out.class_logit.data))
    e_total = float(out.energy.data)
    if bundle.standardizer is not None:
        e_total = bundle.standardizer.inverse(bundle.energy_tag, e_total)
    comp = Composition.from_numbers(system.numbers)
    e_form = formation_energy(e_total, comp, bundle.elemental_refs)
    e_hull = energy_above_hull(PhaseEntry(comp, e_form), bundle.reference_phases).e_hull
    return tc_pred, confidence, e_form, e_hull


def _property_gates(stages: StageResults, thresholds: ScreenThresholds):
    if not stages.tc_pred > thresholds.tc_min:
        return "rejected", "tc"
    if not stages.confidence > thresholds.confidence_min:
        return "rejected", "confidence"
    return "high_confidence", ""


def _stability_gate(stages: StageResults, thresholds: ScreenThresholds) -> bool:
    stages.stable = (stages.e_form < thresholds.e_form_max
                     and stages.e_hull < thresholds.e_hull_max)
    return stages.stable


def skill_structure(system: AtomicSystem, bundle: ModelBundle,
                    thresholds: ScreenThresholds | None = None,
                    identifier: str = "") -> Verdict:
    """Judge a ready structure: stability is evaluated and recorded, the
    decision gates on Tc then confidence (both strict)."""
    thresholds = thresholds or ScreenThresholds()
    stages = StageResults()
    tc, conf, e_form, e_hull = evaluate_structure(system, bundle)
    stages.tc_pred, stages.confidence = tc, conf
    stages.e_form, stages.e_hull = e_form, e_hull
    _stability_gate(stages, thresholds)
    decision, reason = _property_gates(stages, thresholds)
    return Verdict(identifier, stages, decision, reason)


def skill_formula(composition, bundle: ModelBundle, schedule: DiffusionSchedule,
                  thresholds: ScreenThresholds | None = None,
                  rng: np.random.Generator | None = None,
                  limits: LimitParams | None = None,
                  identifier: str = "") -> Verdict:
    """Generate a structure for the composition, then gate in the fixed order
    generate -> stability -> tc -> confidence; later stages never run once a
    gate fails."""
    thresholds = thresholds or ScreenThresholds()
    rng = rng or np.random.default_rng()
    comp = composition if isinstance(composition, Composition) \
        else Composition.from_formula(composition)
    numbers = [z_of(sym) for sym, cnt in comp.counts.items() for _ in range(cnt)]

    stages = StageResults()
    lim = limits or limit_params(len(numbers))
    denoiser = model_denoiser(bundle.params, bundle.cfg, schedule, c=lim.c, nu=lim.nu)
    try:
        system = generate(numbers, denoiser, schedule, lim, rng)
    except RuntimeError as exc:
        raise RuntimeError(f"generate: {exc}") from exc
    stages.generated = True
    if np.linalg.det(system.lattice) <= 0.0:
        return Verdict(identifier, stages, "rejected", "generate")

    tc, conf, e_form, e_hull = evaluate_structure(system, bundle)
    stages.e_form, stages.e_hull = e_form, e_hull
    if not _stability_gate(stages, thresholds):
        return Verdict(identifier, stages, "rejected", "stability")
    stages.tc_pred, stages.confidence = tc, conf
    decision, reason = _property_gates(stages, thresholds)
    return Verdict(identifier, stages, decision, reason)


# ---- batch screening ---------------------------------------------------------------

def apply_gates(row: CandidateScoreRow, thresholds: ScreenThresholds) -> Verdict:
    """Gate hand-provided candidate numbers in the fixed order (no model calls)."""
    stages = StageResults(e_form=row.e_form, e_hull=row.e_hull,
                          tc_pred=row.tc_pred, confidence=row.confidence)
    if not _stability_gate(stages, thresholds):
        return Verdict(row.identifier, stages, "rejected", "stability")
    decision, reason = _property_gates(stages, thresholds)
    return Verdict(row.identifier, stages, decision, reason)


@dataclass
class ScreenResult:
    verdicts: list
    errors: list  # (identifier, message)
    ranked: list  # (Verdict, score) accepted candidates, descending score
    exit_code: int  # 0 clean, 2 partial candidate failures

    def summary(self) -> dict:
        counts: dict[str, int] = {"high_confidence": 0, "error": len(self.errors)}
        for v in self.verdicts:
            key = v.decision if v.accepted else v.reason
            counts[key] = counts.get(key, 0) + 1
        return counts


def _rank(verdicts: list) -> list:
    accepted = [v for v in verdicts if v.accepted]
    if not accepted:
        return []
    rows = [CandidateScoreRow(v.identifier, v.stages.tc_pred, v.stages.e_form,
                              v.stages.e_hull, v.stages.confidence) for v in accepted]
    scores = composite_score(rows)
    order = np.argsort(-scores, kind="stable")
    return [(accepted[k], float(scores[k])) for k in order]


def screen(candidates: list, evaluate, thresholds: ScreenThresholds | None = None,
           report_path=None, threads: int = 1) -> ScreenResult:
    """Evaluate (identifier, payload) candidates with per-candidate isolation.

    `evaluate(payload) -> CandidateScoreRow inputs` is any callable returning
    (tc_pred, e_form, e_hull, confidence); exceptions are recorded per
    candidate and the batch continues. Survivors are ranked by the composite
    score over the surviving batch. Output order is by candidate index, so
    the report is deterministic for any thread count.
    """
    thresholds = thresholds or ScreenThresholds()

    def run_one(item):
        identifier, payload = item
        try:
            tc, e_form, e_hull, conf = evaluate(payload)
            row = CandidateScoreRow(identifier, tc, e_form, e_hull, conf)
            return apply_gates(row, thresholds), None
        except Exception as exc:
            return None, (identifier, f"{type(exc).__name__}: {exc}")

    if threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, candidates))
    else:
        outcomes = [run_one(item) for item in candidates]

    verdicts = [v for v, _ in outcomes if v is not None]
    errors = [e for _, e in outcomes if e is not None]
    ranked = _rank(verdicts)
    result = ScreenResult(verdicts, errors, ranked, 2 if errors else 0)
    if report_path is not None:
        write_screen_report(report_path, result)
    return result


def write_screen_report(path, result: ScreenResult):
    """Ranked survivors first, then rejections, then errors."""
    ranked_ids = {v.identifier for v, _ in result.ranked}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identifier", "decision", "reason", "tc_pred", "confidence",
                         "e_form", "e_hull", "score"])

        def fmt(x):
            return "" if x is None else f"{x:.10g}"

        for v, score in result.ranked:
            s = v.stages
            writer.writerow([v.identifier, v.decision, "", fmt(s.tc_pred),
                             fmt(s.confidence), fmt(s.e_form), fmt(s.e_hull),
                             f"{score:.10g}"])
        for v in result.verdicts:
            if v.identifier in ranked_ids:
                continue
            s = v.stages
            writer.writerow([v.identifier, v.decision, v.reason, fmt(s.tc_pred),
                             fmt(s.confidence), fmt(s.e_form), fmt(s.e_hull), ""])
        for identifier, message in result.errors:
            writer.writerow([identifier, "error", message, "", "", "", "", ""])
