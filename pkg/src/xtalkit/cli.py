"""Command line front end.

Each subcommand is a thin wrapper over one library entry point; all heavy
logic lives in the modules. JSON configs carry model and training settings,
CSV in and out everywhere else. Exit codes: 0 clean, 2 partial per-candidate
failures during screening, 1 fatal.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np
from scipy.special import expit

from . import diffusion, geometry, metrics, pipeline, superprop, thermo
from .eqcore import (ModelConfig, TrainConfig, EnergyStandardizer, Targets,
                     load_checkpoint, save_checkpoint, predict,
                     prepare_samples, make_supervised_loss, train, write_loss_csv)
from .structio import load_manifest, read_poscar_file, write_poscar_file, z_of


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SystemExit_(message)


class SystemExit_(Exception):
    pass


def _common(sub: argparse.ArgumentParser):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--threads", type=int, default=1)


def _load_config(args, required=()):
    if args.config is None:
        if required:
            raise ValueError(f"--config required with keys: {', '.join(required)}")
        return {}
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ValueError(f"config missing keys: {', '.join(missing)}")
    return cfg


def _out_path(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _load_model(conf):
    params, cfg = load_checkpoint(conf["checkpoint"])
    return params, cfg


def _schedule_from(conf):
    sched = conf.get("schedule", {})
    return diffusion.make_schedule(int(sched.get("steps", 50)),
                                   sched.get("kind", "cosine"))


# ---- subcommands -------------------------------------------------------------------

def _cmd_parse(args) -> int:
    for path in args.structures:
        system = read_poscar_file(path)
        comp = thermo.Composition.from_numbers(system.numbers)
        volume = float(abs(np.linalg.det(system.lattice)))
        print(f"{path}: {comp.formula()} atoms={system.n_atoms} volume={volume:.6g} A^3")
        if args.out != ".":
            write_poscar_file(system, _out_path(args, os.path.basename(path)))
    return 0


def _cmd_graph(args) -> int:
    for path in args.structures:
        system = read_poscar_file(path)
        graph = geometry.build_graph(system, args.cutoff, args.cap or None)
        stem = os.path.splitext(os.path.basename(path))[0]
        out = _out_path(args, f"{stem}_edges.txt")
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(geometry.dump_edges(graph))
        print(f"{path}: {len(graph.edges)} edges -> {out}")
    return 0


def _targets_from_labels(labels: dict) -> Targets:
    prop = labels.get("property")
    if prop is not None:
        prop = np.atleast_1d(np.asarray(prop, dtype=float))
    return Targets(energy=labels.get("energy"),
                   property_vector=prop,
                   class_label=labels.get("label"),
                   tag=labels.get("tag", "default"))


def _cmd_train(args) -> int:
    conf = _load_config(args, required=("mode", "manifest"))
    model_cfg = ModelConfig(**conf.get("model", {}))
    train_cfg = TrainConfig(**{"seed": args.seed, **conf.get("train", {})})
    systems = load_manifest(conf["manifest"]).load_all()

    if conf["mode"] == "supervised":
        pairs = [(s, _targets_from_labels(s.labels)) for s in systems]
        tagged = [(t.tag, t.energy) for _, t in pairs if t.energy is not None]
        standardizer = EnergyStandardizer().fit(tagged) if tagged else None
        dataset = prepare_samples(pairs, model_cfg)
        batch_loss = make_supervised_loss(model_cfg, train_cfg, standardizer)
    elif conf["mode"] == "diffusion":
        dataset = systems
        batch_loss = diffusion.make_diffusion_loss(
            model_cfg, train_cfg, _schedule_from(conf),
            c=conf.get("c", diffusion.DEFAULT_C), nu=conf.get("nu", diffusion.DEFAULT_NU))
    else:
        raise ValueError(f"unknown training mode {conf['mode']!r}")

    params, history = train(dataset, batch_loss, model_cfg, train_cfg)
    save_checkpoint(_out_path(args, "checkpoint.npz"), params, model_cfg)
    write_loss_csv(history, _out_path(args, "loss.csv"))
    print(f"trained {train_cfg.epochs} epochs, final loss {history[-1]['loss']:.6g}")
    return 0


def _cmd_predict(args) -> int:
    conf = _load_config(args, required=("checkpoint",))
    params, cfg = _load_model(conf)
    out = _out_path(args, "predictions.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identifier", "energy", "tc_pred", "confidence"])
        for path in args.structures:
            system = read_poscar_file(path)
            bundle = predict(system, params, cfg, modes=("energy", "property", "classify"))
            writer.writerow([path, f"{float(bundle.energy.data):.10g}",
                             f"{float(bundle.property_vector.data[0]):.10g}",
                             f"{float(expit(bundle.class_logit.data)):.10g}"])
    print(f"wrote {out}")
    return 0


def _cmd_generate(args) -> int:
    conf = _load_config(args, required=("checkpoint",))
    params, cfg = _load_model(conf)
    schedule = _schedule_from(conf)
    comp = thermo.Composition.from_formula(args.formula)
    numbers = [z_of(sym) for sym, cnt in comp.counts.items() for _ in range(cnt)]
    limits = diffusion.limit_params(len(numbers),
                                    conf.get("c", diffusion.DEFAULT_C),
                                    conf.get("nu", diffusion.DEFAULT_NU))
    rng = np.random.default_rng(args.seed)
    stem = comp.formula()
    denoiser = diffusion.model_denoiser(params, cfg, schedule, c=limits.c, nu=limits.nu)
    system = diffusion.generate(numbers, denoiser, schedule,
                                limits, rng, trace_path=_out_path(args, f"{stem}_trace.csv"))
    out = _out_path(args, f"POSCAR_{stem}")
    write_poscar_file(system, out, comment=f"generated {stem}")
    print(f"wrote {out}")
    return 0


def _cmd_hull(args) -> int:
    refs = thermo.read_reference_csv(args.refs)
    rows = []
    with open(args.candidates, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            comp = thermo.Composition.from_formula(row["formula"])
            e_form = float(row["energy_per_atom"])
            result = thermo.energy_above_hull(thermo.PhaseEntry(comp, e_form), refs)
            rows.append((comp.formula(), e_form, result))
            print(f"{comp.formula()}: E_form={e_form:.6g} E_hull={result.e_hull:.6g} eV/atom")
    out = _out_path(args, "hull.csv")
    thermo.write_hull_csv(out, rows)
    print(f"wrote {out}")
    return 0


def _cmd_score(args) -> int:
    rows = []
    with open(args.table, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(superprop.CandidateScoreRow(
                row["identifier"], float(row["tc_pred"]), float(row["e_form"]),
                float(row["e_hull"]), float(row.get("confidence", 1.0))))
    out = _out_path(args, "scores.csv")
    superprop.write_score_csv(out, rows)
    print(f"wrote {out} ({len(rows)} candidates)")
    return 0


def _cmd_screen(args) -> int:
    conf = _load_config(args, required=("checkpoint", "manifest"))
    params, cfg = _load_model(conf)
    refs = thermo.read_reference_csv(conf["refs"]) if "refs" in conf else []
    elemental = {el: 0.0 for r in refs for el in r.composition.elements
                 if len(r.composition.elements) == 1}
    bundle = pipeline.ModelBundle(params, cfg, elemental_refs=elemental,
                                  reference_phases=refs)
    thresholds = pipeline.ScreenThresholds(args.tc_min, args.confidence_min,
                                           args.e_form_max, args.e_hull_max)
    candidates = [(r.path, r) for r in load_manifest(conf["manifest"])]

    def evaluate(record):
        system = record.load()
        tc, confidence, e_form, e_hull = pipeline.evaluate_structure(system, bundle)
        return tc, e_form, e_hull, confidence

    result = pipeline.screen(candidates, evaluate, thresholds,
                             report_path=_out_path(args, "report.csv"),
                             threads=args.threads)
    for key, count in sorted(result.summary().items()):
        print(f"{key}: {count}")
    return result.exit_code


def _cmd_metrics(args) -> int:
    preds, truths, counts = [], [], []
    with open(args.table, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            preds.append(float(row["pred"]))
            truths.append(float(row["truth"]))
            if "n_atoms" in row and row["n_atoms"]:
                counts.append(float(row["n_atoms"]))
    rows = [("mae", metrics.mae_property(preds, truths), len(preds)),
            ("rmse", metrics.rmse_components(preds, truths), len(preds)),
            ("r_squared", metrics.r_squared(preds, truths), len(preds))]
    if counts:
        rows.insert(0, ("mae_energy_mev_per_atom",
                        metrics.mae_energy_per_atom(preds, truths, counts), len(preds)))
    out = _out_path(args, "metrics.csv")
    metrics.write_metrics_csv(out, rows)
    for name, value, _ in rows:
        print(f"{name}: {value:.6g}")
    return 0


# ---- dispatch ----------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="xtalkit", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("parse", help="read POSCAR files and report contents")
    p.add_argument("structures", nargs="+")
    _common(p)
    p.set_defaults(func=_cmd_parse)

    p = subs.add_parser("graph", help="build neighbor graphs and dump edges")
    p.add_argument("structures", nargs="+")
    p.add_argument("--cutoff", type=float, default=geometry.DEFAULT_CUTOFF)
    p.add_argument("--cap", type=int, default=geometry.DEFAULT_NEIGHBOR_CAP)
    _common(p)
    p.set_defaults(func=_cmd_graph)

    p = subs.add_parser("train", help="train a model per the JSON config")
    _common(p)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("predict", help="run model heads over structures")
    p.add_argument("structures", nargs="+")
    _common(p)
    p.set_defaults(func=_cmd_predict)

    p = subs.add_parser("generate", help="sample a structure for a composition")
    p.add_argument("--formula", required=True)
    _common(p)
    p.set_defaults(func=_cmd_generate)

    p = subs.add_parser("hull", help="energy above hull for candidate formulas")
    p.add_argument("candidates", help="CSV with formula,energy_per_atom")
    p.add_argument("--refs", required=True, help="reference phases CSV")
    _common(p)
    p.set_defaults(func=_cmd_hull)

    p = subs.add_parser("score", help="rank candidates by composite score")
    p.add_argument("table", help="CSV with identifier,tc_pred,e_form,e_hull[,confidence]")
    _common(p)
    p.set_defaults(func=_cmd_score)

    p = subs.add_parser("screen", help="batch-screen a candidate manifest")
    _common(p)
    defaults = pipeline.ScreenThresholds()
    p.add_argument("--tc_min", type=float, default=defaults.tc_min)
    p.add_argument("--confidence_min", type=float, default=defaults.confidence_min)
    p.add_argument("--e_form_max", type=float, default=defaults.e_form_max)
    p.add_argument("--e_hull_max", type=float, default=defaults.e_hull_max)
    p.set_defaults(func=_cmd_screen)

    p = subs.add_parser("metrics", help="error metrics over a predictions CSV")
    p.add_argument("table", help="CSV with pred,truth[,n_atoms]")
    _common(p)
    p.set_defaults(func=_cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit_ as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
