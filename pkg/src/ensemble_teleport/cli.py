"""Command-line front end: ``ensemble-teleport {prepare,teleport,process-tomo,rates,sweep}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, config, simulator
from .analysis import InsufficientData, ResultsBundle
from .config import ConfigError, ExperimentConfig
from .protocol import SIX_TARGETS
from .simulator import DecayLaw, TrialRecord
from .tomography import matrix_to_pairs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INSUFFICIENT = 3
EXIT_NOT_CONVERGED = 4

PAULI_LABELS = ("I", "X", "Y", "Z")


# ------------------------------------------------------------- commands


def cmd_prepare(cfg: ExperimentConfig) -> ResultsBundle:
    return analysis.prepare(
        {t: cfg.schedule[t] for t in cfg.targets}, cfg.noise, cfg.timing, cfg.seed, cfg.run.bootstrap, cfg.run.workers
    )


def cmd_teleport(cfg: ExperimentConfig, stream: tuple[int, ...] = ()) -> ResultsBundle:
    return analysis.teleport(
        {t: cfg.schedule[t] for t in cfg.targets},
        cfg.prep_schedule,
        cfg.noise,
        cfg.timing,
        cfg.seed,
        cfg.run.bootstrap,
        cfg.run.workers,
        records=cfg.run.records,
        stream=stream,
        reference_noise=cfg.reference_noise,
    )


def cmd_process_tomo(cfg: ExperimentConfig) -> ResultsBundle:
    missing = [t.value for t in SIX_TARGETS if t not in cfg.targets]
    if missing:
        raise ConfigError(f"process-tomo needs all six targets in [schedule]; missing {missing}", source=cfg.source)
    return analysis.process_tomography(
        {t: cfg.schedule[t] for t in SIX_TARGETS},
        cfg.prep_schedule,
        cfg.noise,
        cfg.timing,
        cfg.seed,
        cfg.run.bootstrap,
        cfg.run.workers,
        records=cfg.run.records,
        reference_noise=cfg.reference_noise,
    )


def cmd_rates(cfg: ExperimentConfig) -> ResultsBundle:
    res = simulator.run_experiment(
        None, {t: cfg.schedule[t] for t in cfg.targets}, cfg.noise, cfg.timing, cfg.seed, workers=cfg.run.workers
    )
    bundle = ResultsBundle("rates", summary=res.summary)
    bundle.budget = analysis.rate_budget(cfg.noise, cfg.timing, res.summary)
    return bundle


SWEEP_COLUMNS = (
    "value",
    "mean_prep_fidelity",
    "mean_teleport_fidelity",
    "mean_target_fidelity",
    "success_probability",
    "mc_success_probability",
    "p23",
    "p234",
    "heralding_efficiency",
    "heralded_fidelity",
    "frac_AB",
    "frac_AA",
    "frac_BB",
    "converged",
)


def cmd_sweep(cfg: ExperimentConfig, parameter: str, grid: list[str]) -> ResultsBundle:
    """One teleport run per grid value; every point reuses the base seed (common random numbers)."""
    if not grid:
        raise ConfigError("sweep grid is empty", source=cfg.source)
    try:
        section, key = config.resolve_key(parameter)
    except KeyError as e:
        raise ConfigError(e.args[0], source=cfg.source) from None
    if section == "run" and key in ("seed", "out"):
        raise ConfigError(f"{parameter} cannot be swept", source=cfg.source)
    bundle = ResultsBundle("sweep")
    for raw in grid:
        try:
            point = config.with_value(cfg, f"{section}.{key}", raw)
        except ValueError as e:
            raise ConfigError(f"sweep value {raw!r} for {parameter}: {e}", source=cfg.source) from None
        b = cmd_teleport(point)
        breakdown = b.summary.herald_breakdown
        bundle.sweep_rows.append(
            {
                "value": config.format_value(config.KEY_DOCS[section][key][0], config.parse_value(section, key, raw)),
                "mean_prep_fidelity": b.mean_prep_fidelity,
                "mean_target_fidelity": b.mean_target_fidelity,
                "mean_teleport_fidelity": b.mean_teleport_fidelity,
                "success_probability": b.budget["success_probability"],
                "mc_success_probability": b.budget["mc_success_probability"],
                "p23": b.budget["p23"],
                "p234": b.budget["p234"],
                "heralding_efficiency": b.budget["heralding_efficiency"],
                "heralded_fidelity": b.budget.get("heralded_fidelity"),
                "frac_AB": breakdown[0],
                "frac_AA": breakdown[1],
                "frac_BB": breakdown[2],
                "converged": b.converged,
            }
        )
        if not b.converged:
            bundle.budget["converged"] = False
    return bundle


# ------------------------------------------------------------- exports


def _clean(x):
    """JSON-safe, deterministic values (non-finite floats become null)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _state_rows(bundle: ResultsBundle):
    for kind, results in (("prepared", bundle.prepared), ("teleported", bundle.teleported)):
        for t in SIX_TARGETS:
            if t in results:
                yield kind, t, results[t]


def bundle_converged(bundle: ResultsBundle) -> bool:
    return bundle.converged and bundle.budget.get("converged", True)


def summary_document(bundle: ResultsBundle, cfg: ExperimentConfig, command: str) -> dict:
    states = {}
    for kind, t, r in _state_rows(bundle):
        b = r.bloch
        states.setdefault(kind, {})[t.value] = {
            "fidelity": r.fidelity,
            "fidelity_std": r.fidelity_std,
            "bloch": [b.x, b.y, b.z],
            "counts": r.dataset.total_counts,
            "converged": r.report.converged,
            "iterations": r.report.iterations,
        }
    doc = {
        "command": command,
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "config": {
            "noise": simulator.config_dict(cfg.noise),
            "timing": simulator.config_dict(cfg.timing),
            "run": {k: v for k, v in simulator.config_dict(cfg.run).items() if k not in config.EXECUTION_KEYS},
            "schedule": {t.value: cfg.schedule[t] for t in cfg.targets},
        },
        "run_summary": bundle.summary.to_dict() if bundle.summary else None,
        "states": states,
        "mean_prep_fidelity": bundle.mean_prep_fidelity,
        "mean_teleport_fidelity": bundle.mean_teleport_fidelity,
        "budget": {k: v for k, v in bundle.budget.items() if k != "converged"},
        "converged": bundle_converged(bundle),
    }
    if bundle.chi is not None:
        doc["process"] = {
            "process_fidelity": bundle.process_fidelity,
            "chi": matrix_to_pairs(bundle.chi.estimate),
            "converged": bundle.chi.converged,
            "bootstrap_std": bundle.chi.bootstrap_std,
        }
    if bundle.sweep_rows:
        doc["sweep"] = bundle.sweep_rows
    return _clean(doc)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def export(bundle: ResultsBundle, cfg: ExperimentConfig, command: str, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    doc = summary_document(bundle, cfg, command)
    files["summary.json"] = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if bundle.prepared or bundle.teleported:
        rows = [
            (kind, t.value, r.fidelity, r.fidelity_std, r.dataset.total_counts, r.report.converged)
            for kind, t, r in _state_rows(bundle)
        ]
        files["fidelities.csv"] = _csv_text(("kind", "target", "fidelity", "fidelity_std", "counts", "converged"), rows)
        rows = [(kind, t.value, r.bloch.x, r.bloch.y, r.bloch.z, r.bloch.norm) for kind, t, r in _state_rows(bundle)]
        files["bloch.csv"] = _csv_text(("kind", "target", "x", "y", "z", "length"), rows)
    if bundle.chi is not None:
        chi = bundle.chi.estimate
        files["chi_re.csv"] = _csv_text(("",) + PAULI_LABELS, [(p,) + tuple(chi[i].real) for i, p in enumerate(PAULI_LABELS)])
        files["chi_im.csv"] = _csv_text(("",) + PAULI_LABELS, [(p,) + tuple(chi[i].imag) for i, p in enumerate(PAULI_LABELS)])
    if bundle.sweep_rows:
        files["sweep.csv"] = _csv_text(SWEEP_COLUMNS, [[row[c] for c in SWEEP_COLUMNS] for row in bundle.sweep_rows])
    if command in ("teleport", "process-tomo") and cfg.run.records:
        lines = ["\t".join(TrialRecord.LOG_FIELDS)] + [r.to_log_line() for r in bundle.records]
        files["trials.log"] = "\n".join(lines) + "\n"
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written


# ------------------------------------------------------------- console report


def _fmt(x, spec=".4f"):
    return "-" if x is None or (isinstance(x, float) and not math.isfinite(x)) else format(x, spec)


def report(bundle: ResultsBundle, cfg: ExperimentConfig, command: str) -> str:
    lines = [f"{command}  config {cfg.hash[:12]}  seed {cfg.seed}"]
    if bundle.prepared or bundle.teleported:
        lines.append(f"{'target':<8}{'F_prep':>10}{'F_tele':>10}{'+/-':>9}{'counts':>10}")
        for t in SIX_TARGETS:
            p = bundle.prepared.get(t)
            q = bundle.teleported.get(t)
            if p is None and q is None:
                continue
            lines.append(
                f"{t.value:<8}{_fmt(p and p.fidelity):>10}{_fmt(q and q.fidelity):>10}"
                f"{_fmt(q.fidelity_std if q else (p.fidelity_std if p else None)):>9}"
                f"{(q or p).dataset.total_counts:>10}"
            )
        lines.append(f"{'mean':<8}{_fmt(bundle.mean_prep_fidelity):>10}{_fmt(bundle.mean_teleport_fidelity):>10}")
    if bundle.process_fidelity is not None:
        lines.append(f"process fidelity F_proc = {bundle.process_fidelity:.4f}")
        lines.append("Re chi:")
        for i, p in enumerate(PAULI_LABELS):
            lines.append(f"  {p} " + " ".join(f"{v:+.3f}" for v in bundle.chi.estimate[i].real))
    b = bundle.budget
    if b and "bsm_contributions" in b:
        c = b["bsm_contributions"]
        lines.append(f"BSM contributions  AB {c['AB']:.3e}  AA {c['AA']:.3e}  BB {c['BB']:.3e}")
        lines.append(
            f"success probability  analytic {b['success_probability']:.4e}  MC {_fmt(b.get('mc_success_probability'), '.4e')}"
        )
        r = b["regime"]
        lines.append(
            f"regime  P_A/P_B {r['P_A/P_B']:.3g} ({'pass' if r['pass_P_A<<P_B'] else 'fail'})  "
            f"P_B/eta_A {_fmt(r['P_B/eta_A'], '.3g')} ({'pass' if r['pass_P_B<<eta_A'] else 'fail'})"
        )
        lines.append(
            f"mean entanglement wait  analytic {_fmt(b['mean_entanglement_wait_us'], '.2f')} us  "
            f"MC {_fmt(b.get('mc_mean_entanglement_wait_us'), '.2f')} us  "
            f"lifetime {b['memory_lifetime_us']:.1f} us  margin {_fmt(b['memory_margin'], '.3f')}"
        )
        if "mc_herald_breakdown" in b:
            h = b["mc_herald_breakdown"]
            lines.append(f"herald breakdown (MC)  AB {h['AB']:.3f}  AA {h['AA']:.3f}  BB {h['BB']:.3f}")
        if b.get("heralding_efficiency") is not None:
            lines.append(f"heralding efficiency {b['heralding_efficiency']:.4f}  F_her {_fmt(b.get('heralded_fidelity'))}")
    if bundle.sweep_rows:
        lines.append(f"{'value':>14}{'F_tele':>10}{'F_target':>10}{'P_succ':>12}{'eta_her':>10}{'F_her':>10}{'AB':>8}")
        for row in bundle.sweep_rows:
            lines.append(
                f"{row['value']:>14}{_fmt(row['mean_teleport_fidelity']):>10}{_fmt(row['mean_target_fidelity']):>10}{_fmt(row['mc_success_probability'], '.3e'):>12}"
                f"{_fmt(row['heralding_efficiency']):>10}{_fmt(row['heralded_fidelity']):>10}{_fmt(row['frac_AB'], '.3f'):>8}"
            )
    if not bundle_converged(bundle):
        lines.append("WARNING: at least one reconstruction did not converge")
    return "\n".join(lines)


# ------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment configuration file")
    common.add_argument("--seed", type=int, metavar="U64", help="override [run] seed")
    common.add_argument("--cycles", type=int, metavar="N", help="cycles for every scheduled target")
    common.add_argument("--out", metavar="DIR", help=f"output directory (else ${config.ENV_OUT}, [run] out, ./results)")
    common.add_argument("--decay-law", choices=[d.value for d in DecayLaw], help="override [timing] decay_law")
    common.add_argument("--quiet", action="store_true", help="no console table")

    parser = argparse.ArgumentParser(prog="ensemble-teleport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="remote state preparation check")
    sub.add_parser("teleport", parents=[common], help="teleportation with state tomography")
    sub.add_parser("process-tomo", parents=[common], help="teleportation of all six inputs and process tomography")
    sub.add_parser("rates", parents=[common], help="rate and noise budget")
    sw = sub.add_parser("sweep", parents=[common], help="teleport over a grid of one config key")
    sw.add_argument("parameter", help="section.key or unique key, see config.KEY_DOCS")
    sw.add_argument("grid", nargs="*", help="values")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = config.load(args.config)
    try:
        if args.seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
        if args.cycles is not None:
            cfg = cfg.with_cycles(args.cycles)
        if args.decay_law is not None:
            cfg = replace(cfg, timing=replace(cfg.timing, decay_law=DecayLaw(args.decay_law)))
    except ValueError as e:
        raise ConfigError(str(e), source=args.config) from None
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "prepare":
            bundle = cmd_prepare(cfg)
        elif args.command == "teleport":
            bundle = cmd_teleport(cfg)
        elif args.command == "process-tomo":
            bundle = cmd_process_tomo(cfg)
        elif args.command == "rates":
            bundle = cmd_rates(cfg)
        else:
            bundle = cmd_sweep(cfg, args.parameter, args.grid)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientData as e:
        print(f"insufficient data: {e}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    out = cfg.output_dir(args.out)
    export(bundle, cfg, args.command, out)
    if not args.quiet:
        print(report(bundle, cfg, args.command))
        print(f"outputs written to {out}")
    return EXIT_OK if bundle_converged(bundle) else EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
