"""Command-line entry point.

``mabo-dmpc baseline|learn|verify-theory|export-plots``. Every run
directory receives ``config.json``, the exact (override-applied) scenario
that produced it, so ``--scenario <dir>/config.json`` reruns it.

Exit status: 0 success, 1 usage error, 2 numerical failure, 3 schema error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, mdp
from .config import parse_scenario, serialize
from .errors import InputError, MaboError, SchemaError
from .scenarios import list_scenarios, resolve

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_SCHEMA = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message, shown=False):
        super().__init__(message)
        self.shown = shown  # usage text already printed


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}", shown=True)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# -- CSV builders -----------------------------------------------------------

def trace_rows(cfg, rec):
    """Header and rows of one episode trace (one row per step and agent).

    Agents with fewer states or inputs than the widest one leave the
    surplus columns empty; the final stage has no control.
    """
    nx = max(s.shape[1] for s in rec.states)
    nu = max(ag.plant.nu for ag in cfg.agents)
    header = ["step", "agent"] + [f"x{k}" for k in range(nx)] + [f"u{k}" for k in range(nu)] + [
        "stop_reason", "dual_iters"]
    n = len(rec.stop_reasons)
    rows = []
    for k in range(n + 1):
        for i in range(cfg.n_agents):
            x = list(rec.states[i][k]) + [None] * (nx - rec.states[i].shape[1])
            if k < n:
                u = list(rec.controls[i][k]) + [None] * (nu - rec.controls[i].shape[1])
                tail = [rec.stop_reasons[k], rec.dual_iterations[k]]
            else:
                u, tail = [None] * nu, [None, None]
            rows.append([k, i] + x + u + tail)
    return header, rows


def distance_rows(cfg, states):
    pairs = harness.distance_pairs(cfg)
    D = harness.pair_distances(cfg, states)
    return [(k, f"{i}-{j}", D[k, p], d) for k in range(D.shape[0]) for p, (i, j, d) in enumerate(pairs)]


def learning_rows(history):
    """One row per evaluation and agent; warm-up rows have no residuals."""
    best = history.best_so_far()
    rows = []
    for e in range(history.values.shape[0]):
        r = e - history.warmup
        diag = history.diagnostics[r] if r >= 0 else None
        for i in range(history.values.shape[1]):
            rows.append([
                e, i, history.values[e, i], best[e, i],
                None if diag is None else diag.primal_residual,
                None if diag is None else diag.dual_residual,
            ])
    return rows


LEARNING_HEADER = ["episode", "agent", "J_iN", "best_so_far", "primal_residual", "dual_residual"]
DISTANCE_HEADER = ["step", "pair", "actual", "desired"]


def _write_episode(out, cfg, rec, suffix=""):
    h, rows = trace_rows(cfg, rec)
    write_csv(out / f"trace_ep{rec.episode}{suffix}.csv", h, rows)


def _summary(cfg, rec):
    lines = [f"J_iN: {' '.join(repr(float(v)) for v in rec.performance)}",
             f"global J: {rec.global_performance!r}"]
    if cfg.coupling.edges:
        errs = harness.distance_errors(cfg, rec.states)
        lines.append(f"distance errors (last 10 steps): {' '.join(repr(float(v)) for v in errs)}")
    if cfg.kind == "wmr-formation":
        lines.append(f"formation error: {harness.formation_error(cfg, rec.states)!r}")
    return lines


# -- commands -------------------------------------------------------------

def _load(args, need=True):
    if args.scenario is None:
        if need:
            raise UsageError("--scenario is required")
        return None
    try:
        text = resolve(args.scenario)
    except InputError as exc:
        raise UsageError(str(exc)) from None
    cfg = parse_scenario(text)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 1:
            raise UsageError("--episodes must be >= 1")
        cfg = replace(cfg, learning=replace(cfg.learning, episodes=args.episodes))
    return cfg


def _outdir(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.json").write_text(serialize(cfg), encoding="utf-8")
    return out


def cmd_baseline(args):
    cfg = _load(args)
    out = _outdir(args, cfg)
    rec = harness.evaluate_baseline(cfg, cfg.seed)
    _write_episode(out, cfg, rec)
    write_csv(out / "distances.csv", DISTANCE_HEADER, distance_rows(cfg, rec.states))
    lines = _summary(cfg, rec)
    (out / "diagnostics.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _run_learning(cfg, out, log):
    history = harness.learn(cfg)
    write_csv(out / "learning_curve.csv", LEARNING_HEADER, learning_rows(history))
    d = history.points.shape[2]
    write_csv(
        out / "episodes.csv", ["episode", "agent", "warmup"] + [f"p{k}" for k in range(d)] + ["J_iN"],
        [[e, i, int(e < history.warmup)] + list(history.points[e, i]) + [history.values[e, i]]
         for e in range(history.values.shape[0]) for i in range(history.values.shape[1])],
    )
    for dg in history.diagnostics:
        log.append(
            f"round {dg.round}: J {' '.join(repr(float(v)) for v in dg.values)} "
            f"primal {dg.primal_residual!r} dual {dg.dual_residual!r} "
            f"consensus {' '.join(repr(float(v)) for v in dg.consensus)}"
        )
    return history


def cmd_learn(args):
    cfg = _load(args)
    out = _outdir(args, cfg)
    log = []
    history = _run_learning(cfg, out, log)
    k = history.best_episode()
    log.append(f"best episode: {k}")
    log.append(f"best parameters: {' | '.join(' '.join(repr(float(v)) for v in p) for p in history.points[k])}")
    rec = history.records[k]
    if rec is not None:
        for r in history.records:
            _write_episode(out, cfg, r)
        write_csv(out / "distances.csv", DISTANCE_HEADER, distance_rows(cfg, rec.states))
        log.extend(_summary(cfg, rec))
    (out / "diagnostics.log").write_text("\n".join(log) + "\n", encoding="utf-8")
    print("\n".join(log[-4:]))
    return EXIT_OK


def cmd_verify_theory(args):
    seed = 0 if args.seed is None else args.seed
    rep = mdp.theory_battery(seed)
    lines = [
        f"modified-cost identity: max error {rep.theorem_max_error:.3e} over {rep.theorem_trials} triples, N in 1..5 (tol 1e-8)",
        f"value decomposition: max error {rep.decomposition_max_error:.3e} over {rep.decomposition_trials} instances (tol 1e-10)",
        f"Bellman consistency of brute-force optimum: max gap {rep.bellman_max_gap:.3e} over {rep.bellman_trials} instances (tol 1e-8)",
        "result: " + ("PASS" if rep.passed() else "FAIL"),
    ]
    print("\n".join(lines))
    if args.out is not None:
        out = _outdir(args, None)
        write_csv(out / "theory.csv", ["check", "max_error", "trials", "tolerance"], [
            ("modified_cost_identity", rep.theorem_max_error, rep.theorem_trials, 1e-8),
            ("value_decomposition", rep.decomposition_max_error, rep.decomposition_trials, 1e-10),
            ("bellman_consistency", rep.bellman_max_gap, rep.bellman_trials, 1e-8),
        ])
    return EXIT_OK if rep.passed() else EXIT_NUMERICAL


def _curve_rows(cfg, rec, label, kind):
    rows = []
    for k in range(rec.states[0].shape[0]):
        for i in range(cfg.n_agents):
            if kind == "state":
                rows.append([label, k, i, rec.states[i][k, 0]])
            elif k < rec.controls[i].shape[0]:
                rows.append([label, k, i] + list(rec.controls[i][k]))
    return rows


def cmd_export_plots(args):
    """Baseline and learned closed loops plus the learning curves, one CSV per figure."""
    cfg = _load(args)
    out = _outdir(args, cfg)
    if cfg.learning.analytic is not None:
        raise UsageError("export-plots needs a closed-loop scenario")
    log = []
    base = harness.evaluate_baseline(cfg, cfg.seed)
    history = _run_learning(cfg, out, log)
    learned = history.records[history.best_episode()]
    runs = [("baseline", base), ("learned", learned)]
    write_csv(out / "fig_distances.csv", ["controller"] + DISTANCE_HEADER,
              [[lab] + list(r) for lab, rec in runs for r in distance_rows(cfg, rec.states)])
    write_csv(out / "fig_first_state.csv", ["controller", "step", "agent", "x0"],
              [r for lab, rec in runs for r in _curve_rows(cfg, rec, lab, "state")])
    nu = max(ag.plant.nu for ag in cfg.agents)
    write_csv(out / "fig_controls.csv", ["controller", "step", "agent"] + [f"u{k}" for k in range(nu)],
              [r for lab, rec in runs for r in _curve_rows(cfg, rec, lab, "control")])
    if cfg.kind == "wmr-formation":
        write_csv(out / "fig_positions.csv", ["controller", "step", "agent", "x", "y", "heading"],
                  [[lab, k, i] + list(rec.states[i][k]) for lab, rec in runs
                   for k in range(rec.states[0].shape[0]) for i in range(cfg.n_agents)])
    for lab, rec in runs:
        log.extend(f"{lab} {line}" for line in _summary(cfg, rec))
    (out / "diagnostics.log").write_text("\n".join(log) + "\n", encoding="utf-8")
    print("\n".join(log[-2 * len(_summary(cfg, base)):]))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="mabo-dmpc", description="Learn distributed MPC controllers by coordinated Bayesian optimization.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    bundled = ", ".join(list_scenarios())

    def common(sp, out_default):
        sp.add_argument("--scenario", help=f"scenario JSON path or bundled id ({bundled})")
        sp.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
        sp.add_argument("--seed", type=int, help="root seed overriding the scenario's")

    sp = sub.add_parser("baseline", help="closed loop of the unlearned controller")
    common(sp, "runs/baseline")
    sp.set_defaults(func=cmd_baseline, parser=sp)
    sp = sub.add_parser("learn", help="coordinated learning run")
    common(sp, "runs/learn")
    sp.add_argument("--episodes", type=int, help="number of coordinated rounds (overrides the scenario)")
    sp.set_defaults(func=cmd_learn, parser=sp)
    sp = sub.add_parser("verify-theory", help="randomized finite-MDP identity checks")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default=None, help="optional directory for theory.csv")
    sp.set_defaults(func=cmd_verify_theory, parser=sp)
    sp = sub.add_parser("export-plots", help="baseline vs learned curves as per-figure CSVs")
    common(sp, "runs/plots")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_export_plots, parser=sp)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return args.func(args)
    except UsageError as exc:
        if not exc.shown:
            sub = getattr(args, "parser", None) if "args" in locals() else None
            (sub or parser).print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except MaboError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
