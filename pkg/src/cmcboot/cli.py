"""Command line interface.

::

    cmcboot coverage run --config cfg.json [--out report.csv] [overrides]
    cmcboot coverage table --report report.csv [--compare reference.csv]
    cmcboot env dump riverswim [--out riverswim.json]
    cmcboot bootstrap once --mdp riverswim --n 1000 --T 50 [--B 1000]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources

import numpy as np

from . import harness
from .bellman import ope_arrays, opr_arrays, solve_ope, solve_opr
from .bootstrap import BootstrapConfig, Method, run_ensemble
from .core import DATA, CMCError, SeedSpec, TransitionKernel, simulate_episodes
from .counting import count, estimate, repair_arrays
from .covariance import clt_interval, plugin_lambda, sigma_ope
from .environments import BUILTIN, load_mdp
from .intervals import percentile_ci, pivot_ci

log = logging.getLogger("cmcboot")

REFERENCE_CSV = "reference_coverage.csv"


def _grid_point(text: str):
    try:
        n, T = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n,T but got {text!r}") from None
    return [n, T]


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    g.add_argument("--mdp")
    g.add_argument("--behavior", type=_json_value, help="policy name or JSON action probabilities")
    g.add_argument("--targets", nargs="+", type=_json_value)
    g.add_argument("--grid", nargs="+", type=_grid_point, metavar="N,T")
    g.add_argument("--B", type=int)
    g.add_argument("--n-reps", dest="n_reps", type=int)
    g.add_argument("--levels", nargs="+", type=float)
    g.add_argument("--methods", nargs="+")
    g.add_argument("--entries", nargs="+")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--start-state", dest="start_state", type=int)
    g.add_argument("--vi-tol", dest="vi_tol", type=float)
    g.add_argument("--vi-max-iter", dest="vi_max_iter", type=int)


_OVERRIDES = ["mdp", "behavior", "targets", "grid", "B", "n_reps", "levels", "methods", "entries",
              "seed", "workers", "start_state", "vi_tol", "vi_max_iter"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmcboot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cov = sub.add_parser("coverage", help="Monte Carlo coverage studies")
    cov_sub = cov.add_subparsers(dest="action", required=True)
    run = cov_sub.add_parser("run", help="run a coverage study")
    run.add_argument("--config", help="JSON config file; omitted fields use defaults")
    run.add_argument("--out", default="-", help="output path, '-' for stdout")
    run.add_argument("--format", choices=["csv", "json"], default="csv")
    _add_overrides(run)

    table = cov_sub.add_parser("table", help="print a report, optionally against a reference")
    table.add_argument("--report", required=True, help="CSV written by 'coverage run'")
    table.add_argument("--compare", nargs="?", const="builtin", default=None,
                       help="reference CSV; without a value uses the bundled table values")

    env = sub.add_parser("env", help="environment utilities")
    env_sub = env.add_subparsers(dest="action", required=True)
    dump = env_sub.add_parser("dump", help="write a built-in MDP as JSON")
    dump.add_argument("name", choices=sorted(BUILTIN))
    dump.add_argument("--out", default="-")

    boot = sub.add_parser("bootstrap", help="single-dataset inspection")
    boot_sub = boot.add_subparsers(dest="action", required=True)
    once = boot_sub.add_parser("once", help="simulate one dataset and print intervals")
    once.add_argument("--mdp", default="riverswim")
    once.add_argument("--behavior", type=_json_value, default="mostly-right")
    once.add_argument("--target", type=_json_value, default="uniform")
    once.add_argument("--n", type=int, default=1000)
    once.add_argument("--T", type=int, default=50)
    once.add_argument("--B", type=int, default=1000)
    once.add_argument("--level", type=float, default=0.95)
    once.add_argument("--method", choices=[m.value for m in Method], default="model_based")
    once.add_argument("--seed", type=int, default=0)
    once.add_argument("--start-state", dest="start_state", type=int, default=0)
    once.add_argument("--entries", nargs="+")
    return parser


def _write(text: str, path: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def cmd_coverage_run(args) -> int:
    data = {}
    if args.config:
        data = json.loads(open(args.config, encoding="utf-8").read())
    for key in _OVERRIDES:
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    config = harness.ExperimentConfig.from_dict(data)

    def progress(done, total):
        if done % max(1, total // 20) == 0 or done == total:
            log.info("replication %d / %d", done, total)

    report = harness.run_coverage(config, progress=progress)
    _write(harness.report_text(report, args.format), args.out)
    return 0


def cmd_coverage_table(args) -> int:
    ours = harness.read_report_csv(args.report)
    if args.compare is None:
        cols = ["method", "ci_type", "target", "entry", "n", "T", "nominal", "coverage"]
        print("  ".join(cols))
        for row in ours:
            print("  ".join(f"{row[c]:.3f}" if c == "coverage" else str(row[c]) for c in cols))
        return 0
    if args.compare == "builtin":
        ref_file = resources.files("cmcboot") / "data" / REFERENCE_CSV
        with resources.as_file(ref_file) as path:
            reference = harness.read_report_csv(path)
    else:
        reference = harness.read_report_csv(args.compare)
    joined = harness.compare_tables(ours, reference)
    print(f"{'method':<12}{'ci':<11}{'target':<18}{'entry':<8}{'n':>6}{'T':>5}"
          f"{'nominal':>8}{'ours':>8}{'ref':>8}{'diff':>8}")
    for r in joined:
        print(f"{r['method']:<12}{r['ci_type']:<11}{r['target']:<18}{r['entry']:<8}{r['n']:>6}"
              f"{r['T']:>5}{r['nominal']:>8.2f}{r['coverage']:>8.3f}{r['reference']:>8.3f}"
              f"{r['diff']:>+8.3f}")
    if not joined:
        print("no matching rows", file=sys.stderr)
        return 1
    diffs = np.array([r["diff"] for r in joined])
    print(f"\n{len(joined)} rows matched; mean |diff| {np.abs(diffs).mean():.3f}, "
          f"max |diff| {np.abs(diffs).max():.3f}")
    return 0


def cmd_env_dump(args) -> int:
    _write(json.dumps(BUILTIN[args.name]().to_dict(), indent=1) + "\n", args.out)
    return 0


def cmd_bootstrap_once(args) -> int:
    mdp = load_mdp(args.mdp)
    if args.n % args.T:
        raise harness.ConfigError("n must be a multiple of T")
    behavior = harness.make_policy(args.behavior, mdp)
    target = harness.make_policy(args.target, mdp)
    if behavior is None:
        raise harness.ConfigError("behavior policy cannot be 'optimal'")
    space = mdp.space
    labels = args.entries or [f"V({s + 1})" for s in range(space.S)]
    entries = [harness.parse_entry(lbl, space.S, space.A) for lbl in labels]

    seeds = SeedSpec(args.seed)
    K = args.n // args.T
    data = simulate_episodes(mdp.kernel, behavior, np.full(K, args.start_state), args.T,
                             seeds.stream(0, 0, DATA, 0))
    counts = count(data)
    model = estimate(counts)
    ens = run_ensemble(data, model, BootstrapConfig(args.B, seeds, Method(args.method)),
                       prefix=(0, 0))
    plug = repair_arrays(model.kernel_hat, model.kernel_defined)
    plug_kernel = TransitionKernel(space, plug)
    reps = repair_arrays(ens.kernels, ens.kernel_defined)

    if target is None:
        sol = solve_opr(plug_kernel, mdp.rewards)
        point_v, point_q, pol = sol.v_star.v, sol.q_star.q, sol.pi_star
        q, v, *_ = opr_arrays(reps, mdp.rewards.r, mdp.rewards.gamma)
        true = solve_opr(mdp.kernel, mdp.rewards)
        truth_v, truth_q = true.v_star.v, true.q_star.q
    else:
        vf, qf = solve_ope(plug_kernel, target, mdp.rewards)
        point_v, point_q, pol = vf.v, qf.q, target
        v, q = ope_arrays(reps, target.probs, mdp.rewards.r, mdp.rewards.gamma)
        vf, qf = solve_ope(mdp.kernel, target, mdp.rewards)
        truth_v, truth_q = vf.v, qf.q
    cov = sigma_ope(plug_kernel, pol, mdp.rewards, plugin_lambda(plug_kernel, counts))
    alpha = 1 - args.level

    print(f"n={args.n} T={args.T} K={K} B={args.B} method={args.method} "
          f"unvisited pairs={int((counts.n_sa == 0).sum())}")
    print(f"{'entry':<8}{'truth':>10}{'estimate':>10}  {'percentile':<22}{'pivot':<22}clt")
    for label, (kind, s, a) in zip(labels, entries):
        if kind == "V":
            samples, est, tru, var = v[:, s], point_v[s], truth_v[s], cov.sigma_v[s, s]
        else:
            i = s * space.A + a
            samples, est, tru, var = q[:, s, a], point_q[s, a], truth_q[s, a], cov.sigma_q[i, i]
        cis = [percentile_ci(samples, alpha), pivot_ci(samples, est, alpha),
               clt_interval(est, max(var, 0.0), counts.n_total, alpha)]
        text = [f"[{ci.lower:8.3f},{ci.upper:8.3f}]" + ("*" if ci.lower <= tru <= ci.upper
                                                          else " ") for ci in cis]
        print(f"{label:<8}{tru:>10.4f}{est:>10.4f}  {text[0]:<22}{text[1]:<22}{text[2]}")
    print("* interval covers the true value")
    return 0


COMMANDS = {
    ("coverage", "run"): cmd_coverage_run,
    ("coverage", "table"): cmd_coverage_table,
    ("env", "dump"): cmd_env_dump,
    ("bootstrap", "once"): cmd_bootstrap_once,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[(args.command, args.action)](args)
    except (CMCError, OSError, json.JSONDecodeError, TypeError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
