"""Monte Carlo coverage studies of bootstrap and CLT confidence intervals.

One Monte Carlo replication at grid point ``(n, T)`` draws ``K = n / T``
episodes from the true kernel under the behavior policy, builds every
requested interval for every requested entry, and records whether it covers
the value computed from the true kernel. Replications are independent tasks
keyed by ``(grid_index, rep_index)`` in the seed hierarchy, so reports do not
depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bellman import (DEFAULT_MAX_ITER, DEFAULT_TOL, ope_arrays, opr_arrays, solve_ope,
                      solve_opr)
from .bootstrap import BootstrapConfig, Method, run_ensemble
from .core import DATA, CMCError, Policy, SeedSpec, TransitionKernel, simulate_episodes
from .counting import count, estimate, repair_arrays
from .covariance import lambda_bar, ope_jacobians
from .environments import MdpInstance, load_mdp
from .covariance import normal_quantile
from .intervals import quantile_pair

log = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "ci_type", "target", "entry", "n", "T", "K", "nominal", "coverage",
               "mean_width", "degenerate_rate", "repair_rate", "n_reps", "B", "seed"]

# (config name, method column, ci_type column), in report order.
METHODS = [
    ("ModelBasedPercentile", "model_based", "percentile"),
    ("ModelBasedPivot", "model_based", "pivot"),
    ("EpisodicPercentile", "episodic", "percentile"),
    ("EpisodicPivot", "episodic", "pivot"),
    ("CLT", "clt", "clt"),
]
_METHOD_ALIASES = {}
for _name, _m, _ci in METHODS:
    for alias in (_name, _name.lower(), f"{_m}_{_ci}", f"{_m}-{_ci}"):
        _METHOD_ALIASES[alias] = _name
_METHOD_ALIASES["clt_clt"] = _METHOD_ALIASES["clt-clt"] = "CLT"

DEFAULT_ENTRIES = ["Q(1,0)", "Q(3,1)", "Q(6,0)", "V(1)", "V(2)", "V(3)", "V(4)", "V(5)", "V(6)"]
_ENTRY_RE = re.compile(r"^\s*([VQ])\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)\s*$")


class ConfigError(CMCError):
    pass


def parse_entry(label: str, S: int, A: int):
    """``"V(3)"`` -> ``("V", 2, None)``; ``"Q(6,0)"`` -> ``("Q", 5, 0)``.

    States are 1-based in labels, actions 0-based.
    """
    m = _ENTRY_RE.match(label)
    if not m:
        raise ConfigError(f"cannot parse entry label {label!r}")
    kind, s = m.group(1), int(m.group(2)) - 1
    a = None if m.group(3) is None else int(m.group(3))
    if not 0 <= s < S:
        raise ConfigError(f"entry {label!r}: state outside 1..{S}")
    if kind == "Q" and (a is None or not 0 <= a < A):
        raise ConfigError(f"entry {label!r}: Q entries need an action in 0..{A - 1}")
    if kind == "V" and a is not None:
        raise ConfigError(f"entry {label!r}: V entries take a single state")
    return kind, s, a


def make_policy(spec, mdp: MdpInstance) -> Policy | None:
    """Resolve a policy spec; returns ``None`` for ``"optimal"``.

    Named specs ``uniform``, ``mostly-right`` (``pi(1|s) = 0.8``) and
    ``mostly-left`` (``pi(1|s) = 0.2``) need no further data; a flat list is
    an action distribution shared by all states; a nested list is a full
    ``S x A`` table.
    """
    space = mdp.space
    if isinstance(spec, str):
        if spec == "optimal":
            return None
        if spec == "uniform":
            return Policy.uniform(space)
        if spec in ("mostly-right", "mostly-left"):
            if space.A != 2:
                raise ConfigError(f"policy {spec!r} needs exactly two actions")
            probs = [0.2, 0.8] if spec == "mostly-right" else [0.8, 0.2]
            return Policy.constant(space, probs)
        raise ConfigError(f"unknown policy {spec!r}")
    arr = np.asarray(spec, dtype=float)
    try:
        if arr.ndim == 1:
            return Policy.constant(space, arr)
        return Policy(space, arr)
    except CMCError as exc:
        raise ConfigError(f"bad policy {spec!r}: {exc}") from exc


def policy_name(spec) -> str:
    return spec if isinstance(spec, str) else json.dumps(spec, separators=(",", ":"))


@dataclass
class ExperimentConfig:
    mdp: str = "riverswim"
    behavior: object = "mostly-right"
    targets: list = field(default_factory=lambda: ["uniform"])
    grid: list = field(default_factory=lambda: [[1000, 50]])
    B: int = 1000
    n_reps: int = 1000
    levels: list = field(default_factory=lambda: [0.95])
    methods: list = field(default_factory=lambda: [m[0] for m in METHODS])
    entries: list | None = None
    seed: int = 0
    workers: int = 1
    start_state: int = 0
    vi_tol: float = DEFAULT_TOL
    vi_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        self.grid = [[int(n), int(T)] for n, T in self.grid]
        for n, T in self.grid:
            if T < 1 or n < T or n % T:
                raise ConfigError(f"grid point n={n}, T={T}: n must be a positive multiple of T")
        if int(self.B) < 1 or int(self.n_reps) < 1:
            raise ConfigError("B and n_reps must be >= 1")
        for lvl in self.levels:
            if not 0 < float(lvl) < 1:
                raise ConfigError(f"nominal level {lvl!r} outside (0, 1)")
        try:
            self.methods = [_METHOD_ALIASES[m] for m in self.methods]
        except KeyError as exc:
            raise ConfigError(f"unknown method {exc.args[0]!r}") from None
        if not self.targets:
            raise ConfigError("at least one target policy is required")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CoverageRow:
    method: str
    ci_type: str
    target: str
    entry: str
    n: int
    T: int
    K: int
    nominal: float
    coverage: float
    mean_width: float
    degenerate_rate: float
    repair_rate: float
    n_reps: int
    B: int
    seed: int


@dataclass
class CoverageReport:
    rows: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def lookup(self, **keys) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in keys.items())]

    def get(self, **keys) -> CoverageRow:
        found = self.lookup(**keys)
        if len(found) != 1:
            raise KeyError(f"{len(found)} rows match {keys}")
        return found[0]


class _Context:
    """Everything a worker needs for one replication, built once per run."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.mdp = mdp = load_mdp(config.mdp)
        S, A = mdp.space.S, mdp.space.A
        if not 0 <= config.start_state < S:
            raise ConfigError(f"start_state {config.start_state} outside 0..{S - 1}")
        self.behavior = make_policy(config.behavior, mdp)
        if self.behavior is None:
            raise ConfigError("behavior policy cannot be 'optimal'")
        self.targets = [(policy_name(t), make_policy(t, mdp)) for t in config.targets]
        labels = config.entries
        if labels is None:
            labels = DEFAULT_ENTRIES if (S, A) == (6, 2) else [f"V({s + 1})" for s in range(S)]
        self.labels = list(labels)
        self.entries = [parse_entry(lbl, S, A) for lbl in self.labels]
        self.seeds = SeedSpec(int(config.seed))
        self.alphas = [1 - float(lvl) for lvl in config.levels]
        self.z = [normal_quantile(1 - a / 2) for a in self.alphas]
        self.methods = [m for m in METHODS if m[0] in config.methods]
        self.truth = {}
        for name, pol in self.targets:
            if pol is None:
                sol = solve_opr(mdp.kernel, mdp.rewards, config.vi_tol, config.vi_max_iter)
                v, q = sol.v_star.v, sol.q_star.q
            else:
                vf, qf = solve_ope(mdp.kernel, pol, mdp.rewards)
                v, q = vf.v, qf.q
            self.truth[name] = self.pick(v, q)

    def pick(self, v, q):
        """Select the configured entries from ``V (..., S)`` and ``Q (..., S, A)``."""
        cols = [v[..., s] if kind == "V" else q[..., s, a] for kind, s, a in self.entries]
        return np.stack(cols, axis=-1)

    def target_label(self, name, pol, kind):
        return f"OPR-{kind}" if pol is None else f"OPE-{kind}:{name}"


def _solve_all(ctx: _Context, kernels: np.ndarray, defined: np.ndarray, opr_solution=None):
    """Entry values for every target; kernels carry a leading batch axis."""
    mdp, cfg = ctx.mdp, ctx.config
    fixed = repair_arrays(kernels, defined)
    out = {}
    extra = {}
    for name, pol in ctx.targets:
        if pol is None:
            q, v, acts, gap, _ = opr_arrays(fixed, mdp.rewards.r, mdp.rewards.gamma,
                                            cfg.vi_tol, cfg.vi_max_iter)
            extra["opr_actions"] = acts
        else:
            v, q = ope_arrays(fixed, pol.probs, mdp.rewards.r, mdp.rewards.gamma)
        out[name] = ctx.pick(v, q)
    return out, fixed, extra


def _clt_variances(ctx: _Context, kernel: np.ndarray, counts, opr_actions):
    """Plug-in CLT variances ``Sigma_ii / n`` for each target's entries."""
    space = ctx.mdp.space
    lam = lambda_bar(TransitionKernel(space, kernel), counts.n_sa / counts.n_total,
                     floor=1.0 / counts.n_total)
    out = {}
    for name, pol in ctx.targets:
        if pol is None:
            pol = Policy.deterministic(space, opr_actions)
        j_v, j_q = ope_jacobians(kernel, pol, ctx.mdp.rewards)
        rows = [j_v[s] if kind == "V" else j_q[s * space.A + a] for kind, s, a in ctx.entries]
        j = np.stack(rows)
        # Only the diagonal of J Lambda J^T is needed.
        var = np.einsum("ij,jk,ik->i", j, lam.matrix, j)
        out[name] = np.maximum(var, 0.0) / counts.n_total
    return out, bool(lam.floored.any())


def run_replication(ctx: _Context, grid_index: int, rep: int):
    """One Monte Carlo replication.

    Returns a dict keyed by ``(target, level_index, method)`` with arrays
    ``covered``, ``width``, ``degenerate`` (one per entry) and a scalar
    ``repaired`` fraction.
    """
    cfg, mdp = ctx.config, ctx.mdp
    n, T = cfg.grid[grid_index]
    K = n // T
    rng = ctx.seeds.stream(grid_index, rep, DATA, 0)
    data = simulate_episodes(mdp.kernel, ctx.behavior, np.full(K, cfg.start_state), T, rng)
    counts = count(data)
    model = estimate(counts)
    point, fixed, extra = _solve_all(ctx, model.kernel_hat[None], model.kernel_defined[None])
    point = {k: v[0] for k, v in point.items()}
    plug_repaired = float(not model.fully_defined)
    results = {}

    wanted = {m[1] for m in ctx.methods}
    for method in (Method.MODEL_BASED, Method.EPISODIC):
        if method.value not in wanted:
            continue
        bcfg = BootstrapConfig(cfg.B, ctx.seeds, method)
        ens = run_ensemble(data, model, bcfg, prefix=(grid_index, rep))
        reps, _, _ = _solve_all(ctx, ens.kernels, ens.kernel_defined)
        repaired = float(np.mean(~ens.kernel_defined.reshape(cfg.B, -1).all(axis=1)))
        for name, _ in ctx.targets:
            samples = reps[name]
            for li, alpha in enumerate(ctx.alphas):
                lo, hi = quantile_pair(samples, alpha)
                truth = ctx.truth[name]
                for cfg_name, m, ci in ctx.methods:
                    if m != method.value:
                        continue
                    if ci == "percentile":
                        lower, upper = lo, hi
                    else:
                        lower, upper = 2 * point[name] - hi, 2 * point[name] - lo
                    results[(name, li, cfg_name)] = dict(
                        covered=(lower <= truth) & (truth <= upper),
                        width=upper - lower,
                        degenerate=lo == hi,
                        repaired=repaired,
                    )

    if "clt" in wanted:
        acts = extra.get("opr_actions")
        variances, floored = _clt_variances(ctx, fixed[0], counts,
                                            None if acts is None else acts[0])
        for name, _ in ctx.targets:
            truth = ctx.truth[name]
            for li, z in enumerate(ctx.z):
                half = z * np.sqrt(variances[name])
                lower, upper = point[name] - half, point[name] + half
                results[(name, li, "CLT")] = dict(
                    covered=(lower <= truth) & (truth <= upper),
                    width=upper - lower,
                    degenerate=half == 0.0,
                    repaired=max(plug_repaired, float(floored)),
                )
    return results


_WORKER_CTX = None


def _init_worker(config_dict):
    global _WORKER_CTX
    _WORKER_CTX = _Context(ExperimentConfig.from_dict(config_dict))


def _worker_task(task):
    g, rep = task
    try:
        return run_replication(_WORKER_CTX, g, rep)
    except CMCError as exc:
        return exc


def run_coverage(config: ExperimentConfig, progress=None) -> CoverageReport:
    """Run the full sweep and aggregate per-replication tallies in rep order."""
    ctx = _Context(config)
    tasks = [(g, rep) for g in range(len(config.grid)) for rep in range(config.n_reps)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(config.to_dict(),)) as pool:
            outcomes = list(pool.map(_worker_task, tasks, chunksize=max(1, len(tasks) // (
                8 * config.workers))))
    else:
        global _WORKER_CTX
        _WORKER_CTX = ctx
        outcomes = []
        for i, task in enumerate(tasks):
            outcomes.append(_worker_task(task))
            if progress:
                progress(i + 1, len(tasks))
    return _aggregate(ctx, tasks, outcomes)


def _aggregate(ctx: _Context, tasks, outcomes) -> CoverageReport:
    cfg = ctx.config
    report = CoverageReport(config=cfg.to_dict())
    for g, (n, T) in enumerate(cfg.grid):
        ok = [o for (gi, _), o in zip(tasks, outcomes) if gi == g and not isinstance(o, Exception)]
        failed = [(rep, str(o)) for (gi, rep), o in zip(tasks, outcomes)
                  if gi == g and isinstance(o, Exception)]
        if failed:
            report.failures[f"{n},{T}"] = failed
            log.warning("grid point n=%d T=%d: %d replications failed", n, T, len(failed))
        n_ok = len(ok)
        for name, pol in ctx.targets:
            for li, level in enumerate(cfg.levels):
                for cfg_name, method, ci in ctx.methods:
                    key = (name, li, cfg_name)
                    for e, label in enumerate(ctx.labels):
                        kind = label[0]
                        if n_ok:
                            cov = sum(bool(o[key]["covered"][e]) for o in ok) / n_ok
                            width = math.fsum(float(o[key]["width"][e]) for o in ok) / n_ok
                            degen = sum(bool(o[key]["degenerate"][e]) for o in ok) / n_ok
                            rep_rate = math.fsum(o[key]["repaired"] for o in ok) / n_ok
                        else:
                            cov = width = degen = rep_rate = float("nan")
                        report.rows.append(CoverageRow(
                            method, ci, ctx.target_label(name, pol, kind), label, n, T, n // T,
                            float(level), cov, width, degen, rep_rate, n_ok, cfg.B, cfg.seed))
    return report


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_csv(report: CoverageReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def report_text(report: CoverageReport, fmt: str) -> str:
    if fmt == "csv":
        return report_to_csv(report)
    if fmt == "json":
        return json.dumps({"config": report.config, "failures": report.failures,
                           "rows": [asdict(r) for r in report.rows]}, indent=1) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: CoverageReport, fmt: str, path) -> None:
    """Write the report as CSV (columns :data:`CSV_COLUMNS`) or JSON."""
    text = report_text(report, fmt)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


_INT_COLUMNS = {"n", "T", "K", "n_reps", "B", "seed"}
_FLOAT_COLUMNS = {"nominal", "coverage", "mean_width", "degenerate_rate", "repair_rate"}


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in list(row):
            if key in _INT_COLUMNS and row[key] != "":
                row[key] = int(row[key])
            elif key in _FLOAT_COLUMNS and row[key] != "":
                row[key] = float(row[key])
    return rows


_COMPARE_KEY = ("method", "ci_type", "target", "entry", "n", "T", "nominal")


def compare_tables(ours: list[dict], reference: list[dict]) -> list[dict]:
    """Join two coverage tables on method/target/entry/grid/level."""
    ref = {tuple(r[k] for k in _COMPARE_KEY): r for r in reference}
    out = []
    for row in ours:
        key = tuple(row[k] for k in _COMPARE_KEY)
        if key in ref:
            out.append({**{k: row[k] for k in _COMPARE_KEY}, "coverage": row["coverage"],
                        "reference": ref[key]["coverage"],
                        "diff": row["coverage"] - ref[key]["coverage"]})
    return out
