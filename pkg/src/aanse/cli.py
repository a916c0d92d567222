"""``aanse`` command line: solve, sweep, verify and audit."""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import report
from .accel import (CONVERGED, DIVERGED, FAILED, MAX_ITERS, AndersonConfig, SolveTrace, audit_recursion,
                    run_accelerated, theta_threshold)
from .errors import AanseError, HypothesisViolated, InsufficientTrace
from .fem2d import write_vtk
from .linalg import dump_matrix_market, euclidean
from .nse import (PicardOperator, audit_nse_m1, cavity_problem, forced_problem, run_anderson_picard, run_newton,
                  solve_stokes)
from .synthetic import linear_contraction

PROBLEMS = ("cavity2d", "mms", "linear-synthetic", "forced")
EXIT_CODES = {CONVERGED: 0, MAX_ITERS: 2, DIVERGED: 3, FAILED: 1}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "cavity2d"
    n: int = 64
    reynolds: list = field(default_factory=lambda: [1000.0])
    m: list = field(default_factory=lambda: [0])
    beta: float = 1.0
    gamma_gd: float = 0.0
    tol_abs: float = 1e-8
    tol_rel: float = 0.0
    max_iters: int = 200
    seed: int = 0
    output_dir: str | None = None
    newton: bool = False
    amplitude: float = 5.0   # forcing scale of the "forced" problem
    r: float = 0.9           # contraction factor of "linear-synthetic"
    dim: int = 40            # size of "linear-synthetic"
    timings: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {', '.join(PROBLEMS)}, got {self.problem!r}")
        if isinstance(self.reynolds, (int, float)):
            self.reynolds = [self.reynolds]
        if isinstance(self.m, int):
            self.m = [self.m]
        self.reynolds = [float(x) for x in self.reynolds]
        self.m = [int(x) for x in self.m]
        if not self.reynolds or not self.m:
            raise ConfigError("reynolds and m lists must be nonempty")
        if any(not (re > 0 and math.isfinite(re)) for re in self.reynolds):
            raise ConfigError(f"Reynolds numbers must be positive, got {self.reynolds}")
        if any(m < 0 for m in self.m):
            raise ConfigError(f"depths must be nonnegative, got {self.m}")
        if int(self.n) != self.n or self.n < 2:
            raise ConfigError(f"mesh count n must be an integer >= 2, got {self.n}")
        self.n = int(self.n)
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.tol_abs > 0 or self.tol_rel < 0:
            raise ConfigError("need tol_abs > 0 and tol_rel >= 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be positive")
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"r must lie in (0, 1), got {self.r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def anderson(self, m: int) -> AndersonConfig:
        return AndersonConfig(depth_m=m, damping_beta=self.beta, max_iters=self.max_iters,
                              tol_abs=self.tol_abs, tol_rel=self.tol_rel)

    def output_root(self) -> Path:
        return Path(self.output_dir) if self.output_dir else report.default_output_root()


# ------------------------------------------------------------------- runs
def _flow_problem(cfg: ExperimentConfig, re: float):
    if cfg.problem == "cavity2d":
        return cavity_problem(cfg.n, re, cfg.gamma_gd)
    if cfg.problem == "forced":
        return forced_problem(cfg.n, re, cfg.amplitude, cfg.gamma_gd)
    from .mms import mms_problem
    return mms_problem(cfg.n, 1.0 / re, cfg.gamma_gd)


def _strip_timings(trace: SolveTrace) -> SolveTrace:
    for r in trace.records:
        r.wall_time = 0.0
    trace.timings = {k: 0.0 for k in trace.timings}
    return trace


def execute_run(cfg: ExperimentConfig, re: float, m: int, method: str = "anderson",
                vtk_path: str | None = None, matrix_path: str | None = None) -> SolveTrace:
    """One (problem, Re, m) solve; failures come back as a ``Failed`` trace rather than an exception."""
    acfg = cfg.anderson(m)
    meta = {"problem": cfg.problem, "reynolds": re, "seed": cfg.seed}
    try:
        if cfg.problem == "linear-synthetic":
            op = linear_contraction(cfg.dim, cfg.r, cfg.seed)
            del meta["reynolds"]
            meta.update(method="fixed-point", depth_m=m, r=cfg.r, n=cfg.dim)
            trace = run_accelerated(op, np.zeros(cfg.dim), acfg, ip=euclidean(cfg.dim), meta=meta)
        else:
            op = PicardOperator(_flow_problem(cfg, re))
            meta.update(nu=op.nu, n=cfg.n, gamma_gd=cfg.gamma_gd)
            t0 = time.perf_counter()
            u0 = solve_stokes(op)
            stokes_s = time.perf_counter() - t0
            if matrix_path:
                dump_matrix_market(op.system(u0)[0], matrix_path)
            runner = run_newton if method == "newton" else run_anderson_picard
            trace = runner(op, u0, acfg, meta=meta)
            trace.timings["stokes_s"] = stokes_s
            if vtk_path and trace.final is not None:
                write_vtk(vtk_path, op.space, trace.final, f"{cfg.problem} Re={re:g} m={m}")
    except (AanseError, ValueError, ArithmeticError, MemoryError) as exc:
        meta.setdefault("method", method)
        meta.setdefault("depth_m", m)
        trace = SolveTrace(config=asdict(acfg), status=FAILED, meta=meta, error=f"{type(exc).__name__}: {exc}")
    if not cfg.timings:
        _strip_timings(trace)
    return trace


def _execute_job(args):
    cfg_dict, re, m, method = args
    trace = execute_run(ExperimentConfig.from_dict(cfg_dict), re, m, method)
    trace.final = None  # keep the inter-process payload small
    return trace


def write_run(trace: SolveTrace, cfg: ExperimentConfig, out: Path, kappa_reference=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    report.emit_json([trace], out / "trace.json")
    report.emit_csv([trace], out / "csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    if trace.records:
        s = report.summarize(trace, kappa_reference)
        (out / "summary.json").write_text(
            json.dumps(report._enc(asdict(s)), indent=1, sort_keys=True, allow_nan=False) + "\n")
    return out


# --------------------------------------------------------------- commands
def cmd_solve(cfg: ExperimentConfig, export_vtk: str | None = None, dump_matrix: str | None = None) -> int:
    if len(cfg.reynolds) != 1 or len(cfg.m) != 1:
        raise ConfigError("solve takes exactly one Reynolds number and one depth (use sweep for grids)")
    re, m = cfg.reynolds[0], cfg.m[0]
    method = "newton" if cfg.newton else "anderson"
    trace = execute_run(cfg, re, m, method, export_vtk, dump_matrix)
    out = write_run(trace, cfg, cfg.output_root() / report.trace_label(trace))
    last = trace.records[-1].residual_norm if trace.records else math.nan
    print(f"{report.trace_label(trace)}: {trace.status} after {trace.iterations} iterations, "
          f"residual {last:.3e}; wrote {out}")
    if trace.error:
        print(f"error: {trace.error}", file=sys.stderr)
    return EXIT_CODES[trace.status]


def sweep_jobs(cfg: ExperimentConfig) -> list[tuple[float, int, str]]:
    depths = sorted(set(cfg.m) | {0})
    jobs = [(re, m, "anderson") for re in cfg.reynolds for m in depths]
    if cfg.newton and cfg.problem != "linear-synthetic":
        jobs += [(re, 0, "newton") for re in cfg.reynolds]
    return jobs


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> int:
    plan = sweep_jobs(cfg)
    payload = [(cfg.to_dict(), re, m, method) for re, m, method in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_execute_job, payload))
    else:
        traces = [_execute_job(p) for p in payload]

    root = cfg.output_root()
    ref = {}
    for (re, m, method), t in zip(plan, traces):
        if method == "anderson" and m == 0 and t.records:
            ref[re] = report.summarize(t).conv_rate_median
    summaries = []
    for label, (re, m, method), t in zip(report._unique_labels(traces), plan, traces):
        write_run(t, cfg, root / "runs" / label, ref.get(re))
        if t.records:
            summaries.append(report.summarize(t, ref.get(re)))
        print(f"{label}: {t.status} after {t.iterations} iterations" + (f" ({t.error})" if t.error else ""))
    report.emit_json(traces, root / "traces.json")
    report.emit_csv(traces, root / "csv")
    report.emit_gnuplot(traces, root / "gnuplot")
    tables = report.format_tables(summaries)
    (root / "tables.txt").write_text(tables + "\n")
    print(tables)
    return 1 if any(t.status == FAILED for t in traces) else 0


def cmd_verify(level: str = "full", fault: str | None = None) -> int:
    from .verify import first_failure, run_checks
    results = run_checks(level, fault)
    bad = first_failure(results)
    if bad:
        print(f"verify failed: {bad}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def _audit_one(trace: SolveTrace, label: str, r_hat, alpha_bar, m_hat) -> None:
    print(f"== {label}: {trace.status}, {trace.iterations} iterations, depth {trace.depth_m}")
    source = "--r-hat"
    if r_hat is None:
        for key in ("r", "kappa_hat"):
            if key in trace.meta:
                r_hat, source = float(trace.meta[key]), f"meta[{key}]"
                break
    if r_hat is None:
        ratios = [x for x in trace.step_ratios() if math.isfinite(x)]
        if not ratios:
            print("   no step ratios recorded; nothing to audit")
            return
        r_hat, source = max(ratios), "max step ratio"
    print(f"   r_hat = {r_hat:.6g} ({source})")
    try:
        rep = audit_recursion(trace, r_hat)
    except InsufficientTrace as exc:
        print(f"   recursion audit skipped: {exc}")
        return
    print(f"   recursion bound: {rep.satisfied} satisfied, {rep.violated} violated")
    print(f"   {'k':>4} {'||e_k+1||':>12} {'bound':>12} {'slack':>12}  ok   theta_k   threshold")
    eta = 0.0
    m = trace.depth_m
    for row in rep.rows:
        rec = trace.records[row.k]
        eta = max(eta, *(trace.records[j].eta_partial for j in range(row.k + 1)))
        try:
            thr = f"{theta_threshold(r_hat, eta, m, row.k):.6f}" if 0 < r_hat < 1 else "n/a"
        except HypothesisViolated:
            thr = "n/a"
        print(f"   {row.k:>4} {row.lhs:>12.4e} {row.rhs:>12.4e} {row.slack:>12.4e}  "
              f"{'yes' if row.satisfied else 'NO ':<4} {rec.theta:8.5f}  {thr}")
    for note in rep.notes:
        print(f"   note: {note}")
    if m == 1 and "nu" in trace.meta:
        if not r_hat < 1.0:
            print("   depth-1 audit skipped: needs r_hat < 1")
            return
        nse = audit_nse_m1(trace, r_hat, alpha_bar, m_hat if m_hat is not None else trace.meta.get("m_hat", 0.0))
        print(f"   depth-1 bounds (C0 = {nse.c0:.4g}):")
        for part in (nse.residual, nse.error_by_residual, nse.contraction):
            extra = f", violations at k = {part.violations}" if part.violated else ""
            print(f"     {part.name}: {part.satisfied} satisfied, {part.violated} violated{extra}")


def threshold_table(r: float, eta: float) -> list[str]:
    lines = [f"theta thresholds for r = {r:g}, eta = {eta:g}", f"{'m':>3} {'k':>3} {'threshold':>12}"]
    for m in (1, 2, 3):
        for k in range(1, m + 2):
            try:
                val = f"{theta_threshold(r, eta, m, k):12.6f}"
            except HypothesisViolated:
                val = f"{'n/a':>12}"
            lines.append(f"{m:>3} {k if k <= m else f'>{m}':>3} {val}")
    return lines


def cmd_audit(paths, r_hat=None, alpha_bar=None, m_hat=None, r: float = 0.9, eta: float = 0.1) -> int:
    loaded = []
    try:
        for p in paths:
            traces = report.load_json(p)
            loaded += list(zip(report._unique_labels(traces), traces))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot read trace file: {exc}", file=sys.stderr)
        return 1
    for label, trace in loaded:
        _audit_one(trace, label, r_hat, alpha_bar, m_hat)
    print("\n".join(threshold_table(r, eta)))
    return 0


# ----------------------------------------------------------------- parser
_CONFIG_FLAGS = {
    "problem": "problem", "n": "n", "re": "reynolds", "m": "m", "beta": "beta", "gamma_gd": "gamma_gd",
    "tol_abs": "tol_abs", "tol_rel": "tol_rel", "max_iters": "max_iters", "seed": "seed",
    "output_dir": "output_dir", "amplitude": "amplitude", "r": "r", "dim": "dim",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--n", type=int, help="mesh cells per side")
    p.add_argument("--re", type=float, nargs="+", help="Reynolds number(s)")
    p.add_argument("--m", type=int, nargs="+", help="Anderson depth(s)")
    p.add_argument("--beta", type=float, help="damping parameter in (0, 1]")
    p.add_argument("--gamma-gd", type=float, help="grad-div stabilisation")
    p.add_argument("--tol-abs", type=float)
    p.add_argument("--tol-rel", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", help="output root (default $AANSE_OUTPUT_DIR or ./aanse-output)")
    p.add_argument("--amplitude", type=float, help="forcing scale for --problem forced")
    p.add_argument("--r", type=float, help="contraction factor for --problem linear-synthetic")
    p.add_argument("--dim", type=int, help="size of --problem linear-synthetic")
    p.add_argument("--newton", action="store_true", default=None,
                   help="solve: run Newton instead; sweep: add a Newton baseline")
    p.add_argument("--no-timings", action="store_true", help="zero wall-clock fields for byte-stable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aanse", description="Anderson-accelerated Picard for steady Navier-Stokes")
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("solve", help="run one (problem, Re, m) combination")
    _add_config_flags(ps)
    ps.add_argument("--export-vtk", metavar="PATH")
    ps.add_argument("--dump-matrix", metavar="PATH", help="MatrixMarket dump of the first Picard matrix")

    pw = sub.add_parser("sweep", help="grid over Re x m with a paired m=0 run")
    _add_config_flags(pw)
    pw.add_argument("--jobs", type=int, default=1)

    pv = sub.add_parser("verify", help="run the property and oracle checks")
    pv.add_argument("--level", choices=("quick", "full"), default="full")
    pv.add_argument("--inject-fault", choices=("skew-sign",), help=argparse.SUPPRESS)

    pa = sub.add_parser("audit", help="check recorded traces against the convergence bounds")
    pa.add_argument("traces", nargs="+")
    pa.add_argument("--r-hat", type=float)
    pa.add_argument("--alpha-bar", type=float)
    pa.add_argument("--m-hat", type=float)
    pa.add_argument("--r", type=float, default=0.9, help="r for the threshold table")
    pa.add_argument("--eta", type=float, default=0.1, help="eta for the threshold table")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for flag, key in _CONFIG_FLAGS.items():
        val = getattr(args, flag)
        if val is not None:
            data[key] = val
    if args.newton:
        data["newton"] = True
    if args.no_timings:
        data["timings"] = False
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.level, args.inject_fault)
        if args.command == "audit":
            return cmd_audit(args.traces, args.r_hat, args.alpha_bar, args.m_hat, args.r, args.eta)
        cfg = config_from_args(args)
        if args.command == "solve":
            return cmd_solve(cfg, args.export_vtk, args.dump_matrix)
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        return cmd_sweep(cfg, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
