"""Summary statistics and CSV / JSON / gnuplot artifacts for solve traces."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from statistics import median_low

from .accel import IterationRecord, SolveTrace
from .errors import EmptyTrace, IoFailure

SCHEMA_VERSION = 1
CSV_COLUMNS = ["k", "residual_norm", "step_ratio", "theta", "eta_partial", "wall_ms"]


@dataclass
class RunSummary:
    config: dict
    meta: dict
    status: str
    iterations: int
    theta_median: float | None
    conv_rate_median: float | None
    update_rate_median: float | None
    kappa_hat: float | None
    eta_max: float
    predicted_rate: float | None


def _finite(values) -> list[float]:
    return [float(v) for v in values if v is not None and math.isfinite(v)]


def _median(values) -> float | None:
    vals = _finite(values)
    return median_low(vals) if vals else None


def summarize(trace: SolveTrace, kappa_reference: float | None = None) -> RunSummary:
    """Lower medians over steps ``k >= 1``; ``kappa_reference`` is the paired depth-0 median rate."""
    if not trace.records:
        raise EmptyTrace("cannot summarise an empty trace")
    recs = trace.records
    later = recs[1:] if len(recs) > 1 else recs
    theta_med = _median(r.theta for r in later)
    rate_med = _median(r.step_ratio for r in recs[1:])
    upd = [b.update_norm / a.update_norm for a, b in zip(recs[1:], recs[2:])
           if a.update_norm and math.isfinite(a.update_norm)]
    ratios = _finite(r.step_ratio for r in recs[1:])
    predicted = None
    if kappa_reference is not None and theta_med is not None:
        predicted = theta_med * kappa_reference
    return RunSummary(
        config=dict(trace.config),
        meta=dict(trace.meta),
        status=trace.status,
        iterations=trace.iterations,
        theta_median=theta_med,
        conv_rate_median=rate_med,
        update_rate_median=_median(upd),
        kappa_hat=max(ratios) if ratios else None,
        eta_max=max(_finite(r.eta_partial for r in recs), default=0.0),
        predicted_rate=predicted,
    )


def trace_label(trace: SolveTrace) -> str:
    meta = trace.meta
    parts = [str(meta.get("method", "run"))]
    if "reynolds" in meta:
        parts.append(f"re{meta['reynolds']:g}")
    parts.append(f"m{trace.depth_m}")
    if "n" in meta:
        parts.append(f"n{meta['n']}")
    return "_".join(parts)


def _unique_labels(traces) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for t in traces:
        lab = trace_label(t)
        seen[lab] = seen.get(lab, 0) + 1
        out.append(lab if seen[lab] == 1 else f"{lab}_{seen[lab]}")
    return out


# ------------------------------------------------------------------- JSON
def _enc(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _enc(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    return x


_NONFINITE = {"nan": math.nan, "inf": math.inf, "-inf": -math.inf}


def _dec_float(x):
    if isinstance(x, str):
        return _NONFINITE[x]
    return None if x is None else float(x)


def trace_to_dict(trace: SolveTrace) -> dict:
    return {
        "config": _enc(trace.config),
        "meta": _enc(trace.meta),
        "status": trace.status,
        "error": trace.error,
        "timings": _enc(trace.timings),
        "records": [_enc(asdict(r)) for r in trace.records],
    }


_FLOAT_FIELDS = {f.name for f in fields(IterationRecord)} - {"k", "alphas", "depth"}


def trace_from_dict(d: dict) -> SolveTrace:
    records = []
    for r in d["records"]:
        kw = dict(r)
        for name in _FLOAT_FIELDS:
            if name in kw:
                kw[name] = _dec_float(kw[name])
        kw["alphas"] = [_dec_float(a) for a in kw["alphas"]]
        records.append(IterationRecord(**kw))

    def dec(obj):
        if isinstance(obj, dict):
            return {k: dec(v) for k, v in obj.items()}
        if isinstance(obj, str) and obj in _NONFINITE:
            return _NONFINITE[obj]
        return obj

    return SolveTrace(config=dec(d["config"]), records=records, status=d["status"],
                      timings=dec(d.get("timings", {})), meta=dec(d.get("meta", {})), error=d.get("error"))


def dumps_traces(traces) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, "traces": [trace_to_dict(t) for t in traces]},
                      indent=1, sort_keys=True, allow_nan=False)


def emit_json(traces, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_traces(traces) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def load_json(path) -> list[SolveTrace]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported trace schema {doc.get('schema')!r}")
    return [trace_from_dict(t) for t in doc["traces"]]


# -------------------------------------------------------------------- CSV
def _csv_row(r: IterationRecord) -> list[str]:
    return [str(r.k), repr(r.residual_norm), repr(r.step_ratio), repr(r.theta),
            repr(r.eta_partial), repr(r.wall_time * 1e3)]


def emit_csv(traces, out_dir) -> list[Path]:
    """One ``<label>.csv`` per trace plus ``index.csv`` mapping series to files."""
    out = Path(out_dir)
    traces = list(traces)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        labels = _unique_labels(traces)
        for lab, t in zip(labels, traces):
            p = out / f"{lab}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                w.writerows(_csv_row(r) for r in t.records)
            written.append(p)
        idx = out / "index.csv"
        with open(idx, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["series", "file", "status", "iterations"])
            for lab, t in zip(labels, traces):
                w.writerow([lab, f"{lab}.csv", t.status, t.iterations])
        written.append(idx)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "k" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- gnuplot
def emit_gnuplot(traces, out_dir, script_name: str = "convergence.gp") -> list[Path]:
    """Whitespace data files per trace and one gnuplot 5 script.

    The script draws one log-residual panel per Reynolds number, followed by
    the matching theta_k panels.
    """
    out = Path(out_dir)
    traces = list(traces)
    labels = _unique_labels(traces)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for lab, t in zip(labels, traces):
            p = out / f"{lab}.dat"
            lines = ["# k residual_norm step_ratio theta"]
            lines += [f"{r.k} {r.residual_norm!r} {r.step_ratio!r} {r.theta!r}" for r in t.records]
            p.write_text("\n".join(lines) + "\n")
            written.append(p)

        groups: dict[str, list[str]] = {}
        for lab, t in zip(labels, traces):
            re = t.meta.get("reynolds")
            groups.setdefault("all" if re is None else f"{re:g}", []).append(lab)
        script = ["# gnuplot 5", "set terminal pngcairo size 1200,800",
                  f"set output '{Path(script_name).stem}.png'"]
        if groups:
            script.append(f"set multiplot layout 2,{len(groups)}")
            for key, labs in groups.items():
                title = f"Re = {key}" if key != "all" else "residual"
                script += ["set logscale y", "set xlabel 'k'", "set ylabel '||grad w_k||'",
                           f"set title '{title}'"]
                script.append("plot " + ", \\\n     ".join(
                    f"'{lab}.dat' using 1:2 with linespoints title '{lab}'" for lab in labs))
            for key, labs in groups.items():
                title = f"theta_k, Re = {key}" if key != "all" else "theta_k"
                script += ["unset logscale y", "set ylabel 'theta_k'", f"set title '{title}'"]
                script.append("plot " + ", \\\n     ".join(
                    f"'{lab}.dat' using 1:4 with linespoints title '{lab}'" for lab in labs))
            script.append("unset multiplot")
        else:
            script.append("# no series")
        p = out / script_name
        p.write_text("\n".join(script) + "\n")
        written.append(p)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written


# ----------------------------------------------------------------- tables
def _fmt(x, spec=".4f"):
    return "-" if x is None else format(x, spec)


def format_tables(summaries: list[RunSummary]) -> str:
    """Median-theta and median-rate tables laid out by depth (rows) and Reynolds number (columns)."""
    runs = [s for s in summaries if s.meta.get("method") != "newton"]
    res = sorted({s.meta.get("reynolds") for s in runs if s.meta.get("reynolds") is not None})
    ms = sorted({int(s.config.get("depth_m", 0)) for s in runs})
    cell = {(s.meta.get("reynolds"), int(s.config.get("depth_m", 0))): s for s in runs}
    out = ["median theta_k", "m  " + "".join(f"Re={r:<10g}" for r in res)]
    for m in ms:
        if m == 0:
            continue
        out.append(f"{m:<3d}" + "".join(f"{_fmt(getattr(cell.get((r, m)), 'theta_median', None)):<13}" for r in res))
    out += ["", "median convergence rate (predicted = theta_med * rate(m=0))",
            "m  " + "".join(f"Re={r:<8g} pred       " for r in res)]
    for m in ms:
        row = f"{m:<3d}"
        for r in res:
            s = cell.get((r, m))
            row += f"{_fmt(s and s.conv_rate_median):<13}{_fmt(s and s.predicted_rate):<11}"
        out.append(row)
    newton = [s for s in summaries if s.meta.get("method") == "newton"]
    if newton:
        out += ["", "newton"]
        out += [f"Re={s.meta.get('reynolds'):g}: {s.status} after {s.iterations} iterations" for s in newton]
    return "\n".join(out)


def default_output_root() -> Path:
    return Path(os.environ.get("AANSE_OUTPUT_DIR", "aanse-output"))
