import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aanse.accel import IterationRecord, SolveTrace
from aanse.errors import EmptyTrace
from aanse.report import (CSV_COLUMNS, dumps_traces, emit_csv, emit_gnuplot, emit_json, format_tables, load_json,
                          read_csv, summarize, trace_from_dict, trace_to_dict)


def trace(ratios, re=1000.0, m=1, thetas=None):
    w = [1.0]
    for r in ratios:
        w.append(w[-1] * r)
    thetas = thetas or [0.9] * len(w)
    recs = [IterationRecord(k, w[k], thetas[k], [0.25, 0.75] if k else [1.0], 0.25,
                            ratios[k - 1] if k else math.nan, 0.001, 0.5 ** k if k else math.nan, 1, math.nan)
            for k in range(len(w))]
    return SolveTrace(config={"depth_m": m}, records=recs, status="Converged",
                      meta={"method": "anderson-picard", "reynolds": re, "n": 8})


def test_median_of_three_ratios():
    assert summarize(trace([0.5, 0.6, 0.7])).conv_rate_median == 0.6


def test_lower_median_on_ties():
    assert summarize(trace([0.5, 0.6, 0.7, 0.8])).conv_rate_median == 0.6


def test_single_record_has_no_rate():
    s = summarize(trace([]))
    assert s.conv_rate_median is None and s.theta_median == 0.9 and s.iterations == 1


def test_empty_trace_rejected():
    with pytest.raises(EmptyTrace):
        summarize(SolveTrace(config={}))


def test_predicted_rate_uses_reference():
    s = summarize(trace([0.5, 0.5], thetas=[1.0, 0.8, 0.8]), kappa_reference=0.6)
    assert s.predicted_rate == pytest.approx(0.48)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.lists(st.one_of(finite, st.just(math.inf), st.just(-math.inf), st.just(math.nan)), min_size=1, max_size=6))
def test_json_round_trip_is_bit_exact(values):
    t = trace([0.5] * (len(values) - 1))
    for r, v in zip(t.records, values):
        r.residual_norm = v
    back = trace_from_dict(json.loads(dumps_traces([t]))["traces"][0])
    for a, b in zip(t.records, back.records):
        assert (math.isnan(a.residual_norm) and math.isnan(b.residual_norm)) or a.residual_norm == b.residual_norm
    assert dumps_traces([back]) == dumps_traces([t])


def test_json_file_round_trip(tmp_path):
    t = trace([0.5, 0.25])
    p = emit_json([t], tmp_path / "x" / "t.json")
    (back,) = load_json(p)
    assert trace_to_dict(back) == trace_to_dict(t)


def test_csv_series_and_index(tmp_path):
    files = emit_csv([trace([0.5]), trace([0.4], m=2)], tmp_path)
    names = sorted(p.name for p in files)
    assert names == ["anderson-picard_re1000_m1_n8.csv", "anderson-picard_re1000_m2_n8.csv", "index.csv"]
    rows = read_csv(tmp_path / "anderson-picard_re1000_m1_n8.csv")
    assert list(rows[0]) == CSV_COLUMNS and rows[1]["step_ratio"] == 0.5
    assert math.isnan(rows[0]["step_ratio"])


def test_empty_outputs_have_headers(tmp_path):
    emit_csv([], tmp_path)
    assert (tmp_path / "index.csv").read_text().startswith("series,file,status,iterations")
    emit_gnuplot([], tmp_path)
    assert (tmp_path / "convergence.gp").read_text().startswith("# gnuplot 5")
    emit_json([], tmp_path / "e.json")
    assert load_json(tmp_path / "e.json") == []


def test_gnuplot_references_every_series(tmp_path):
    emit_gnuplot([trace([0.5], re=1000.0), trace([0.5], re=2500.0, m=2)], tmp_path)
    script = (tmp_path / "convergence.gp").read_text()
    assert "anderson-picard_re1000_m1_n8.dat" in script and "anderson-picard_re2500_m2_n8.dat" in script
    assert "layout 2,2" in script and script.count("plot '") == 4


def test_tables_layout():
    ts = [trace([0.6, 0.6], m=0, thetas=[1.0] * 3)] + [trace([0.5, 0.5], m=m) for m in (1, 2, 3, 4)]
    for t, m in zip(ts, range(5)):
        t.config["depth_m"] = m
    text = format_tables([summarize(t, 0.6) for t in ts])
    rate_block = text.split("median convergence rate")[1].splitlines()[2:]
    assert len(rate_block) == 5 and rate_block[0].startswith("0") and "0.6000" in rate_block[0]
