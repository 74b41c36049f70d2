import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_cnn import evaluation as ev
from cascade_cnn.cascade import ScoreRecord, StageStats
from cascade_cnn.errors import DataError, EvaluationError, FormatError


def brute_force_froc(records, n_scans):
    """Enumerate every candidate threshold and count hits directly."""
    n_pos = sum(r.label == 1 for r in records)
    live = [r for r in records if r.rejected_at is None]
    points = []
    for t in sorted({r.score for r in live}, reverse=True):
        tp = sum(1 for r in live if r.score >= t and r.label == 1)
        fp = sum(1 for r in live if r.score >= t and r.label == 0)
        p = (fp / n_scans, tp / n_pos)
        if p not in points:
            points.append(p)
    return points


def random_records(rng, n, n_scans, p_reject=0.2, levels=None):
    out = []
    for i in range(n):
        label = int(rng.random() < 0.3)
        score = float(rng.integers(0, levels) / (levels - 1)) if levels else float(rng.random())
        rej = int(rng.integers(1, 4)) if rng.random() < p_reject else None
        out.append(ScoreRecord(f"c{i}", f"s{rng.integers(n_scans)}", label, 0.0 if rej else score, rej))
    if not any(r.label == 1 for r in out):
        out[0] = ScoreRecord("c0", "s0", 1, 0.5, None)
    return out


def rec(score, label, scan="s0", rejected=None, i=[0]):
    i[0] += 1
    return ScoreRecord(f"r{i[0]}", scan, label, score, rejected)


def test_froc_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(1, 501))
        n_scans = int(rng.integers(1, 21))
        records = random_records(rng, n, n_scans, levels=None if trial % 2 else 7)
        curve = ev.froc(records, n_scans)
        assert curve.points == brute_force_froc(records, n_scans)


def test_perfect_classifier():
    records = [rec(0.9, 1), rec(0.8, 1), rec(0.2, 0), rec(0.1, 0)]
    curve = ev.froc(records, 2)
    assert curve.points[:2] == [(0.0, 0.5), (0.0, 1.0)]
    assert ev.sensitivity_at(curve, 0) == 1.0


def test_all_scores_equal_gives_one_point():
    records = [rec(0.5, 1), rec(0.5, 0), rec(0.5, 0), rec(0.5, 1)]
    curve = ev.froc(records, 4)
    assert curve.points == [(0.5, 1.0)]
    assert curve.tp == [2] and curve.fp == [2] and curve.thresholds == [0.5]


def test_rejected_records_never_positive():
    records = [rec(0.9, 1), rec(0.0, 1, rejected=2), rec(0.0, 0, rejected=1), rec(0.3, 0)]
    curve = ev.froc(records, 1)
    assert max(curve.sensitivity()) == 0.5
    assert max(curve.fp_per_scan()) == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_max_sensitivity_is_unrejected_fraction(seed):
    rng = np.random.default_rng(seed)
    records = random_records(rng, 60, 5, p_reject=0.4)
    pos = [r for r in records if r.label == 1]
    curve = ev.froc(records, 5)
    live = sum(r.rejected_at is None for r in pos)
    assert max(curve.sensitivity(), default=0.0) == pytest.approx(live / len(pos))
    # monotone in both axes
    assert np.all(np.diff(curve.fp_per_scan()) >= 0)
    assert np.all(np.diff(curve.sensitivity()) >= 0)


def test_froc_errors():
    with pytest.raises(EvaluationError):
        ev.froc([rec(0.2, 0)], 1)
    with pytest.raises(EvaluationError):
        ev.froc([rec(0.2, 1)], 0)


def test_sensitivity_at_is_a_step():
    curve = ev.FrocCurve([(0.5, 0.2), (1.5, 0.6), (3.0, 0.9)], 2, 10)
    assert ev.sensitivity_at(curve, 0.4) == 0.0
    assert ev.sensitivity_at(curve, 1.0) == 0.2
    assert ev.sensitivity_at(curve, 1.5) == 0.6
    assert ev.sensitivity_at(curve, 4.0) == 0.9
    with pytest.raises(EvaluationError):
        ev.sensitivity_at(curve, -1)


def test_histogram_bins():
    h = ev.histogram([0.0, 0.04, 0.05, 0.5, 1.0], n_bins=20)
    assert len(h.bin_edges) == 21 and sum(h.counts) == 5
    assert h.counts[0] == 2 and h.counts[1] == 1 and h.counts[10] == 1 and h.counts[19] == 1
    assert sum(ev.histogram([], 4).counts) == 0
    with pytest.raises(DataError):
        ev.histogram([1.2])
    with pytest.raises(DataError):
        ev.histogram([np.nan])


def test_stage_table_csv():
    stats = [StageStats(100, 40000, 99, 3000, 0.2, 0.05), StageStats(99, 3000, 98, 1500, 0.25, 0.0625)]
    rows = list(csv.reader(io.StringIO(ev.stage_table(stats))))
    assert rows[0] == ev.STAGE_HEADER
    assert rows[1][:5] == ["1", "3000", "99", "40000", "100"]
    assert rows[2][:3] == ["2", "1500", "98"]
    assert float(rows[2][6]) == 0.0625
    text = ev.format_stage_table(stats)
    assert "No. of non-nodules" in text and "1500" in text


def make(label, seed=0):
    rng = np.random.default_rng(seed)
    return ev.make_report(label, random_records(rng, 50, 5), 5)


def test_report_round_trip(tmp_path):
    r = make("cascade-3")
    path = tmp_path / "report.json"
    path.write_text(r.to_json())
    back = ev.RunReport.load(path)
    assert back.to_json() == r.to_json()
    assert ev.check_recomputable(back)
    assert back.flags["interpolation"] == "step"


def test_report_tamper_detected(tmp_path):
    r = make("x")
    r.sensitivity[1.0] = 0.999
    assert not ev.check_recomputable(r)
    path = tmp_path / "bad.json"
    path.write_text("{\"label\": 1}")
    with pytest.raises(FormatError):
        ev.RunReport.load(path)
    path.write_text("not json")
    with pytest.raises(FormatError):
        ev.RunReport.load(path)


def test_compare_single_and_many():
    one = ev.compare_runs([make("a")])
    assert [c["label"] for c in one["curves"]] == ["a"]
    five = ev.compare_runs([make("base", 0), make("c1", 1), make("c2", 2), make("c3", 3), make("c3", 4)])
    assert [c["label"] for c in five["curves"]] == ["base", "c1", "c2", "c3", "c3#2"]
    text = ev.froc_csv(five["curves"])
    assert text.splitlines()[0] == ",".join(ev.FROC_HEADER)
    assert {row[0] for row in csv.reader(io.StringIO(text)) if row[0] != "label"} == {"base", "c1", "c2", "c3", "c3#2"}
    table = ev.summary_table(five["summary"]).splitlines()
    assert table[0] == "label,sensitivity@1,sensitivity@4,rejected_positives" and len(table) == 6
    with pytest.raises(EvaluationError):
        ev.compare_runs([])
