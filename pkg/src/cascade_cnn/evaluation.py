"""FROC analysis, score histograms, stage tables and run reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EvaluationError, FormatError

OPERATING_POINTS = (1.0, 4.0)
FROC_HEADER = ["label", "threshold", "tp", "fp", "sensitivity", "fp_per_scan"]
STAGE_HEADER = ["stage", "non_nodules", "nodules", "non_nodules_before", "nodules_before", "sigma", "threshold"]


@dataclass
class FrocCurve:
    points: list
    n_scans: int
    n_positives: int
    thresholds: list = field(default_factory=list)
    tp: list = field(default_factory=list)
    fp: list = field(default_factory=list)

    def fp_per_scan(self):
        return np.array([p[0] for p in self.points])

    def sensitivity(self):
        return np.array([p[1] for p in self.points])

    def to_dict(self):
        return {
            "n_scans": self.n_scans,
            "n_positives": self.n_positives,
            "points": [
                {"threshold": t, "tp": a, "fp": b, "fp_per_scan": x, "sensitivity": y}
                for t, a, b, (x, y) in zip(self.thresholds, self.tp, self.fp, self.points)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        pts = d["points"]
        return cls([(p["fp_per_scan"], p["sensitivity"]) for p in pts], d["n_scans"], d["n_positives"],
                   [p["threshold"] for p in pts], [p["tp"] for p in pts], [p["fp"] for p in pts])


def _columns(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    rejected = np.array([r.rejected_at is not None for r in records], dtype=bool)
    return scores, labels, rejected


def froc(records, n_scans) -> FrocCurve:
    """Sweep the decision threshold over the distinct scores, highest first.

    A record is predicted positive at threshold t when its score >= t.
    Records rejected by a cascade stage are never predicted positive.
    """
    if n_scans < 1:
        raise EvaluationError("n_scans must be >= 1")
    scores, labels, rejected = _columns(records)
    n_pos = int(np.count_nonzero(labels == 1))
    if n_pos == 0:
        raise EvaluationError("FROC needs at least one positive record")
    live = ~rejected
    s, y = scores[live], labels[live]
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # last index of every run of tied scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True)) if len(s) else np.zeros(0, np.int64)
    curve = FrocCurve([], int(n_scans), n_pos)
    seen = set()
    for i in ends:
        point = (float(fp[i]) / n_scans, float(tp[i]) / n_pos)
        if point in seen:
            continue
        seen.add(point)
        curve.points.append(point)
        curve.thresholds.append(float(s[i]))
        curve.tp.append(int(tp[i]))
        curve.fp.append(int(fp[i]))
    return curve


def sensitivity_at(curve: FrocCurve, fp_per_scan) -> float:
    """Step-function read-out: best sensitivity with at most ``fp_per_scan``; 0 if none."""
    if fp_per_scan < 0:
        raise EvaluationError("fp_per_scan must be non-negative")
    best = 0.0
    for x, y in curve.points:
        if x <= fp_per_scan and y > best:
            best = y
    return best


@dataclass
class Histogram:
    bin_edges: list
    counts: list

    def to_dict(self):
        return {"bin_edges": self.bin_edges, "counts": self.counts}


def histogram(scores, n_bins=20) -> Histogram:
    """Uniform bins over [0, 1]; the last bin includes 1.0."""
    if n_bins < 1:
        raise EvaluationError("n_bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size and (scores.min() < 0 or scores.max() > 1 or not np.isfinite(scores).all()):
        raise DataError("histogram scores must lie in [0, 1]")
    counts, edges = np.histogram(scores, bins=n_bins, range=(0.0, 1.0))
    return Histogram(edges.tolist(), counts.astype(int).tolist())


def stage_rows(stats):
    return [
        [j, s.n_non_nodule_after, s.n_nodule_after, s.n_non_nodule_before, s.n_nodule_before,
         repr(float(s.sigma)), repr(float(s.threshold))]
        for j, s in enumerate(stats, start=1)
    ]


def stage_table(stats) -> str:
    """CSV with one row per stage: after-counts per class, then before-counts and threshold."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STAGE_HEADER)
    w.writerows(stage_rows(stats))
    return buf.getvalue()


def format_stage_table(stats) -> str:
    """Plain-text table laid out with stages as columns."""
    rows = [
        ["No. of selective classifiers"] + [str(j) for j in range(1, len(stats) + 1)],
        ["No. of non-nodules"] + [str(s.n_non_nodule_after) for s in stats],
        ["No. of nodules"] + [str(s.n_nodule_after) for s in stats],
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths)))
                     for r in rows)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    label: str
    config: dict
    stage_table: list
    froc: FrocCurve
    sensitivity: dict
    n_rejected_positives: int
    records: list
    flags: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "label": self.label,
            "config": self.config,
            "flags": self.flags,
            "stage_table": [s if isinstance(s, dict) else s.to_dict() for s in self.stage_table],
            "froc": self.froc.to_dict(),
            "sensitivity": {f"{k:g}": v for k, v in self.sensitivity.items()},
            "n_rejected_positives": self.n_rejected_positives,
            "histograms": self.histograms,
            "records": [r if isinstance(r, dict) else r.to_dict() for r in self.records],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        from .cascade import ScoreRecord

        try:
            return cls(
                d["label"], d["config"], d["stage_table"], FrocCurve.from_dict(d["froc"]),
                {float(k): v for k, v in d["sensitivity"].items()}, d["n_rejected_positives"],
                [ScoreRecord(**r) for r in d["records"]], d.get("flags", {}), d.get("histograms", {}),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed report: {e}") from None

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from None


def make_report(label, records, n_scans, config=None, stage_stats=(), flags=None, stage_scores=None,
                n_bins=20) -> RunReport:
    curve = froc(records, n_scans)
    sens = {fp: sensitivity_at(curve, fp) for fp in OPERATING_POINTS}
    missed = sum(1 for r in records if r.label == 1 and r.rejected_at is not None)
    hists = {}
    for key, (labels, probs) in (stage_scores or {}).items():
        labels = np.asarray(labels)
        name = f"stage_{key}" if key != "final" else "final"
        hists[name] = {
            "nodule": histogram(probs[labels == 1], n_bins).to_dict(),
            "non_nodule": histogram(probs[labels == 0], n_bins).to_dict(),
        }
    flags = dict(flags or {})
    flags.setdefault("interpolation", "step")
    flags.setdefault("averaging", "pooled")
    return RunReport(label, config or {}, list(stage_stats), curve, sens, missed, list(records), flags, hists)


def check_recomputable(report: RunReport) -> bool:
    """True if the stored FROC and sensitivities follow from the stored records."""
    curve = froc(report.records, report.froc.n_scans)
    if curve.points != [tuple(p) for p in report.froc.points]:
        return False
    return all(abs(sensitivity_at(curve, fp) - s) == 0 for fp, s in report.sensitivity.items())


def _unique_labels(reports):
    labels, seen = [], {}
    for r in reports:
        n = seen.get(r.label, 0) + 1
        seen[r.label] = n
        labels.append(r.label if n == 1 else f"{r.label}#{n}")
    return labels


def compare_runs(reports) -> dict:
    """Merge reports into labelled curves plus a sensitivity summary table."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("compare_runs needs at least one report")
    curves, summary = [], []
    for label, r in zip(_unique_labels(reports), reports):
        curves.append({"label": label, "curve": r.froc})
        row = {"label": label}
        for fp in OPERATING_POINTS:
            row[f"sensitivity@{fp:g}"] = sensitivity_at(r.froc, fp)
        row["rejected_positives"] = r.n_rejected_positives
        summary.append(row)
    return {"curves": curves, "summary": summary}


def froc_csv(curves) -> str:
    """``curves`` is a list of {"label", "curve"} dicts, as from ``compare_runs``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FROC_HEADER)
    for c in curves:
        cv = c["curve"]
        for t, a, b, (x, y) in zip(cv.thresholds, cv.tp, cv.fp, cv.points):
            w.writerow([c["label"], repr(t), a, b, repr(y), repr(x)])
    return buf.getvalue()


def summary_table(summary) -> str:
    cols = ["label"] + [f"sensitivity@{fp:g}" for fp in OPERATING_POINTS] + ["rejected_positives"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in summary:
        w.writerow([row[c] if c == "label" or c == "rejected_positives" else f"{row[c]:.4f}" for c in cols])
    return buf.getvalue()
