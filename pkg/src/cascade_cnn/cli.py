"""Command-line entry point: ``cascade-cnn {synth,train,eval,compare}``.

Run configuration is a JSON file::

    {
      "label": "cascade-4",
      "dataset": {"synthetic": {"preset": "desk", "seed": 0}},   # or {"patchset": "data.pset"}
      "cascade": {"preset": "desk", "n_stages": 4},
      "out": "runs/cascade-4"
    }

Command-line flags override the corresponding keys. Exit codes: 0 success,
1 usage or configuration error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import dataset as ds
from . import evaluation as ev
from . import plotting
from .cascade import (
    CascadeConfig, HygieneAudit, StageStats, cascade_preset, load_model, predict_all, save_model, train_baseline,
    train_cascade,
)
from .errors import CascadeError, ConfigurationError, RoutingError

log = logging.getLogger("cascade_cnn")


@dataclass
class RunConfig:
    synthetic: ds.SyntheticConfig | None
    patchset: str | None
    cascade: CascadeConfig
    out: str | None
    label: str | None = None

    def __post_init__(self):
        if (self.synthetic is None) == (self.patchset is None):
            raise ConfigurationError("specify exactly one dataset source: 'synthetic' or 'patchset'")

    def load_data(self) -> ds.CandidateSet:
        if self.patchset is not None:
            return ds.load_patchset(self.patchset)
        return ds.generate_synthetic(self.synthetic)

    def dataset_dict(self):
        if self.patchset is not None:
            return {"patchset": Path(self.patchset).name}
        return {"synthetic": self.synthetic.to_dict()}


def synthetic_config(d) -> ds.SyntheticConfig:
    d = dict(d)
    base = ds.preset(d.pop("preset")) if "preset" in d else ds.SyntheticConfig()
    try:
        return replace(base, **d)
    except TypeError as e:
        raise ConfigurationError(f"bad synthetic config: {e}") from None


def cascade_config(d) -> CascadeConfig:
    d = dict(d or {})
    name = d.pop("preset", "reference")
    try:
        return cascade_preset(name, **d)
    except TypeError as e:
        raise ConfigurationError(f"bad cascade config: {e}") from None


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(cfg) - {"label", "dataset", "cascade", "out"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def run_config(args) -> RunConfig:
    raw = read_config(args.config)
    data = dict(raw.get("dataset") or {})
    if getattr(args, "data", None):
        data = {"patchset": args.data}
    if not data:
        data = {"synthetic": {"preset": "desk"}}
    if set(data) - {"synthetic", "patchset"}:
        raise ConfigurationError(f"unknown dataset keys: {sorted(set(data) - {'synthetic', 'patchset'})}")
    synth = synthetic_config(data["synthetic"]) if "synthetic" in data else None
    cascade = cascade_config(raw.get("cascade"))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        if synth is not None:
            synth = replace(synth, seed=args.seed)
    if getattr(args, "stages", None) is not None:
        overrides["n_stages"] = args.stages
    if getattr(args, "threshold_factor", None) is not None:
        overrides["threshold_factor"] = args.threshold_factor
    cascade = replace(cascade, **overrides)
    return RunConfig(synth, data.get("patchset"), cascade, args.out or raw.get("out"),
                     getattr(args, "label", None) or raw.get("label"))


def _out_dir(path) -> Path:
    if not path:
        raise ConfigurationError("no output directory given (--out or 'out' in the config)")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_report(model, data, label, config, flags, audit=None) -> ev.RunReport:
    stage_scores = {}
    records = predict_all(model, data, audit=audit, stage_scores=stage_scores)
    return ev.make_report(label, records, data.n_scans, config, model.stage_table, flags, stage_scores)


def write_report_artifacts(report: ev.RunReport, out: Path):
    (out / "report.json").write_text(report.to_json())
    (out / "stages.csv").write_text(ev.stage_table(
        [_stats(s) for s in report.stage_table]))
    curves = [{"label": report.label, "curve": report.froc}]
    (out / "froc.csv").write_text(ev.froc_csv(curves))
    plotting.plot_froc(curves, out / "froc.svg", title=report.label)
    for name, hist in report.histograms.items():
        plotting.plot_histograms(hist, out / f"histogram_{name}.svg", title=name.replace("_", " "))


def _stats(s):
    return s if isinstance(s, StageStats) else StageStats(**s)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    raw = read_config(args.config)
    d = (raw.get("dataset") or {}).get("synthetic") or {}
    if args.preset:
        d = {**d, "preset": args.preset}
    if not d:
        d = {"preset": "desk"}
    cfg = synthetic_config(d)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not args.out:
        raise ConfigurationError("synth needs --out PATH for the patchset file")
    out = Path(args.out)
    if out.suffix == "":
        out = out / "patches.pset"
    out.parent.mkdir(parents=True, exist_ok=True)
    data = ds.generate_synthetic(cfg)
    ds.save_patchset(data, out)
    n1, n0 = data.counts
    print(f"wrote {out} and {ds.index_path(out)}: {n1} nodules, {n0} non-nodules, {data.n_scans} scans")
    return 0


def cmd_train(args):
    rc = run_config(args)
    out = _out_dir(rc.out)
    data = rc.load_data()
    cfg = rc.cascade
    audit = HygieneAudit() if args.audit else None
    if args.baseline:
        model, _ = train_baseline(data, cfg, jobs=args.jobs, audit=audit)
        cfg = replace(cfg, n_stages=0)
    else:
        model, _ = train_cascade(data, cfg, jobs=args.jobs, audit=audit)
    save_model(model, out / "model")
    baseline = cfg.n_stages == 0
    label = rc.label or ("baseline" if baseline else f"cascade-{cfg.n_stages}")
    flags = {"baseline": baseline, "in_sample": True, "evaluation": "cross-validated",
             "stopped_early": model.stopped_early, "warnings": list(model.flags)}
    config = {"dataset": rc.dataset_dict(), "cascade": cfg.to_dict()}
    report = build_report(model, data, label, config, flags, audit)
    if audit is not None:
        bad = audit.violations()
        report.flags["hygiene_violations"] = len(bad)
        for key, lid in bad[:20]:
            log.error("fold hygiene violation: network %s scored its own training lesion %s", key, lid)
    write_report_artifacts(report, out)
    print(ev.format_stage_table(model.stage_table))
    print(f"{label}: sensitivity {report.sensitivity[1.0]:.3f} @1 FP/scan, "
          f"{report.sensitivity[4.0]:.3f} @4 FP/scan; {report.n_rejected_positives} nodules rejected")
    if model.stopped_early:
        log.warning("cascade stopped early: %s", model.flags[-1])
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    if args.data:
        data = ds.load_patchset(args.data)
        source = {"patchset": Path(args.data).name}
    else:
        rc = run_config(args)
        data = rc.load_data()
        source = rc.dataset_dict()
    out = _out_dir(args.out)
    if not model.fold_assignment.covers(data):
        raise RoutingError("dataset contains lesions that are not in the model's fold assignment")
    in_sample = ds.fingerprint(data) == model.data_fingerprint
    label = args.label or ("baseline" if model.n_stages == 0 else f"cascade-{model.n_stages}")
    flags = {"baseline": model.n_stages == 0, "in_sample": in_sample,
             "evaluation": "cross-validated" if in_sample else "fold-routed",
             "stopped_early": model.stopped_early, "warnings": list(model.flags)}
    if in_sample:
        log.info("evaluating on the training dataset: each candidate is scored by its held-out fold")
    config = {"dataset": source, "cascade": model.config.to_dict()}
    report = build_report(model, data, label, config, flags)
    write_report_artifacts(report, out)
    print(f"{label}: sensitivity {report.sensitivity[1.0]:.3f} @1 FP/scan, {report.sensitivity[4.0]:.3f} @4 FP/scan")
    return 0


def cmd_compare(args):
    reports = [ev.RunReport.load(p) for p in args.reports]
    merged = ev.compare_runs(reports)
    out = _out_dir(args.out)
    (out / "froc.csv").write_text(ev.froc_csv(merged["curves"]))
    (out / "summary.csv").write_text(ev.summary_table(merged["summary"]))
    plotting.plot_froc(merged["curves"], out / "froc.svg", title=args.title)
    sys.stdout.write(ev.summary_table(merged["summary"]))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int, help="master seed (u64)")
    shared.add_argument("--out", help="output directory (or patchset path for synth)")
    shared.add_argument("--jobs", type=int, default=1, help="fold-level parallelism")
    shared.add_argument("--stages", type=int, help="number of selective stages")
    shared.add_argument("--threshold-factor", type=float, help="threshold = factor x sigma (default 0.25)")
    shared.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="cascade-cnn", description="Cascaded selective classifiers for imbalanced candidates.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[shared], help="generate a synthetic patchset")
    s.add_argument("--preset", choices=sorted(ds.PRESETS))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[shared], help="train a cascade (or baseline) and report")
    t.add_argument("--data", help="patchset file (overrides the config's dataset)")
    t.add_argument("--label")
    t.add_argument("--baseline", action="store_true", help="balanced-set classifiers only")
    t.add_argument("--audit", action="store_true", help="record and check fold hygiene")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[shared], help="score a dataset with a trained model")
    e.add_argument("--model", required=True, help="model directory")
    e.add_argument("--data", help="patchset file")
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", parents=[shared], help="merge reports into one FROC plot")
    c.add_argument("reports", nargs="+")
    c.add_argument("--title", default="FROC")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.jobs < 1:
        print("cascade-cnn: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CascadeError as e:
        print(f"cascade-cnn: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"cascade-cnn: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
