"""Cascaded selective classifiers followed by a balanced probability network.

Training proceeds stage by stage over k folds. At stage j, fold f trains a
network on an inverse-imbalanced sample of the current pool's other folds,
scores its own (held-out) partition of the pool, freezes a threshold of
``threshold_factor`` times the standard deviation of those scores, and drops
the candidates scoring below it. The survivors of every fold form the pool
for stage j+1. A final network per fold is trained on a balanced sample of
what remains.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dataset import (
    NODULE, NON_NODULE, AugmentParams, CandidateSet, FoldAssignment, ImbalanceWarning,
    build_balanced, build_inverse_imbalanced, derive_seed, fingerprint, kfold_split,
)
from .errors import (
    ConfigurationError, DataError, EvaluationError, FormatError, SamplingError, TrainingError,
)

log = logging.getLogger(__name__)

STOP_PREFIX = "stopped before stage"
SIGMA_POPULATIONS = ("all", "non_nodule", "nodule")
ARCHITECTURES = {"reference": nn.reference_architecture, "compact": nn.compact_architecture}


@dataclass(frozen=True)
class CascadeConfig:
    n_stages: int = 4
    threshold_factor: float = 0.25
    per_fold_negatives: int = 200
    stage_oversample: int = 9
    final_oversample: int = 10
    k: int = 10
    stage_train: nn.TrainConfig = nn.TrainConfig()
    final_train: nn.TrainConfig = nn.TrainConfig()
    seed: int = 0
    architecture: str = "reference"
    augment: AugmentParams = AugmentParams()
    sigma_population: str = "all"
    split: str = "lesion"

    def __post_init__(self):
        if self.n_stages < 0:
            raise ConfigurationError("n_stages must be >= 0")
        if self.threshold_factor < 0:
            raise ConfigurationError("threshold_factor must be >= 0")
        if min(self.per_fold_negatives, self.stage_oversample, self.final_oversample) < 1:
            raise ConfigurationError("resampling counts must be positive")
        if self.k < 2:
            raise ConfigurationError("k must be >= 2")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.sigma_population not in SIGMA_POPULATIONS:
            raise ConfigurationError(f"sigma_population must be one of {SIGMA_POPULATIONS}")
        if self.split not in ("lesion", "scan"):
            raise ConfigurationError("split must be 'lesion' or 'scan'")

    def layers(self, train_cfg: nn.TrainConfig):
        return ARCHITECTURES[self.architecture](dropout_rate=train_cfg.dropout_rate)

    def to_dict(self):
        d = dict(self.__dict__)
        d["stage_train"] = self.stage_train.to_dict()
        d["final_train"] = self.final_train.to_dict()
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown cascade config keys: {sorted(unknown)}")
        for key in ("stage_train", "final_train"):
            if key in d and not isinstance(d[key], nn.TrainConfig):
                d[key] = nn.TrainConfig(**d[key])
        if "augment" in d and not isinstance(d["augment"], AugmentParams):
            d["augment"] = AugmentParams(**{k: tuple(v) for k, v in d["augment"].items()})
        return cls(**d)


DESK_TRAIN = nn.TrainConfig(learning_rate=0.1, epochs=20, batch_size=32, dropout_rate=0.5)

CASCADE_PRESETS = {
    # values as published: 200 negatives per fold, x9 / x10 oversampling, 48x48 reference network
    "reference": {},
    # single-core scale for 16x16 synthetic patches with ~100 nodules
    "desk": {"architecture": "compact", "per_fold_negatives": 40, "stage_train": DESK_TRAIN,
             "final_train": DESK_TRAIN},
}


def cascade_preset(name, **overrides) -> "CascadeConfig":
    if name not in CASCADE_PRESETS:
        raise ConfigurationError(f"unknown cascade preset {name!r}; choose from {sorted(CASCADE_PRESETS)}")
    return CascadeConfig.from_dict({**CASCADE_PRESETS[name], **overrides})


@dataclass
class StageStats:
    n_nodule_before: int = 0
    n_non_nodule_before: int = 0
    n_nodule_after: int = 0
    n_non_nodule_after: int = 0
    sigma: float = 0.0
    threshold: float = 0.0

    def __add__(self, other):
        # sigma/threshold are per-fold quantities; sums keep the first fold's values
        return StageStats(
            self.n_nodule_before + other.n_nodule_before,
            self.n_non_nodule_before + other.n_non_nodule_before,
            self.n_nodule_after + other.n_nodule_after,
            self.n_non_nodule_after + other.n_non_nodule_after,
            self.sigma, self.threshold,
        )

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SelectiveStage:
    net: nn.Network
    threshold: float
    threshold_factor: float
    stats: StageStats


@dataclass
class FoldModel:
    stages: list
    final: nn.Network


@dataclass
class CascadeModel:
    k: int
    folds: list
    fold_assignment: FoldAssignment
    config: CascadeConfig
    stage_table: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    data_fingerprint: str = ""

    @property
    def n_stages(self):
        return len(self.folds[0].stages) if self.folds else 0

    @property
    def stopped_early(self):
        return any(f.startswith(STOP_PREFIX) for f in self.flags)


@dataclass
class ScoreRecord:
    lesion_id: str
    scan_id: str
    label: int
    score: float
    rejected_at: int | None = None

    def to_dict(self):
        return dict(self.__dict__)


class HygieneAudit:
    """Records which lesions each network was trained on and which it scored.

    Networks are keyed by ``(fold, stage)``, ``stage`` being 1-based for
    selective stages and ``"final"`` for the probability network.
    """

    def __init__(self):
        self.trained_on = {}
        self.scored = {}

    def record_training(self, key, cset: CandidateSet):
        self.trained_on.setdefault(key, set()).update(cset.lineage.tolist())

    def record_scoring(self, key, cset: CandidateSet):
        self.scored.setdefault(key, set()).update(cset.lineage.tolist())

    def violations(self):
        out = []
        for key, scored in self.scored.items():
            leaked = scored & self.trained_on.get(key, set())
            out.extend((key, lid) for lid in sorted(leaked))
        return out


# ---------------------------------------------------------------------------
# stage primitives


def compute_threshold(probs, factor) -> float:
    """``factor`` times the population standard deviation of ``probs``, clamped to [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EvaluationError("cannot compute a threshold from an empty score list")
    if factor < 0:
        raise ConfigurationError("threshold factor must be >= 0")
    return float(min(max(factor * probs.std(), 0.0), 1.0))


def score_set(net: nn.Network, cset: CandidateSet) -> np.ndarray:
    """Infer-mode nodule probability for every patch, in set order."""
    if len(cset) and cset.patch_shape != net.input_shape:
        raise ConfigurationError(f"patch shape {cset.patch_shape} does not match network input {net.input_shape}")
    return nn.predict_proba(net, cset.pixels)


def filter_set(cset: CandidateSet, probs, threshold):
    """Split into (kept, removed, stats); scores equal to the threshold are kept."""
    probs = np.asarray(probs)
    if len(probs) != len(cset):
        raise EvaluationError(f"{len(probs)} scores for {len(cset)} candidates")
    keep = probs >= threshold
    kept, removed = cset.mask(keep), cset.mask(~keep)
    b1, b0 = cset.counts
    a1, a0 = kept.counts
    stats = StageStats(b1, b0, a1, a0, 0.0, float(threshold))
    return kept, removed, stats


def _sigma_sample(probs, labels, population):
    if population == "all":
        return probs
    want = NON_NODULE if population == "non_nodule" else NODULE
    sample = probs[labels == want]
    return sample if sample.size else probs


def _train_net(train_set, cfg: CascadeConfig, train_cfg: nn.TrainConfig, seed):
    net = nn.Network.build(cfg.layers(train_cfg), train_set.patch_shape, derive_seed(seed, 0))
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    batch = min(train_cfg.batch_size, len(train_set))
    net, trace = nn.train(net, train_set, replace(train_cfg, seed=derive_seed(seed, 1), batch_size=batch))
    return net, trace


def _train_stage(pool_parts, fold, cfg: CascadeConfig, stage_seed, audit=None, stage_no=None):
    train_parts = [p for g, p in enumerate(pool_parts) if g != fold]
    test = pool_parts[fold]
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ImbalanceWarning)
            # a short fold is not an exhausted pool: train on what it has
            train_set = build_inverse_imbalanced(train_parts, cfg.per_fold_negatives, cfg.stage_oversample,
                                                 cfg.augment, derive_seed(stage_seed, 2), allow_short=True)
        notes = [f"fold {fold} stage {stage_no}: {w.message}" for w in caught]
        for msg in notes:
            log.warning(msg)
        net, trace = _train_net(train_set, cfg, cfg.stage_train, stage_seed)
    except SamplingError as e:
        raise TrainingError(f"fold {fold}: {e}") from None
    if audit is not None:
        audit.record_training((fold, stage_no), train_set)
        audit.record_scoring((fold, stage_no), test)
    probs = score_set(net, test)
    if len(probs):
        sample = _sigma_sample(probs.astype(np.float64), test.labels, cfg.sigma_population)
        sigma = float(sample.std())
        threshold = compute_threshold(sample, cfg.threshold_factor)
    else:
        sigma = threshold = 0.0
    kept, _, stats = filter_set(test, probs, threshold)
    stats.sigma = sigma
    log.info("fold %d stage %s: loss %.4f, sigma %.4f, threshold %.4f, kept %d/%d non-nodules, %d/%d nodules",
             fold, stage_no, trace[-1] if trace else float("nan"), sigma, threshold,
             stats.n_non_nodule_after, stats.n_non_nodule_before, stats.n_nodule_after, stats.n_nodule_before)
    return SelectiveStage(net, threshold, cfg.threshold_factor, stats), kept, notes


def train_stage(pool: CandidateSet, fold_assignment: FoldAssignment, fold, cfg: CascadeConfig,
                stage_seed) -> SelectiveStage:
    """Train one fold's selective classifier on ``pool`` and freeze its threshold."""
    parts = fold_assignment.partition(pool)
    stage, _, _ = _train_stage(parts, fold, cfg, stage_seed)
    return stage


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _train_finals(parts, cfg: CascadeConfig, jobs, audit):
    def run_final(f):
        train_parts = [p for g, p in enumerate(parts) if g != f]
        seed = derive_seed(cfg.seed, 20, f)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ImbalanceWarning)
            train_set = build_balanced(train_parts, cfg.final_oversample, cfg.augment, derive_seed(seed, 2))
        for w in caught:
            log.warning("fold %d final: %s", f, w.message)
        if audit is not None:
            audit.record_training((f, "final"), train_set)
        net, _ = _train_net(train_set, cfg, cfg.final_train, seed)
        return net

    return _map(run_final, range(cfg.k), jobs)


def train_cascade_family(data: CandidateSet, cfg: CascadeConfig, depths, jobs=1,
                         audit: HygieneAudit | None = None) -> dict:
    """Train cascades of several depths in one pass over the stages.

    Stage networks depend only on ``(seed, fold, stage)``, so the cascade
    of depth d is a prefix of the deeper ones; each requested depth gets
    its own final networks. Returns ``{depth: (model, stage_table)}``, each
    entry identical to ``train_cascade`` with ``n_stages=depth``.
    """
    depths = sorted({int(d) for d in depths})
    if not depths or depths[0] < 0:
        raise ConfigurationError(f"bad cascade depths {depths}")
    n1, n0 = data.counts
    if n1 == 0 or n0 == 0:
        raise TrainingError("training data must contain both classes")
    fa = kfold_split(data, cfg.k, derive_seed(cfg.seed, 0), cfg.split)
    fp = fingerprint(data)
    parts = fa.partition(data)
    # pools after 0, 1, 2, ... completed stages
    history = [list(parts)]
    fold_stages = [[] for _ in range(cfg.k)]
    table, flags = [], []
    out = {}

    def finish(depth):
        dcfg = replace(cfg, n_stages=depth)
        n, extra = min(depth, len(table)), []
        while True:
            try:
                finals = _train_finals(history[n], dcfg, jobs, audit)
                break
            except TrainingError as e:
                # an exhausted pool cannot train the finals either; fall back a stage
                if n == 0:
                    raise
                msg = f"{STOP_PREFIX} {n}: final networks cannot be trained on the stage-{n} survivors: {e}"
                log.warning(msg)
                extra.append(msg)
                n -= 1
        folds = [FoldModel(fold_stages[f][:n], finals[f]) for f in range(cfg.k)]
        out[depth] = (CascadeModel(cfg.k, folds, fa, dcfg, table[:n], flags + extra, fp), table[:n])

    if depths[0] == 0:
        finish(0)
    for stage_no in range(1, depths[-1] + 1):
        def run(f):
            return _train_stage(parts, f, cfg, derive_seed(cfg.seed, 10, f, stage_no), audit, stage_no)
        try:
            results = _map(run, range(cfg.k), jobs)
        except TrainingError as e:
            msg = f"{STOP_PREFIX} {stage_no}: {e}"
            log.warning(msg)
            flags.append(msg)
            for d in depths:
                if d >= stage_no:
                    finish(d)
            break
        row = StageStats()
        for f, (stage, kept, notes) in enumerate(results):
            fold_stages[f].append(stage)
            parts[f] = kept
            flags.extend(notes)
            row = row + stage.stats
        row.sigma = float(np.mean([r[0].stats.sigma for r in results]))
        row.threshold = float(np.mean([r[0].threshold for r in results]))
        table.append(row)
        history.append(list(parts))
        log.info("stage %d: %d non-nodules, %d nodules remain", stage_no, row.n_non_nodule_after, row.n_nodule_after)
        if stage_no in depths:
            finish(stage_no)
    return out


def train_cascade(data: CandidateSet, cfg: CascadeConfig, jobs=1, audit: HygieneAudit | None = None):
    """Train a k-fold cascade; returns ``(model, stage_table)``.

    ``stage_table`` has one summed ``StageStats`` per completed stage. If a
    stage cannot be trained for some fold (a class ran out), the cascade
    stops after the last complete stage and the model carries a flag.
    """
    return train_cascade_family(data, cfg, [cfg.n_stages], jobs, audit)[cfg.n_stages]


def train_baseline(data: CandidateSet, cfg: CascadeConfig, jobs=1, audit=None):
    """Balanced-set classifiers only: a zero-stage cascade."""
    return train_cascade(data, replace(cfg, n_stages=0), jobs, audit)


def predict_all(model: CascadeModel, data: CandidateSet, audit: HygieneAudit | None = None,
                stage_scores=None) -> list:
    """Score every candidate with the classifiers of its held-out fold.

    A candidate scoring below a stage's frozen threshold gets
    ``rejected_at`` = that stage (1-based) and score 0. If ``stage_scores``
    is a dict it is filled with ``{stage_no: (labels, probs)}`` for the
    candidates each stage saw, ``"final"`` included.
    """
    folds = model.fold_assignment.fold_array(data)
    scores = np.zeros(len(data), np.float64)
    rejected = np.zeros(len(data), np.int64)
    for f, fm in enumerate(model.folds):
        alive = np.flatnonzero(folds == f)
        for j, stage in enumerate(fm.stages, start=1):
            if not len(alive):
                break
            subset = data.take(alive)
            if audit is not None:
                audit.record_scoring((f, j), subset)
            p = score_set(stage.net, subset)
            if stage_scores is not None:
                _collect(stage_scores, j, subset.labels, p)
            drop = p < stage.threshold
            rejected[alive[drop]] = j
            alive = alive[~drop]
        if len(alive):
            subset = data.take(alive)
            if audit is not None:
                audit.record_scoring((f, "final"), subset)
            p = score_set(fm.final, subset)
            if stage_scores is not None:
                _collect(stage_scores, "final", subset.labels, p)
            scores[alive] = p
    return [
        ScoreRecord(str(data.lesion_ids[i]), str(data.scan_ids[i]), int(data.labels[i]),
                    float(scores[i]), int(rejected[i]) if rejected[i] else None)
        for i in range(len(data))
    ]


def _collect(store, key, labels, probs):
    old = store.get(key)
    if old is None:
        store[key] = (np.asarray(labels), np.asarray(probs))
    else:
        store[key] = (np.concatenate([old[0], labels]), np.concatenate([old[1], probs]))


# ---------------------------------------------------------------------------
# model directory

MANIFEST = "manifest.json"


def save_model(model: CascadeModel, directory):
    """Write ``fold_<i>/stage_<j>.csnn``, ``fold_<i>/final.csnn`` and ``manifest.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    folds = []
    for f, fm in enumerate(model.folds):
        d = root / f"fold_{f}"
        d.mkdir(exist_ok=True)
        for j, stage in enumerate(fm.stages, start=1):
            nn.save_network(stage.net, d / f"stage_{j}.csnn")
        nn.save_network(fm.final, d / "final.csnn")
        folds.append({
            "stages": [
                {"file": f"fold_{f}/stage_{j}.csnn", "threshold": s.threshold,
                 "threshold_factor": s.threshold_factor, "stats": s.stats.to_dict()}
                for j, s in enumerate(fm.stages, start=1)
            ],
            "final": f"fold_{f}/final.csnn",
        })
    manifest = {
        "format": "cascade-model",
        "version": 1,
        "k": model.k,
        "n_stages": model.n_stages,
        "config": model.config.to_dict(),
        "stage_table": [s.to_dict() for s in model.stage_table],
        "flags": model.flags,
        "data_fingerprint": model.data_fingerprint,
        "folds": folds,
        "fold_assignment": model.fold_assignment.to_dict(),
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_model(directory) -> CascadeModel:
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST} in {root}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{root / MANIFEST}: {e}") from None
    if manifest.get("format") != "cascade-model":
        raise FormatError(f"{root / MANIFEST} is not a cascade model manifest")
    cfg = CascadeConfig.from_dict(manifest["config"])
    folds = []
    for fd in manifest["folds"]:
        stages = [
            SelectiveStage(nn.load_network(root / s["file"]), float(s["threshold"]),
                           float(s["threshold_factor"]), StageStats(**s["stats"]))
            for s in fd["stages"]
        ]
        folds.append(FoldModel(stages, nn.load_network(root / fd["final"])))
    if len({len(f.stages) for f in folds}) > 1:
        raise DataError("folds disagree on the number of stages")
    return CascadeModel(int(manifest["k"]), folds, FoldAssignment.from_dict(manifest["fold_assignment"]), cfg,
                        [StageStats(**s) for s in manifest["stage_table"]], list(manifest.get("flags", [])),
                        manifest.get("data_fingerprint", ""))
