import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_cnn import dataset as ds
from cascade_cnn import nn
from cascade_cnn.cascade import (
    CascadeConfig, HygieneAudit, cascade_preset, compute_threshold, filter_set, load_model, predict_all,
    save_model, score_set, train_baseline, train_cascade, train_cascade_family, train_stage,
)
from cascade_cnn.errors import ConfigurationError, EvaluationError, FormatError

FAST = nn.TrainConfig(learning_rate=0.1, epochs=15, batch_size=32, dropout_rate=0.5)


@pytest.fixture(scope="module")
def tiny():
    return ds.generate_synthetic(ds.preset("tiny"))


def fast_cfg(**kw):
    base = dict(k=5, per_fold_negatives=10, stage_train=FAST, final_train=FAST, final_oversample=4,
                stage_oversample=3)
    return cascade_preset("desk", **{**base, **kw})


@pytest.fixture(scope="module")
def family(tiny):
    audit = HygieneAudit()
    return train_cascade_family(tiny, fast_cfg(), [0, 1, 2], audit=audit), audit


# --- threshold and filtering ------------------------------------------------


def test_threshold_anchor():
    # two-point mass at 0 and 0.8 has population sigma 0.4
    assert compute_threshold([0.0, 0.8], 0.25) == 0.1
    assert compute_threshold([0.3] * 7, 0.25) == 0.0
    assert compute_threshold([0, 0, 1, 1], 0.25) == 0.125


def test_threshold_matches_independent_stddev():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.random(int(rng.integers(1, 300)))
        mean = sum(p) / len(p)
        sigma = (sum((x - mean) ** 2 for x in p) / len(p)) ** 0.5
        assert abs(compute_threshold(p, 0.25) - 0.25 * sigma) <= 1e-6


def test_threshold_errors_and_clamp():
    with pytest.raises(EvaluationError):
        compute_threshold([], 0.25)
    with pytest.raises(ConfigurationError):
        compute_threshold([0.1], -1)
    assert compute_threshold([0, 1], 10) == 1.0


def test_filter_boundary_kept(tiny):
    s = tiny.take(np.arange(3))
    kept, removed, stats = filter_set(s, [0.05, 0.1, 0.9], 0.1)
    assert kept.lesion_ids.tolist() == s.lesion_ids[1:].tolist()
    assert removed.lesion_ids.tolist() == [s.lesion_ids[0]]
    assert (stats.n_nodule_before + stats.n_non_nodule_before) == 3
    assert len(filter_set(s, [0.2] * 3, 0)[0]) == 3
    assert len(filter_set(s, [1.0] * 3, 1.5)[0]) == 0
    with pytest.raises(EvaluationError):
        filter_set(s, [0.1], 0.1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.floats(0, 1))
def test_filter_partitions_input(tiny, seed, t):
    probs = np.random.default_rng(seed).random(len(tiny))
    kept, removed, stats = filter_set(tiny, probs, t)
    assert set(kept.lesion_ids) | set(removed.lesion_ids) == set(tiny.lesion_ids)
    assert not set(kept.lesion_ids) & set(removed.lesion_ids)
    assert (stats.n_nodule_after, stats.n_non_nodule_after) == kept.counts
    assert (stats.n_nodule_before, stats.n_non_nodule_before) == tiny.counts


def test_score_set_zero_final_layer(tiny):
    net = nn.Network.build(nn.compact_architecture(), tiny.patch_shape, 0)
    # zero the last dense layer only
    last = max(i for i, p in enumerate(net.params) if p)
    params = [tuple(np.zeros_like(a) for a in p) if i == last else p for i, p in enumerate(net.params)]
    zero = net.with_params(params)
    assert np.all(score_set(zero, tiny) == 0.5)
    assert score_set(zero, tiny.take([])).shape == (0,)
    a, b = score_set(net, tiny), score_set(net, tiny)
    assert a.tobytes() == b.tobytes()
    wrong = nn.Network.build(nn.compact_architecture(), (3, 20, 20), 0)
    with pytest.raises(ConfigurationError):
        score_set(wrong, tiny)


# --- stages -----------------------------------------------------------------


def test_train_stage_factor_zero_keeps_everything(tiny):
    cfg = fast_cfg(threshold_factor=0.0)
    fa = ds.kfold_split(tiny, cfg.k, 0)
    stage = train_stage(tiny, fa, 0, cfg, 7)
    assert stage.threshold == 0.0
    s = stage.stats
    assert (s.n_nodule_before, s.n_non_nodule_before) == (s.n_nodule_after, s.n_non_nodule_after)


def test_stage_sigma_matches_recomputation(tiny):
    cfg = fast_cfg()
    fa = ds.kfold_split(tiny, cfg.k, 0)
    stage = train_stage(tiny, fa, 2, cfg, 11)
    held_out = fa.partition(tiny)[2]
    probs = score_set(stage.net, held_out).astype(np.float64)
    assert stage.stats.sigma == pytest.approx(np.std(probs), abs=1e-12)
    assert stage.threshold == pytest.approx(0.25 * np.std(probs), abs=1e-12)


def test_cascade_reduces_negatives(family):
    fam, _ = family
    _, table = fam[2]
    assert len(table) == 2
    assert table[0].n_non_nodule_after < table[0].n_non_nodule_before
    assert table[1].n_non_nodule_before == table[0].n_non_nodule_after


# --- whole cascades ---------------------------------------------------------


def test_zero_stage_has_no_rejections(family, tiny):
    model, table = family[0][0]
    assert model.n_stages == 0 and table == []
    records = predict_all(model, tiny)
    assert all(r.rejected_at is None for r in records)


def test_rejected_records_score_zero(family, tiny):
    model, _ = family[0][2]
    records = predict_all(model, tiny)
    rejected = [r for r in records if r.rejected_at is not None]
    assert rejected, "expected the stages to reject something"
    assert all(r.score == 0.0 and 1 <= r.rejected_at <= 2 for r in rejected)


def test_routing_matches_training_pools(family, tiny):
    # a candidate is rejected by predict_all exactly when training dropped it from its fold's pool
    model, table = family[0][2]
    records = predict_all(model, tiny)
    alive_after = sum(r.rejected_at is None for r in records)
    assert alive_after == table[-1].n_nodule_after + table[-1].n_non_nodule_after


def test_family_equals_standalone(family, tiny):
    model, table = family[0][1]
    alone, alone_table = train_cascade(tiny, fast_cfg(n_stages=1))
    assert [s.to_dict() for s in table] == [s.to_dict() for s in alone_table]
    for a, b in zip(model.folds, alone.folds):
        assert a.final.same_params(b.final)
        assert a.stages[0].net.same_params(b.stages[0].net)


def test_zero_stages_is_baseline(tiny, family):
    base, _ = train_baseline(tiny, fast_cfg(n_stages=3))
    zero = family[0][0][0]
    assert all(a.final.same_params(b.final) for a, b in zip(base.folds, zero.folds))
    assert base.config == zero.config


def test_zero_threshold_cascade_matches_baseline_scores(tiny):
    cfg = fast_cfg(threshold_factor=0.0, n_stages=1)
    casc, _ = train_cascade(tiny, cfg)
    base, _ = train_baseline(tiny, cfg)
    a = predict_all(casc, tiny)
    b = predict_all(base, tiny)
    assert [r.score for r in a] == [r.score for r in b]


def test_hygiene_audit_clean(family, tiny):
    fam, audit = family
    for depth, (model, _) in fam.items():
        predict_all(model, tiny, audit=audit)
    assert audit.violations() == []
    assert audit.trained_on and audit.scored


def test_hygiene_audit_catches_leak(tiny):
    audit = HygieneAudit()
    audit.record_training((0, 1), tiny.take([0, 1]))
    audit.record_scoring((0, 1), tiny.take([1, 2]))
    # an augmented copy in training taints its source lesion
    nod = int(np.flatnonzero(tiny.labels == 1)[2])
    aug = ds.oversample_augment(tiny.take([nod]), ds.NODULE, 2, seed=0)
    audit.record_training((1, "final"), aug.take([1]))
    audit.record_scoring((1, "final"), tiny.take([nod]))
    assert audit.violations() == [((0, 1), tiny.lesion_ids[1]), ((1, "final"), tiny.lesion_ids[nod])]


def test_model_round_trip(family, tiny, tmp_path):
    model, _ = family[0][2]
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.n_stages == 2 and back.config == model.config
    assert back.fold_assignment.fold_of == model.fold_assignment.fold_of
    assert [r.to_dict() for r in predict_all(back, tiny)] == [r.to_dict() for r in predict_all(model, tiny)]
    save_model(back, tmp_path / "m2")
    for f in sorted((tmp_path / "m").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "m2" / f.relative_to(tmp_path / "m")).read_bytes()


def test_load_model_errors(tmp_path):
    with pytest.raises(FormatError):
        load_model(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(FormatError):
        load_model(tmp_path)


def test_stops_early_when_a_class_runs_out(tiny):
    # a threshold clamped to 1 rejects every candidate, leaving nothing to train stage 2 on
    # and the finals fall back to the pool before that stage
    cfg = fast_cfg(n_stages=3, threshold_factor=50.0)
    model, table = train_cascade(tiny, cfg)
    assert model.stopped_early
    assert model.flags[0].startswith("stopped before stage 2")
    assert model.flags[-1].startswith("stopped before stage 1: final networks cannot be trained")
    assert table == [] and model.n_stages == 0
    assert all(r.rejected_at is None for r in predict_all(model, tiny))


def test_short_fold_trains_on_what_it_has(tiny):
    cfg = fast_cfg(n_stages=2, per_fold_negatives=70)
    with pytest.raises(ds.SamplingError):
        ds.build_inverse_imbalanced(ds.kfold_split(tiny, 5, 0).partition(tiny)[1:], 90, 3)
    model, table = train_cascade(tiny, cfg)
    assert len(table) == 2 and not model.stopped_early
    assert any("fewer than 70; using all" in f for f in model.flags)


def test_config_round_trip_and_validation():
    cfg = cascade_preset("desk", seed=5)
    assert CascadeConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    ref = cascade_preset("reference")
    assert (ref.per_fold_negatives, ref.stage_oversample, ref.final_oversample, ref.k) == (200, 9, 10, 10)
    assert ref.threshold_factor == 0.25
    with pytest.raises(ConfigurationError):
        cascade_preset("nope")
    with pytest.raises(ConfigurationError):
        CascadeConfig(n_stages=-1)
    with pytest.raises(ConfigurationError):
        CascadeConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        replace(cfg, sigma_population="median")
