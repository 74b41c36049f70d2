"""Cascaded selective classifiers for class-imbalanced candidate classification.

A from-scratch numpy CNN, candidate-set tooling (patchset files, folds,
resampling, augmentation, a synthetic generator), the cascade trainer with
fold-routed inference, and FROC evaluation.
"""

from .cascade import (
    CascadeConfig, CascadeModel, HygieneAudit, ScoreRecord, StageStats, cascade_preset, compute_threshold,
    filter_set, load_model, predict_all, save_model, score_set, train_baseline, train_cascade,
    train_cascade_family, train_stage,
)
from .dataset import (
    CandidateSet, FoldAssignment, Patch, SyntheticConfig, build_balanced, build_inverse_imbalanced,
    generate_synthetic, kfold_split, load_patchset, oversample_augment, save_patchset, subsample,
)
from .errors import CascadeError
from .evaluation import FrocCurve, RunReport, compare_runs, froc, make_report, sensitivity_at
from .nn import Network, TrainConfig, forward, loss_and_grads, sgd_step, train

__version__ = "0.1.0"
