"""Candidate patches, the patchset file format, fold splitting and resampling.

A ``CandidateSet`` is stored column-wise: one float32 pixel block of shape
[N, C, H, W] plus parallel label / scan / lesion / lineage arrays. That keeps
full-scale bookkeeping (half a million candidates) cheap when the pixel
blocks are small, and lets every resampling operation work on index arrays.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, RoutingError, SamplingError, SplitError

log = logging.getLogger(__name__)

NODULE = 1
NON_NODULE = 0


class ImbalanceWarning(UserWarning):
    """A resampled training set did not come out with the intended class ratio."""


def derive_seed(seed, *keys) -> int:
    """Mix integer ``keys`` into ``seed`` to get an independent 64-bit seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    label: int
    scan_id: str
    lesion_id: str
    augmented_from: str | None = None


class CandidateSet:
    """Ordered, immutable collection of candidate patches."""

    def __init__(self, pixels, labels, scan_ids, lesion_ids, augmented_from=None, validate=True):
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 4:
            raise ConfigurationError(f"pixels must be [N, C, H, W], got shape {pixels.shape}")
        n = len(pixels)
        self.pixels = pixels
        self.labels = np.asarray(labels, dtype=np.int8).reshape(n)
        self.scan_ids = np.asarray(scan_ids, dtype=str).reshape(n)
        self.lesion_ids = np.asarray(lesion_ids, dtype=str).reshape(n)
        if augmented_from is None:
            augmented_from = np.full(n, "", dtype=str)
        self.augmented_from = np.asarray(augmented_from, dtype=str).reshape(n)
        for arr in (self.pixels, self.labels, self.scan_ids, self.lesion_ids, self.augmented_from):
            arr.flags.writeable = False
        if validate:
            self._validate()

    def _validate(self):
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 (non-nodule) or 1 (nodule)")
        originals = self.lesion_ids[self.augmented_from == ""]
        if len(np.unique(originals)) != len(originals):
            raise DataError("duplicate lesion_id among non-augmented patches")

    @classmethod
    def empty(cls, patch_shape=(3, 48, 48)):
        return cls(np.zeros((0, *patch_shape), np.float32), [], [], [])

    @classmethod
    def from_patches(cls, patches, patch_shape=(3, 48, 48)):
        patches = list(patches)
        if not patches:
            return cls.empty(patch_shape)
        return cls(
            np.stack([p.pixels for p in patches]),
            [p.label for p in patches],
            [p.scan_id for p in patches],
            [p.lesion_id for p in patches],
            [p.augmented_from or "" for p in patches],
        )

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise ConfigurationError("concat needs at least one set")
        shapes = {s.patch_shape for s in sets}
        if len(shapes) != 1:
            raise ConfigurationError(f"cannot concatenate sets with patch shapes {sorted(shapes)}")
        return cls(
            np.concatenate([s.pixels for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.scan_ids for s in sets]),
            np.concatenate([s.lesion_ids for s in sets]),
            np.concatenate([s.augmented_from for s in sets]),
        )

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Patch:
        return Patch(self.pixels[i], int(self.labels[i]), str(self.scan_ids[i]),
                     str(self.lesion_ids[i]), str(self.augmented_from[i]) or None)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def patch_shape(self):
        return tuple(self.pixels.shape[1:])

    @property
    def counts(self):
        """``(n_nodule, n_non_nodule)``, always recomputed from the labels."""
        n1 = int(np.count_nonzero(self.labels == NODULE))
        return n1, len(self) - n1

    @property
    def scan_id_set(self):
        return set(np.unique(self.scan_ids).tolist())

    @property
    def n_scans(self):
        return len(np.unique(self.scan_ids))

    @property
    def lineage(self):
        """Original lesion id of every patch (itself unless augmented)."""
        return np.where(self.augmented_from == "", self.lesion_ids, self.augmented_from)

    def class_indices(self, label):
        return np.flatnonzero(self.labels == label)

    def take(self, indices) -> "CandidateSet":
        idx = np.asarray(indices, dtype=np.int64)
        return CandidateSet(self.pixels[idx], self.labels[idx], self.scan_ids[idx],
                            self.lesion_ids[idx], self.augmented_from[idx], validate=False)

    def mask(self, keep) -> "CandidateSet":
        return self.take(np.flatnonzero(np.asarray(keep, bool)))

    def __repr__(self):
        n1, n0 = self.counts
        return f"CandidateSet(nodules={n1}, non_nodules={n0}, patch_shape={self.patch_shape})"


def fingerprint(cset: CandidateSet) -> str:
    """SHA-256 over pixels, labels and identifiers."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cset.pixels, dtype="<f4").tobytes())
    h.update(cset.labels.astype(np.int8).tobytes())
    for arr in (cset.scan_ids, cset.lesion_ids, cset.augmented_from):
        h.update("\x00".join(arr.tolist()).encode())
        h.update(b"\x01")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# patchset files

MAGIC = b"PSET"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")
INDEX_HEADER = ["record", "scan_id", "lesion_id", "label", "augmented_from"]


def index_path(path) -> Path:
    """Sidecar index CSV that accompanies a patchset file."""
    return Path(path).with_suffix(".csv")


def save_patchset(cset: CandidateSet, path):
    path = Path(path)
    c, h, w = cset.patch_shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(cset), c, h, w))
        f.write(np.ascontiguousarray(cset.pixels, dtype="<f4").tobytes())
    with open(index_path(path), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        for i in range(len(cset)):
            writer.writerow([i, cset.scan_ids[i], cset.lesion_ids[i], int(cset.labels[i]), cset.augmented_from[i]])


def load_patchset(path) -> CandidateSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated patchset header", len(data))
    magic, version, n, c, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported patchset version {version}", 4)
    expected = _HEADER.size + 4 * n * c * h * w
    if len(data) < expected:
        raise FormatError(f"truncated pixel data: expected {expected} bytes, file has {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after last record", expected)
    pixels = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=_HEADER.size)
    pixels = pixels.astype(np.float32).reshape(n, c, h, w)

    idx = index_path(path)
    if not idx.exists():
        raise FormatError(f"missing sidecar index {idx}")
    with open(idx, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != INDEX_HEADER:
        raise FormatError(f"{idx}: bad index header {rows[0] if rows else None}")
    rows = rows[1:]
    if len(rows) != n:
        raise FormatError(f"{idx}: index has {len(rows)} rows but patchset has {n} records")
    for i, row in enumerate(rows):
        if len(row) != 5 or row[0] != str(i):
            raise FormatError(f"{idx}: row {i + 1} is not record {i}")
    try:
        labels = [int(r[3]) for r in rows]
    except ValueError as e:
        raise FormatError(f"{idx}: bad label: {e}") from None
    return CandidateSet(pixels, labels, [r[1] for r in rows], [r[2] for r in rows], [r[4] for r in rows])


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldAssignment:
    k: int
    fold_of: dict
    granularity: str = "lesion"

    def fold_array(self, cset: CandidateSet) -> np.ndarray:
        """Fold index of every patch; augmented copies follow their source lesion."""
        try:
            return np.array([self.fold_of[lid] for lid in cset.lineage.tolist()], dtype=np.int64)
        except KeyError as e:
            raise RoutingError(f"lesion {e.args[0]!r} is not covered by the fold assignment") from None

    def covers(self, cset: CandidateSet) -> bool:
        return all(lid in self.fold_of for lid in cset.lineage.tolist())

    def partition(self, cset: CandidateSet):
        """Split ``cset`` into its k test partitions."""
        folds = self.fold_array(cset)
        return [cset.take(np.flatnonzero(folds == f)) for f in range(self.k)]

    def to_dict(self):
        return {"k": self.k, "granularity": self.granularity, "fold_of": self.fold_of}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["k"]), {str(k): int(v) for k, v in d["fold_of"].items()}, d.get("granularity", "lesion"))


def kfold_split(cset: CandidateSet, k=10, seed=0, granularity="lesion") -> FoldAssignment:
    """Stratified k-fold assignment of every non-augmented lesion.

    With ``granularity="lesion"`` each class is dealt round-robin over a
    seeded permutation, so per-class fold sizes differ by at most one.
    ``granularity="scan"`` keeps all candidates of a scan in one fold; scans
    are dealt greedily by positive count so class balance is approximate.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    originals = np.flatnonzero(cset.augmented_from == "")
    labels = cset.labels[originals]
    for label in (NODULE, NON_NODULE):
        m = int(np.count_nonzero(labels == label))
        if m < k:
            raise SplitError(f"class {label} has {m} candidates, fewer than k={k}")
    rng = np.random.default_rng(seed)
    fold_of = {}
    if granularity == "lesion":
        offset = 0
        for label in (NODULE, NON_NODULE):
            members = originals[labels == label]
            perm = rng.permutation(len(members))
            folds = (offset + np.arange(len(members))) % k
            for lid, f in zip(cset.lesion_ids[members[perm]].tolist(), folds.tolist()):
                fold_of[lid] = f
            offset = (offset + len(members)) % k
    elif granularity == "scan":
        scans, inverse = np.unique(cset.scan_ids[originals], return_inverse=True)
        pos = np.bincount(inverse, weights=labels == NODULE, minlength=len(scans))
        tot = np.bincount(inverse, minlength=len(scans))
        order = np.lexsort((rng.permutation(len(scans)), -tot, -pos))
        load = np.zeros((k, 2))
        scan_fold = np.empty(len(scans), np.int64)
        for s in order:
            f = int(np.lexsort((np.arange(k), load[:, 1], load[:, 0]))[0])
            scan_fold[s] = f
            load[f] += (pos[s], tot[s] - pos[s])
        for lid, s in zip(cset.lesion_ids[originals].tolist(), inverse.tolist()):
            fold_of[lid] = int(scan_fold[s])
    else:
        raise ConfigurationError(f"unknown split granularity {granularity!r}")
    return FoldAssignment(k, fold_of, granularity)


# ---------------------------------------------------------------------------
# resampling and augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle_range: tuple = (0.0, 360.0)
    scale_range: tuple = (0.85, 1.15)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"scale_range must satisfy 0 < s_min <= s_max, got {self.scale_range}")
        a0, a1 = self.angle_range
        if not a0 <= a1:
            raise ConfigurationError(f"bad angle_range {self.angle_range}")

    def to_dict(self):
        return {"angle_range": list(self.angle_range), "scale_range": list(self.scale_range)}


def rotate_scale(pixels, angles, scales):
    """Rotate each [C,H,W] block about its center, then scale isotropically.

    Inverse-mapped bilinear sampling with edge replication outside the frame.
    ``pixels`` is [M,C,H,W]; ``angles`` (degrees) and ``scales`` have length M.
    A positive angle turns the image the same way as ``np.rot90`` with k=1.
    """
    pixels = np.asarray(pixels, np.float32)
    m, c, h, w = pixels.shape
    theta = np.deg2rad(np.asarray(angles, np.float64)).reshape(m, 1, 1)
    scale = np.asarray(scales, np.float64).reshape(m, 1, 1)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    # output (y, x) samples the source at R(theta)^T (y, x) / s
    sy = (cos * yy + sin * xx) / scale + cy
    sx = (-sin * yy + cos * xx) / scale + cx
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[:, None]
    src = pixels.astype(np.float64)
    bi = np.arange(m)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def at(yi, xi):
        return src[bi, ci, yi[:, None], xi[:, None]]

    out = (at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx
           + at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx)
    return out.astype(np.float32)


def augment_patch(p: Patch, angle, scale) -> Patch:
    if not scale > 0:
        raise ConfigurationError(f"scale must be positive, got {scale}")
    out = rotate_scale(p.pixels[None], [angle], [scale])[0]
    return Patch(out, p.label, p.scan_id, f"{p.lesion_id}~aug", p.augmented_from or p.lesion_id)


def subsample(cset: CandidateSet, label, n, seed) -> CandidateSet:
    """Keep ``n`` uniformly chosen patches of ``label``; the other class is untouched."""
    members = cset.class_indices(label)
    if n < 0 or n > len(members):
        raise SamplingError(f"cannot subsample {n} of {len(members)} patches with label {label}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(members, size=n, replace=False) if n else members[:0]
    keep = np.sort(np.concatenate([cset.class_indices(1 - label), chosen]))
    return cset.take(keep)


def oversample_augment(cset: CandidateSet, label, factor, params=AugmentParams(), seed=0) -> CandidateSet:
    """Each patch of ``label`` keeps its original and gains ``factor - 1`` augmented copies.

    Copies are appended after the input, grouped by copy round.
    """
    if factor < 1:
        raise ConfigurationError(f"oversampling factor must be >= 1, got {factor}")
    members = cset.class_indices(label)
    if factor == 1 or len(members) == 0:
        return cset
    rng = np.random.default_rng(seed)
    reps = np.tile(members, factor - 1)
    angles = rng.uniform(*params.angle_range, size=len(reps))
    scales = rng.uniform(*params.scale_range, size=len(reps))
    pixels = np.empty((len(reps), *cset.patch_shape), np.float32)
    step = 1024
    for i in range(0, len(reps), step):
        pixels[i:i + step] = rotate_scale(cset.pixels[reps[i:i + step]], angles[i:i + step], scales[i:i + step])
    rounds = np.repeat(np.arange(1, factor), len(members))
    lesion_ids = np.char.add(np.char.add(cset.lesion_ids[reps], "~a"), rounds.astype(str))
    aug = CandidateSet(pixels, cset.labels[reps], cset.scan_ids[reps], lesion_ids,
                       cset.lineage[reps], validate=False)
    return CandidateSet.concat([cset, aug])


def build_inverse_imbalanced(train_folds, per_fold_negatives=200, oversample_factor=9,
                             params=AugmentParams(), seed=0, allow_short=False) -> CandidateSet:
    """Training set for a selective stage: few negatives, many (augmented) nodules.

    A fold holding fewer than ``per_fold_negatives`` non-nodules is an error,
    unless ``allow_short`` is set, in which case all of its non-nodules are
    used and an ``ImbalanceWarning`` is issued.
    """
    if not train_folds:
        raise ConfigurationError("need at least one training fold")
    parts = []
    for i, fold in enumerate(train_folds):
        n0 = fold.counts[1]
        take = per_fold_negatives
        if n0 < per_fold_negatives:
            msg = f"training fold {i} has {n0} non-nodules, fewer than {per_fold_negatives}"
            if not allow_short:
                raise SamplingError(msg)
            warnings.warn(msg + "; using all", ImbalanceWarning, stacklevel=2)
            take = n0
        parts.append(subsample(fold, NON_NODULE, take, derive_seed(seed, 1, i)))
    out = oversample_augment(CandidateSet.concat(parts), NODULE, oversample_factor, params, derive_seed(seed, 2))
    n1, n0 = out.counts
    if n1 <= n0:
        warnings.warn(f"inverse-imbalanced set is not inverted: {n1} nodules vs {n0} non-nodules",
                      ImbalanceWarning, stacklevel=2)
    return out


def build_balanced(train_folds, oversample_factor=10, params=AugmentParams(), seed=0) -> CandidateSet:
    """Training set with equal class counts: oversampled nodules, subsampled non-nodules."""
    if not train_folds:
        raise ConfigurationError("need at least one training fold")
    pool = CandidateSet.concat(train_folds)
    out = oversample_augment(pool, NODULE, oversample_factor, params, derive_seed(seed, 2))
    n1, n0 = out.counts
    if n0 < n1:
        warnings.warn(f"only {n0} non-nodules available to balance {n1} nodules; using all",
                      ImbalanceWarning, stacklevel=2)
        return out
    return subsample(out, NON_NODULE, n1, derive_seed(seed, 3))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_scans: int = 50
    positives_per_scan: int = 2
    negatives_per_scan: int = 800
    hard_negative_fraction: float = 0.1
    noise_level: float = 0.08
    seed: int = 0
    patch_size: int = 48
    channels: int = 3

    def __post_init__(self):
        if self.n_scans < 1:
            raise ConfigurationError("n_scans must be positive")
        if self.positives_per_scan < 0 or self.negatives_per_scan < 0:
            raise ConfigurationError("per-scan counts must be non-negative")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise ConfigurationError("hard_negative_fraction must be in [0, 1]")
        if not self.noise_level > 0:
            raise ConfigurationError("noise_level must be positive")
        if self.patch_size < 4 or self.channels < 1:
            raise ConfigurationError("patch_size must be >= 4 and channels >= 1")

    def to_dict(self):
        return dict(self.__dict__)


def _background(rng, n, c, size, noise):
    base = rng.uniform(0.15, 0.3, size=(n, 1, 1, 1))
    # slow gradient across the patch, shared by the slices
    g = rng.normal(0.0, 0.05, size=(n, 2, 1, 1))
    ramp = np.linspace(-0.5, 0.5, size)
    field_ = base + g[:, :1] * ramp[None, None, :, None] + g[:, 1:] * ramp[None, None, None, :]
    return field_ + rng.normal(0.0, noise, size=(n, c, size, size))


def _slice_offsets(c):
    return np.arange(c, dtype=np.float64) - (c - 1) / 2.0


def _blobs(rng, n, c, size):
    s = size / 48.0
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    centre = (size - 1) / 2.0 + rng.uniform(-6 * s, 6 * s, size=(n, 2))
    radius = rng.uniform(4 * s, 10 * s, size=n)
    amp = rng.uniform(0.25, 0.65, size=n)
    d2 = (yy[None] - centre[:, 0, None, None]) ** 2 + (xx[None] - centre[:, 1, None, None]) ** 2
    out = np.empty((n, c, size, size))
    for j, z in enumerate(_slice_offsets(c)):
        # roughly spherical: outer slices cut the ball off-centre
        r_slice = radius * np.sqrt(np.clip(1.0 - (0.5 * z) ** 2, 0.2, 1.0))
        sigma = r_slice / 1.5
        out[:, j] = amp[:, None, None] * np.exp(-d2 / (2 * sigma[:, None, None] ** 2))
    return out


def _structures(rng, n, c, size):
    """Vessel-like lines, rib-like arcs and obliquely cut vessels.

    The oblique vessels are small round spots, nodule-like within one slice,
    that drift sideways from slice to slice.
    """
    s = size / 48.0
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    ctr = (size - 1) / 2.0
    amp = rng.uniform(0.35, 0.65, size=n)
    width = rng.uniform(1.0 * s, 2.5 * s, size=n)
    kind = rng.choice(3, size=n, p=(0.35, 0.35, 0.3))  # line, arc, spot
    phi = rng.uniform(0, np.pi, size=n)
    offset = rng.uniform(-6 * s, 6 * s, size=n)
    drift = rng.uniform(-1.5 * s, 1.5 * s, size=n)
    arc_r = rng.uniform(20 * s, 40 * s, size=n)
    spot_c = ctr + rng.uniform(-6 * s, 6 * s, size=(n, 2))
    spot_r = rng.uniform(2 * s, 5 * s, size=n)
    spot_step = rng.uniform(2 * s, 4 * s, size=n)
    out = np.empty((n, c, size, size))
    ny, nx = np.cos(phi)[:, None, None], np.sin(phi)[:, None, None]
    for j, z in enumerate(_slice_offsets(c)):
        off = (offset + drift * z)[:, None, None]
        signed = (yy[None] - ctr) * ny + (xx[None] - ctr) * nx - off
        # arc: distance to a circle whose centre lies outside the patch along the normal
        cy = ctr + ny * (off + arc_r[:, None, None])
        cx = ctr + nx * (off + arc_r[:, None, None])
        ring = np.sqrt((yy[None] - cy) ** 2 + (xx[None] - cx) ** 2) - arc_r[:, None, None]
        sy = (spot_c[:, 0] + spot_step * z * np.sin(phi))[:, None, None]
        sx = (spot_c[:, 1] + spot_step * z * np.cos(phi))[:, None, None]
        spot = np.sqrt((yy[None] - sy) ** 2 + (xx[None] - sx) ** 2) * (width / spot_r)[:, None, None]
        dist = np.select([kind[:, None, None] == 0, kind[:, None, None] == 1], [signed, ring], spot)
        out[:, j] = amp[:, None, None] * np.exp(-dist ** 2 / (2 * width[:, None, None] ** 2))
    return out


def generate_synthetic(cfg: SyntheticConfig) -> CandidateSet:
    """Seeded imbalanced candidate set: bright blobs vs noise, lines and arcs.

    Candidates are grouped by scan; within a scan nodules come first.
    """
    rng = np.random.default_rng(cfg.seed)
    c, size = cfg.channels, cfg.patch_size
    n_pos = cfg.n_scans * cfg.positives_per_scan
    n_neg = cfg.n_scans * cfg.negatives_per_scan
    n_hard = int(round(cfg.hard_negative_fraction * n_neg))
    hard = np.zeros(n_neg, bool)
    hard[rng.choice(n_neg, size=n_hard, replace=False)] = True

    pos = _background(rng, n_pos, c, size, cfg.noise_level) + _blobs(rng, n_pos, c, size)
    neg = _background(rng, n_neg, c, size, cfg.noise_level)
    if n_hard:
        neg[hard] += _structures(rng, n_hard, c, size)
    pos = np.clip(pos, 0.0, 1.0).astype(np.float32)
    neg = np.clip(neg, 0.0, 1.0).astype(np.float32)

    pixels = np.empty((n_pos + n_neg, c, size, size), np.float32)
    labels = np.empty(n_pos + n_neg, np.int8)
    scan_ids, lesion_ids = [], []
    p = q = row = 0
    for s in range(cfg.n_scans):
        scan = f"scan{s:04d}"
        for j in range(cfg.positives_per_scan + cfg.negatives_per_scan):
            if j < cfg.positives_per_scan:
                pixels[row], labels[row] = pos[p], NODULE
                p += 1
            else:
                pixels[row], labels[row] = neg[q], NON_NODULE
                q += 1
            scan_ids.append(scan)
            lesion_ids.append(f"{scan}_c{j:05d}")
            row += 1
    return CandidateSet(pixels, labels, scan_ids, lesion_ids)


def preset(name) -> SyntheticConfig:
    """Named synthetic configurations."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


PRESETS = {
    # 50 scans, 100 nodules, 40,000 non-nodules: the 400:1 imbalance on 16x16 patches
    "desk": SyntheticConfig(n_scans=50, positives_per_scan=2, negatives_per_scan=800,
                            hard_negative_fraction=0.1, noise_level=0.08, patch_size=16),
    "desk48": SyntheticConfig(n_scans=50, positives_per_scan=2, negatives_per_scan=800,
                              hard_negative_fraction=0.1, noise_level=0.08, patch_size=48),
    "tiny": SyntheticConfig(n_scans=10, positives_per_scan=2, negatives_per_scan=40,
                            hard_negative_fraction=0.25, noise_level=0.08, patch_size=16),
}
