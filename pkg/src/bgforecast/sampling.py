"""Stratified 64/16/20 splitting and SMOTE oversampling of event windows."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.neighbors import NearestNeighbors

from .datamodel import EventLabel, InvalidInputError, ValidationError, WindowSet

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20
    seed: int = 0
    mode: str = "stratified"  # or "block": contiguous in time, no shuffling

    def __post_init__(self):
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ValidationError("split fractions must sum to 1")
        if self.mode not in ("stratified", "block"):
            raise ValidationError(f"unknown split mode {self.mode!r}")


@dataclass
class SplitResult:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    assignment: np.ndarray  # 0/1/2 per input window
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings (independent of PYTHONHASHSEED)."""
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def stratified_split(windows: WindowSet, spec: SplitSpec = SplitSpec(),
                     strata: np.ndarray | None = None) -> SplitResult:
    """Split windows 64/16/20 inside each stratum.

    Strata default to the event labels. Validation and test sizes are
    floored, so remainders go to train; strata with fewer than three windows
    go entirely to train.
    """
    n = len(windows)
    if n == 0:
        raise InvalidInputError("cannot split an empty window set")
    assignment = np.zeros(n, dtype=np.int8)
    warnings: list[str] = []
    if spec.mode == "block":
        order = np.lexsort((windows.anchor_time, windows.subject_ids.astype(str)))
        for sid in np.unique(windows.subject_ids.astype(str)):
            idx = order[windows.subject_ids[order].astype(str) == sid]
            _assign(assignment, idx, spec)
    else:
        strata = windows.labels if strata is None else np.asarray(strata)
        rng = np.random.default_rng(spec.seed)
        for value in _ordered_unique(strata):
            idx = np.flatnonzero(strata == value)
            if len(idx) < 3:
                msg = f"stratum {value!r} has {len(idx)} windows; all assigned to train"
                log.warning(msg)
                warnings.append(msg)
                continue
            _assign(assignment, rng.permutation(idx), spec)
    parts = [windows.take(np.flatnonzero(assignment == k)) for k in range(3)]
    return SplitResult(*parts, assignment=assignment, warnings=warnings)


def _ordered_unique(values: np.ndarray) -> list:
    try:
        return sorted(set(values.tolist()))
    except TypeError:
        return sorted(set(map(str, values.tolist())))


def _assign(assignment: np.ndarray, idx: np.ndarray, spec: SplitSpec) -> None:
    n = len(idx)
    n_val = int(np.floor(spec.val_frac * n + 1e-9))
    n_test = int(np.floor(spec.test_frac * n + 1e-9))
    n_train = n - n_val - n_test
    assignment[idx[n_train:n_train + n_val]] = 1
    assignment[idx[n_train + n_val:]] = 2


def write_split_manifest(result: SplitResult, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window_index", "split"])
        for i, k in enumerate(result.assignment):
            writer.writerow([i, SPLIT_NAMES[k]])
    return path


def smote_features(windows: WindowSet) -> np.ndarray:
    """Neighbour-search space: flattened observations followed by target deltas."""
    return np.concatenate([windows.obs.reshape(len(windows), -1), windows.target_deltas], axis=1)


@dataclass
class SmoteResult:
    windows: WindowSet
    parents: np.ndarray  # [n_synthetic x 2] indices into the input, (x, z)
    weights: np.ndarray  # interpolation factor u per synthetic window
    warnings: list[str] = field(default_factory=list)


def smote_oversample(train: WindowSet, k: int = 5, seed: int = 0,
                     return_details: bool = False):
    """Oversample Hypo and Hyper windows to the size of the largest class.

    A synthetic window is ``x + u * (z - x)`` for a random class member ``x``,
    one of its ``k`` nearest same-class neighbours ``z`` and ``u ~ U[0, 1]``,
    applied to observations, target deltas and anchor glucose alike. Output
    keeps the originals first.
    """
    if len(train) == 0:
        raise InvalidInputError("cannot oversample an empty window set")
    rng = np.random.default_rng(seed)
    counts = train.label_counts()
    target = max(counts.values())
    feats = None
    new_idx, partner, weights, warnings = [], [], [], []
    for lab in (EventLabel.HYPO, EventLabel.HYPER):
        members = np.flatnonzero(train.labels == lab)
        need = target - len(members)
        if len(members) == 0 or need <= 0:
            continue
        if len(members) < 2:
            msg = f"{lab.name} has a single window; replicating without interpolation"
            log.warning(msg)
            warnings.append(msg)
            x = rng.choice(members, size=need)
            new_idx.append(x)
            partner.append(x)
            weights.append(np.zeros(need))
            continue
        if feats is None:
            feats = smote_features(train)
        kk = min(k, len(members) - 1)
        nn = NearestNeighbors(n_neighbors=kk + 1, algorithm="brute").fit(feats[members])
        _, neigh = nn.kneighbors(feats[members])
        neigh = _drop_self(neigh, kk)
        pick = rng.integers(0, len(members), size=need)
        col = rng.integers(0, kk, size=need)
        u = rng.random(need)
        new_idx.append(members[pick])
        partner.append(members[neigh[pick, col]])
        weights.append(u)
    if not new_idx:
        out = train
        parents = np.zeros((0, 2), dtype=np.int64)
        u = np.zeros(0)
    else:
        xi, zi, u = (np.concatenate(a) for a in (new_idx, partner, weights))
        synth = _interpolate(train, xi, zi, u)
        out = WindowSet.concat([train, synth])
        parents = np.column_stack([xi, zi]).astype(np.int64)
    if return_details:
        return SmoteResult(out, parents, u, warnings)
    return out


def _drop_self(neigh: np.ndarray, k: int) -> np.ndarray:
    """Remove each row's own index (duplicates may push it off column 0)."""
    rows = np.arange(neigh.shape[0])
    out = np.empty((neigh.shape[0], k), dtype=np.int64)
    for r in rows:
        others = neigh[r][neigh[r] != r]
        out[r] = others[:k]
    return out


def _interpolate(train: WindowSet, xi, zi, u) -> WindowSet:
    def lerp(a):
        shape = (-1,) + (1,) * (a.ndim - 1)
        return a[xi] + u.reshape(shape) * (a[zi] - a[xi])

    return WindowSet(
        obs=lerp(train.obs),
        target_deltas=lerp(train.target_deltas),
        anchor_glucose=lerp(train.anchor_glucose),
        labels=train.labels[xi].copy(),
        subject_ids=train.subject_ids[xi].copy(),
        anchor_time=train.anchor_time[xi].copy(),
        series_start=train.series_start[xi].copy(),
        normalized=train.normalized,
    )
