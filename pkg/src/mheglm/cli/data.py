"""CSV ingestion and horizontal splitting across parties."""
from __future__ import annotations

import csv

import numpy as np

from ..errors import IngestionError
from ..train.params import DatasetPartition


def load_csv(path, label: str = "label", features=None):
    """Rectangular numeric CSV with a header -> (X, y, feature names)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label not in header:
        raise IngestionError(f"{path}: label column {label!r} not found (columns: {header})")
    feats = list(features) if features else [h for h in header if h != label]
    for f in feats:
        if f not in header:
            raise IngestionError(f"{path}: feature column {f!r} not found")
    idx = [header.index(f) for f in feats]
    li = header.index(label)
    X, y = [], []
    for i, r in enumerate(rows[1:], start=1):
        if not r or all(not x.strip() for x in r):
            continue
        if len(r) != len(header):
            raise IngestionError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        try:
            X.append([float(r[j]) for j in idx])
            y.append(float(r[li]))
        except ValueError as e:
            raise IngestionError(f"{path}: row {i}: non-numeric cell ({e})") from None
    if not X:
        raise IngestionError(f"{path}: no data rows")
    X = np.array(X)
    if not np.isfinite(X).all():
        bad = int(np.where(~np.isfinite(X).all(axis=1))[0][0]) + 1
        raise IngestionError(f"{path}: row {bad}: non-finite value")
    return X, np.array(y), feats


def split(X, y, n_parties: int, mode: str = "even", proportions=()) -> list[DatasetPartition]:
    """Horizontal split in row order: even (sizes differ by at most one) or by proportions."""
    X = np.asarray(X)
    y = np.asarray(y)
    if n_parties < 1 or n_parties > len(y):
        raise IngestionError(f"cannot split {len(y)} rows across {n_parties} parties")
    if mode == "even":
        chunks = np.array_split(np.arange(len(y)), n_parties)
    elif mode == "proportional":
        p = np.asarray(proportions, dtype=np.float64)
        if len(p) != n_parties or (p <= 0).any():
            raise IngestionError("need one positive proportion per party")
        cuts = np.round(np.cumsum(p / p.sum())[:-1] * len(y)).astype(int)
        chunks = np.split(np.arange(len(y)), cuts)
        if any(len(c) == 0 for c in chunks):
            raise IngestionError("a proportion leaves a party without rows")
    else:
        raise IngestionError(f"unknown split mode {mode!r}")
    return [DatasetPartition(X[c], y[c], meta={"rows": (int(c[0]), int(c[-1]) + 1)}) for c in chunks]


def kfold(n: int, k: int, seed: int = 0):
    """Yield (train, test) index arrays for k shuffled folds (k=1: everything trains and tests)."""
    perm = np.random.default_rng(seed).permutation(n)
    if k <= 1:
        yield perm, perm
        return
    folds = np.array_split(perm, k)
    for i in range(k):
        yield np.concatenate([folds[j] for j in range(k) if j != i]), folds[i]
