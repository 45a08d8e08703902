"""Learning hyper-parameters and per-party data."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..errors import ParameterError

MODELS = ("linear", "logistic", "multinomial")
STRATEGIES = ("LB", "GB", "HB")


@dataclass
class LearningParams:
    alpha: float = 0.1
    rho: float = 0.1
    batch_size: int = 8
    global_iters: int = 3
    local_iters: int = 3
    model: str = "logistic"
    classes: tuple = ()
    strategy: str = "LB"
    packing: str = "auto"           # rba | da | auto
    threads: int = 1
    root_policy: str = "fixed"      # fixed | round_robin
    sampling: str = "cyclic"        # cyclic | uniform
    one_vs_all: bool = False
    value_bound: float = 16.0       # |value| bound used to size bootstrap masks
    seed: int = 0

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        self.classes = tuple(self.classes)

    # short aliases matching the usual notation
    @property
    def b(self) -> int:
        return self.batch_size

    @property
    def g(self) -> int:
        return self.global_iters

    @property
    def m(self) -> int:
        return self.local_iters

    def validate(self, n_parties: int, min_rows: int | None = None):
        if self.alpha <= 0 or self.rho < 0:
            raise ParameterError("need alpha > 0 and rho >= 0")
        if self.model not in MODELS:
            raise ParameterError(f"unknown model kind {self.model!r}")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown bootstrap strategy {self.strategy!r}")
        if self.packing not in ("rba", "da", "auto"):
            raise ParameterError(f"unknown packing {self.packing!r}")
        if self.model == "multinomial" and len(self.classes) < 2:
            raise ParameterError("multinomial model needs at least two classes")
        if self.batch_size < 1 or self.global_iters < 1 or self.local_iters < 0:
            raise ParameterError("batch size and iteration counts must be positive")
        if min_rows is not None and self.batch_size > min_rows:
            raise ParameterError(f"batch size {self.batch_size} exceeds smallest partition ({min_rows} rows)")
        k = 1.0 - n_parties * self.alpha * self.rho
        if not np.isfinite(k):
            raise ParameterError("1 - |S| alpha rho is not finite")
        if self.root_policy not in ("fixed", "round_robin"):
            raise ParameterError(f"unknown root policy {self.root_policy!r}")
        if self.sampling not in ("cyclic", "uniform"):
            raise ParameterError(f"unknown batch sampling {self.sampling!r}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class DatasetPartition:
    X: np.ndarray
    y: np.ndarray
    stats: Standardizer | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y).ravel()
        if len(self.X) != len(self.y):
            raise ParameterError("X and y have different row counts")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def c(self) -> int:
        return self.X.shape[1]


def check_labels(parts, lp: LearningParams):
    for p in parts:
        y = p.y
        if lp.model == "logistic" and not np.isin(y, (0, 1)).all():
            raise ParameterError("logistic labels must be 0/1")
        if lp.model == "multinomial" and not np.isin(y, lp.classes).all():
            raise ParameterError("labels outside the class set")


def global_standardizer(parts) -> Standardizer:
    """Global mean/std from per-party (n, sum, sum of squares) aggregates."""
    n = sum(p.n for p in parts)
    s1 = sum(p.X.sum(axis=0) for p in parts)
    s2 = sum((p.X ** 2).sum(axis=0) for p in parts)
    mean = s1 / n
    var = np.maximum(s2 / n - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return Standardizer(mean, std)


def with_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((len(X), 1))])


def targets(y, lp: LearningParams) -> np.ndarray:
    """Per-class target columns: (n, n_out) with n_out = 1 unless multinomial."""
    y = np.asarray(y)
    if lp.model == "multinomial":
        return np.stack([(y == k).astype(np.float64) for k in lp.classes], axis=1)
    return y.astype(np.float64).reshape(-1, 1)
