"""Cleartext cooperative SGD: the reference the encrypted pipeline is checked against.

With a polynomial activation this mirrors the encrypted arithmetic exactly
(same batches, same coefficients); with the exact activation it is the
non-private distributed baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import approx as A
from .batches import BatchSchedule
from .params import DatasetPartition, LearningParams, targets


def make_activation(lp: LearningParams, specs=None, exact: bool = False):
    """Row-batch activation U (b, n_out) -> (b, n_out)."""
    if lp.model == "linear":
        return lambda U: U
    if lp.model == "logistic" or (lp.model == "multinomial" and lp.one_vs_all):
        if exact:
            return A.sigmoid
        spec = specs if isinstance(specs, A.ApproxSpec) else specs["sigmoid"]
        return spec
    if exact:
        def softmax(U):
            e = np.exp(U - U.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return softmax
    sm = specs if isinstance(specs, A.SoftmaxSpecs) else specs["softmax"]
    return lambda U: A.softmax_clear(U.T, sm).T


@dataclass
class ShadowResult:
    global_history: list = field(default_factory=list)   # w_G after each round, (c, n_out)
    local_history: list = field(default_factory=list)    # per round: list of (c, n_out)

    @property
    def final(self) -> np.ndarray:
        return self.global_history[-1]


def local_step(W, WG, B, Z, lp: LearningParams, act):
    """One iteration: w <- (1 - alpha rho) w + alpha rho w_G + alpha B^T z - alpha B^T s(B w)."""
    a, ar = lp.alpha, lp.alpha * lp.rho
    V = a * B.T @ act(B @ W)
    MU = a * B.T @ Z
    return (1 - ar) * W + ar * WG + MU - V


def reduce_step(WG, Wsum, lp: LearningParams, n_parties: int):
    ar = lp.alpha * lp.rho
    return (1 - n_parties * ar) * WG + ar * Wsum


def csgd_shadow(parts: list[DatasetPartition], lp: LearningParams, act,
                schedules: list[BatchSchedule] | None = None) -> ShadowResult:
    S = len(parts)
    c = parts[0].c
    T = [targets(p.y, lp) for p in parts]
    n_out = T[0].shape[1]
    if schedules is None:
        schedules = [BatchSchedule(p.n, lp.batch_size, lp.seed, i, lp.sampling) for i, p in enumerate(parts)]
    W = [np.zeros((c, n_out)) for _ in parts]
    WG = np.zeros((c, n_out))
    res = ShadowResult()
    for j in range(lp.global_iters):
        if lp.strategy in ("GB", "HB") and j > 0:
            W = [WG.copy() for _ in parts]
        for i, p in enumerate(parts):
            for l in range(lp.local_iters):
                idx = schedules[i][j * lp.local_iters + l]
                W[i] = local_step(W[i], WG, p.X[idx], T[i][idx], lp, act)
        WG = reduce_step(WG, sum(W), lp, S)
        res.global_history.append(WG.copy())
        res.local_history.append([w.copy() for w in W])
    return res


def predict_clear(W, X, lp: LearningParams, act) -> np.ndarray:
    U = np.asarray(X, dtype=np.float64) @ W
    return U if lp.model == "multinomial" else act(U)
