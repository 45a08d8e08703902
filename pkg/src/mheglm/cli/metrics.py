"""Metrics and run reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def classification(y, yhat) -> dict:
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    acc = float((y == yhat).mean())
    labels = np.unique(np.concatenate([y, yhat]))
    f1s = []
    for k in labels:
        tp = np.sum((yhat == k) & (y == k))
        fp = np.sum((yhat == k) & (y != k))
        fn = np.sum((yhat != k) & (y == k))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)
    # binary: F1 of the positive class; multiclass: macro average
    f1 = f1s[-1] if len(labels) == 2 and set(labels) <= {0, 1} else float(np.mean(f1s))
    return {"accuracy": acc, "f1": float(f1)}


def regression(y, yhat) -> dict:
    d = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return {"mse": float(np.mean(d ** 2)), "mae": float(np.mean(np.abs(d)))}


@dataclass
class MetricsReport:
    accuracy: float | None = None
    f1: float | None = None
    mse: float | None = None
    mae: float | None = None
    baseline: dict = field(default_factory=dict)       # cleartext run with the same hyperparameters
    folds: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)        # phase -> seconds
    op_counters: dict = field(default_factory=dict)
    messages: dict = field(default_factory=dict)
    bytes: dict = field(default_factory=dict)
    bootstraps: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, folds: list[dict], **kw) -> "MetricsReport":
        r = cls(folds=folds, **kw)
        for k in ("accuracy", "f1", "mse", "mae"):
            vals = [f[k] for f in folds if f.get(k) is not None]
            if vals:
                setattr(r, k, float(np.mean(vals)))
        base = {}
        for k in ("accuracy", "f1", "mse", "mae"):
            vals = [f["baseline"][k] for f in folds if k in f.get("baseline", {})]
            if vals:
                base[k] = float(np.mean(vals))
        r.baseline = base
        return r

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, default=float)

    def to_csv(self, path):
        keys = ["fold", "accuracy", "f1", "mse", "mae", "baseline_accuracy", "baseline_mse"]
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for i, f in enumerate(self.folds):
                row = [i, f.get("accuracy"), f.get("f1"), f.get("mse"), f.get("mae"),
                       f.get("baseline", {}).get("accuracy"), f.get("baseline", {}).get("mse")]
                fh.write(",".join("" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)
                                  for v in row) + "\n")

    def table(self) -> str:
        lines = []
        for k in ("accuracy", "f1", "mse", "mae"):
            v = getattr(self, k)
            if v is not None:
                b = self.baseline.get(k)
                lines.append(f"{k:<12}{v:>12.4f}" + (f"   (cleartext {b:.4f})" if b is not None else ""))
        for title, d in (("time [s]", self.timings), ("messages", self.messages), ("bytes", self.bytes),
                         ("bootstraps", self.bootstraps), ("ops", self.op_counters)):
            if d:
                lines.append(f"{title}:")
                for k, v in sorted(d.items()):
                    lines.append(f"  {k:<18}{v:>14.3f}" if isinstance(v, float) else f"  {k:<18}{v:>14}")
        return "\n".join(lines)
