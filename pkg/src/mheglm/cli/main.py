"""`mheglm` command line: keygen, fit, validate, train, predict, bench.

Exit codes: 0 ok, 2 validation/ingestion error, 3 protocol abort, 4 precision failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .. import __version__
from .. import approx as A
from .. import ckks as C
from .. import mhe
from .. import packing as PK
from ..errors import (IngestionError, MHEError, MustBootstrapError, ParameterError, PrecisionError,
                      ProtocolAbort, UsageError)
from ..partysim import Network, Topology
from ..ring import derive_rng
from ..train import shadow as SH
from ..train import system as TS
from ..train.params import DatasetPartition
from . import config as CF
from . import data as D
from .metrics import MetricsReport, classification, regression

log = logging.getLogger("mheglm")

EXIT_OK, EXIT_VALIDATION, EXIT_PROTOCOL, EXIT_PRECISION = 0, 2, 3, 4


def exit_code(err: BaseException) -> int:
    if isinstance(err, ProtocolAbort):
        return EXIT_PROTOCOL
    if isinstance(err, (PrecisionError, MustBootstrapError)):
        return EXIT_PRECISION
    return EXIT_VALIDATION


# ---------------------------------------------------------------------------
# helpers

def _apply_overrides(cfg: CF.RunConfig, args) -> CF.RunConfig:
    lp = cfg.learning
    if getattr(args, "strategy", None):
        lp.strategy = args.strategy.upper()
    if getattr(args, "packing", None):
        lp.packing = args.packing
    if getattr(args, "threads", None):
        lp.threads = args.threads
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        lp.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.path = args.data
    if getattr(args, "kfold", None):
        cfg.data.kfold = args.kfold
    if getattr(args, "out", None):
        cfg.output = args.out
    return cfg


def _load_cfg(args) -> CF.RunConfig:
    if getattr(args, "config", None):
        cfg = CF.load_config(args.config)
    else:
        cfg = CF.preset(getattr(args, "preset", None) or "DESK")
    return _apply_overrides(cfg, args)


def _dataset(cfg: CF.RunConfig):
    """All rows plus the owning party of each row (None when split later)."""
    dc = cfg.data
    if dc.party_files:
        Xs, ys, owner = [], [], []
        for i, f in enumerate(dc.party_files):
            X, y, names = D.load_csv(f, dc.label)
            Xs.append(X)
            ys.append(y)
            owner += [i] * len(y)
        return np.vstack(Xs), np.concatenate(ys), names, np.array(owner)
    if not dc.path:
        raise IngestionError("no dataset: set data.path or data.party_files")
    X, y, names = D.load_csv(dc.path, dc.label)
    return X, y, names, None


def _train_parts(cfg, X, y, owner, idx) -> list[DatasetPartition]:
    if owner is None:
        return D.split(X[idx], y[idx], cfg.data.parties, cfg.data.split, cfg.data.proportions)
    return [DatasetPartition(X[idx[owner[idx] == i]], y[idx[owner[idx] == i]])
            for i in range(len(cfg.data.party_files))]


def _labels(lp, scores) -> np.ndarray:
    if lp.model == "logistic":
        return (scores[:, 0] > 0.5).astype(float)
    if lp.model == "multinomial":
        return np.asarray(lp.classes, dtype=float)[scores.argmax(axis=1)]
    return scores[:, 0]


def _metrics(lp, y, scores) -> dict:
    if lp.model == "linear":
        return regression(y, scores[:, 0])
    return classification(y, _labels(lp, scores))


def _querier(params, seed):
    rng = derive_rng(seed, "querier-keys")
    return C.keygen(params, rng)


def _build_system(cfg, params, specs, parts):
    lp = cfg.learning
    return TS.prepare(parts, lp, params, specs=specs, topology=cfg.topology, seed=cfg.seed,
                      standardize=cfg.data.standardize, intercept=cfg.data.intercept)


def _manifest(cfg, params, specs, sys_, extra=None) -> dict:
    m = {
        "version": __version__,
        "config": cfg.as_dict(),
        "crypto": params.describe(),
        "approx": None if specs is None else specs.to_dict(),
        "packing": sys_.plan.as_dict(),
        "iteration_depth": sys_.depth,
        "seeds": {"run": cfg.seed, "learning": cfg.learning.seed, "shuffle": cfg.data.shuffle_seed},
        "pk_fingerprint": sys_.keys.fingerprint(),
    }
    m.update(extra or {})
    return m


# ---------------------------------------------------------------------------
# commands

def cmd_validate(cfg: CF.RunConfig, n_features=None) -> list[CF.Diagnostic]:
    return CF.check(cfg, n_features)


def cmd_keygen(cfg: CF.RunConfig, out: Path) -> dict:
    CF.check(cfg)
    params = cfg.crypto.build()
    n = len(cfg.data.party_files) or cfg.data.parties
    net = Network(Topology.make(cfg.topology, n), seed=cfg.seed)
    members = [mhe.new_member(params, p, cfg.seed) for p in net.parties]
    t0 = time.perf_counter()
    keys = mhe.dkeygen(params, members, net, mhe.Crs(cfg.seed))
    dt = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    (out / "pk.bin").write_bytes(C.dumps(keys.pk))
    rep = net.counters()
    res = {"pk_fingerprint": keys.fingerprint(), "party_fingerprints": keys.party_fingerprints,
           "rotation_keys": sorted(keys.rtk.keys), "seconds": dt, "messages": rep.messages,
           "bytes": rep.bytes, "crypto": params.describe()}
    (out / "keygen.json").write_text(json.dumps(res, indent=2))
    return res


def cmd_fit(target: str, interval, degree: int, method: str, out: Path | None,
            n_classes: int = 3) -> dict:
    if target == "sigmoid":
        spec = (A.fit_chebyshev(A.sigmoid, tuple(interval), degree, target="sigmoid") if method == "chebyshev"
                else A.fit_sigmoid(tuple(interval), degree))
        res = spec.to_dict()
        res["max_error"] = A.max_grid_error(spec, A.sigmoid)
    elif target == "softmax":
        res = A.fit_softmax(n_classes, tuple(interval)).to_dict()
    else:
        raise ParameterError(f"unknown fit target {target!r}")
    if out is not None:
        Path(out).write_text(json.dumps(res, indent=2))
    return res


def cmd_train(cfg: CF.RunConfig, save_model: bool = True):
    lp = cfg.learning
    X, y, names, owner = _dataset(cfg)
    CF.check(cfg, X.shape[1])
    params = cfg.crypto.build()
    specs = cfg.approx.build(lp)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    sk_q, pk_q = _querier(params, cfg.seed)

    folds, timings, ops, msgs, nbytes, boots = [], Counter(), Counter(), Counter(), Counter(), Counter()
    sys_ = None
    folds_idx = list(D.kfold(len(y), cfg.data.kfold, cfg.data.shuffle_seed))
    for k, (tr, te) in enumerate(folds_idx):
        parts = _train_parts(cfg, X, y, owner, tr)
        t0 = time.perf_counter()
        sys_ = _build_system(cfg, params, specs, parts)
        t1 = time.perf_counter()
        TS.train(sys_)
        t2 = time.perf_counter()
        pred = TS.predict(sys_, X[te], pk_q)
        scores = pred.reveal(sk_q, params)
        t3 = time.perf_counter()
        timings.update({"prepare": t1 - t0, "train": t2 - t1, "predict": t3 - t2})

        # cleartext run with identical hyper-parameters and batches
        act = SH.make_activation(lp, specs, exact=True)
        ref = SH.csgd_shadow(sys_.partitions, lp, act, sys_.schedules())
        Xt = X[te]
        if sys_.standardizer is not None:
            Xt = sys_.standardizer.apply(Xt)
        if sys_.intercept:
            Xt = np.hstack([Xt, np.ones((len(Xt), 1))])
        base = SH.predict_clear(ref.final, Xt, lp, act)
        f = _metrics(lp, y[te], scores)
        f["baseline"] = _metrics(lp, y[te], base)
        folds.append(f)
        ops.update(sys_.evaluator_counters())
        rep = sys_.net.counters()
        msgs.update(rep.messages)
        nbytes.update(rep.bytes)
        boots.update(sys_.bootstraps)
        log.info("fold %d/%d: %s", k + 1, len(folds_idx), f)

    report = MetricsReport.from_folds(folds, timings=dict(timings), op_counters=dict(ops),
                                      messages=dict(msgs), bytes=dict(nbytes), bootstraps=dict(boots))
    manifest = _manifest(cfg, params, specs, sys_, {"features": names, "model_fold": len(folds_idx) - 1})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    (out / "report.txt").write_text(report.table() + "\n")
    if save_model:
        (out / "model.bin").write_bytes(C.dumps_many(sys_.wG))
    return report, manifest


def cmd_predict(model_dir: Path, data_path: str, out: Path, label: str | None = None) -> np.ndarray:
    """Rebuild the parties from the run manifest (deterministic keys), load the encrypted model
    and answer an oblivious query for every row of `data_path`."""
    man = json.loads((model_dir / "manifest.json").read_text())
    cfg = CF.RunConfig.from_dict(man["config"])
    lp = cfg.learning
    X, y, names, owner = _dataset(cfg)
    tr, _ = list(D.kfold(len(y), cfg.data.kfold, cfg.data.shuffle_seed))[man["model_fold"]]
    params = cfg.crypto.build()
    specs = cfg.approx.build(lp)
    sys_ = _build_system(cfg, params, specs, _train_parts(cfg, X, y, owner, tr))
    if sys_.keys.fingerprint() != man["pk_fingerprint"]:
        raise ProtocolAbort("rebuilt collective key does not match the trained model", phase="predict")
    sys_.wG = C.loads_many((model_dir / "model.bin").read_bytes())
    with open(data_path) as fh:
        header = fh.readline().strip().split(",")
    lab = label or cfg.data.label
    if lab in header:
        Xq, yq, _ = D.load_csv(data_path, lab, names)
    else:
        Xq, yq = _features_only(data_path, names), None
    sk_q, pk_q = _querier(params, cfg.seed + 1)
    scores = TS.predict(sys_, Xq, pk_q).reveal(sk_q, params)
    labels = _labels(lp, scores)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        cols = [f"score_{k}" for k in (lp.classes if lp.model == "multinomial" else [0])]
        fh.write(",".join(["row"] + cols + ["prediction"]) + "\n")
        for i, (s, l) in enumerate(zip(scores, labels)):
            fh.write(",".join([str(i)] + [f"{v:.6g}" for v in s] + [f"{l:g}"]) + "\n")
    if yq is not None:
        log.info("query metrics: %s", _metrics(lp, yq, scores))
    return scores


def _features_only(path, names) -> np.ndarray:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    try:
        idx = [header.index(n) for n in names]
    except ValueError as e:
        raise IngestionError(f"{path}: {e}") from None
    try:
        return np.array([[float(r[j]) for j in idx] for r in rows[1:] if r])
    except ValueError as e:
        raise IngestionError(f"{path}: non-numeric cell ({e})") from None


def cmd_bench(c: int, b: int, approach: str, log_n: int = 12, parties: int = 3, seed: int = 0,
              protocols: bool = True) -> dict:
    """Packing counters for one forward/backward pair, plus protocol traffic."""
    plan = PK.make_plan(approach, b, c, 1 << (log_n - 1))
    params = C.CryptoParams.build(log_n=log_n, levels=plan.depth + 1)
    rng = np.random.default_rng(seed)
    sk, pk = C.keygen(params, rng)
    ev = C.Evaluator(params, C.gen_relin_key(params, sk, rng), C.gen_rotation_keys(params, sk, rng))
    B = rng.uniform(-1, 1, (b, c))
    w = rng.uniform(-1, 1, c)
    pm = PK.prepare(approach, B, 1.0, params.n_slots)
    ct = C.encrypt_values(pm.layout.pack(w), pk, params, rng)
    t0 = time.perf_counter()
    _, v = PK.pipeline(ev, pm, ct)
    dt = time.perf_counter() - t0
    got = pm.layout.unpack(C.decrypt_values(v, sk, params))
    _, ref = PK.matvec_clear(B, w, 1.0)
    res = {"approach": approach, "b": b, "c": c, "plan": plan.as_dict(),
           "formula_rotations": plan.formula_rotations(),
           "measured": dict(ev.counters), "levels_used": params.L - v.level,
           "seconds": dt, "max_error": float(np.abs(got - ref).max())}
    if protocols:
        net = Network(Topology.star(parties), seed=seed)
        members = [mhe.new_member(params, p, seed) for p in net.parties]
        crs = mhe.Crs(seed)
        with net.in_session("dkeygen"):
            keys = mhe.dkeygen(params, members, net, crs, rotations=[1])
        x = C.encrypt_values(rng.uniform(-1, 1, params.n_slots), keys.pk, params, rng, level=1)
        with net.in_session("ddec"):
            mhe.ddec(x, members, net, params)
        with net.in_session("dbootstrap"):
            mhe.dbootstrap(x, members, net, params, crs)
        rep = net.counters()
        res["traffic"] = {"messages": rep.messages, "bytes": rep.bytes, "parties": parties}
    return res


# ---------------------------------------------------------------------------
# argument parsing

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mheglm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="run configuration (YAML)")
        p.add_argument("--preset", choices=["SP1", "SP2", "DESK", "sp1", "sp2", "desk"])
        p.add_argument("--seed", type=int)
        p.add_argument("--strategy", choices=["lb", "gb", "hb", "LB", "GB", "HB"])
        p.add_argument("--packing", choices=["rba", "da", "auto"])
        p.add_argument("--threads", type=int)
        if data:
            p.add_argument("--data", help="CSV with a header row")
            p.add_argument("--kfold", type=int)
        p.add_argument("--out")

    p = sub.add_parser("validate", help="check a configuration against the parameter graph")
    common(p)
    p.add_argument("--features", type=int)

    p = sub.add_parser("keygen", help="collective key generation")
    common(p, data=False)

    p = sub.add_parser("fit", help="fit an activation polynomial")
    p.add_argument("--target", default="sigmoid", choices=["sigmoid", "softmax"])
    p.add_argument("--interval", type=float, nargs=2, default=(-8.0, 8.0))
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--method", default="ls", choices=["ls", "chebyshev"])
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--out")

    p = sub.add_parser("train", help="encrypted training with held-out evaluation")
    common(p)

    p = sub.add_parser("predict", help="oblivious prediction with a trained model")
    p.add_argument("--model", required=True, help="output directory of a train run")
    p.add_argument("--data", required=True)
    p.add_argument("--label")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="packing and protocol counters")
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--b", type=int, default=4)
    p.add_argument("--packing", default="da", choices=["rba", "da"])
    p.add_argument("--log-n", type=int, default=12)
    p.add_argument("--parties", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return ap


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, default=str)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "validate":
            diags = cmd_validate(_load_cfg(args), args.features)
            for d in diags:
                print(f"warning: {d}")
            print("ok")
        elif args.cmd == "keygen":
            cfg = _load_cfg(args)
            res = cmd_keygen(cfg, Path(args.out or cfg.output))
            print(f"pk fingerprint {res['pk_fingerprint']}  ({res['seconds']:.2f}s, "
                  f"{sum(res['messages'].values())} messages)")
        elif args.cmd == "fit":
            _emit(cmd_fit(args.target, args.interval, args.degree, args.method,
                          Path(args.out) if args.out else None, args.classes))
        elif args.cmd == "train":
            report, _ = cmd_train(_load_cfg(args))
            print(report.table())
        elif args.cmd == "predict":
            scores = cmd_predict(Path(args.model), args.data, Path(args.out), args.label)
            print(f"wrote {len(scores)} predictions to {args.out}")
        elif args.cmd == "bench":
            res = cmd_bench(args.c, args.b, args.packing, args.log_n, args.parties, args.seed)
            _emit(res, args.out)
    except (ParameterError, UsageError, IngestionError, ProtocolAbort, PrecisionError,
            MustBootstrapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    except MHEError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
