"""Encrypted cooperative GLM training and oblivious prediction.

Every party keeps its local model encrypted under the collective key; after
`m` local iterations the locals are summed up the tree (COMBINE), the root
forms the new global model (REDUCE) and sends it back down. Ciphertexts are
refreshed with the collective bootstrap according to the chosen strategy.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import approx as A
from .. import ckks as C
from .. import mhe
from .. import packing as PK
from ..ckks import Ciphertext, CryptoParams, Evaluator
from ..errors import MustBootstrapError, ParameterError, PrecisionError, ProtocolAbort
from ..partysim import Network, Topology
from ..ring import derive_rng
from .batches import BatchSchedule
from .params import (DatasetPartition, LearningParams, Standardizer, check_labels, targets,
                     with_intercept)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# state

@dataclass
class Party:
    pid: int
    member: mhe.Member
    data: DatasetPartition
    T: np.ndarray                       # per-class targets (n, n_out)
    schedule: BatchSchedule
    ev: Evaluator
    w: list | None = None               # local model, one ciphertext per output
    wG: list | None = None              # last global model received
    batches: dict = field(default_factory=dict)   # t -> (PackedMatrix, [mu slot vectors])
    rng: np.random.Generator | None = field(default=None, repr=False)


@dataclass
class RoundInfo:
    round: int
    root: int
    global_level: int
    local_levels: dict
    bootstraps: int


@dataclass
class System:
    params: CryptoParams
    lp: LearningParams
    specs: object                       # ApproxSpec | SoftmaxSpecs | None
    parties: list[Party]
    net: Network
    keys: mhe.CollectiveKeys
    crs: mhe.Crs
    ev: Evaluator                       # root-side evaluator (combine/reduce/predict)
    plan: PK.PackingPlan
    a_m: int
    depth: int                          # levels per local iteration
    n_out: int
    standardizer: Standardizer | None = None
    intercept: bool = False
    wG: list | None = None
    bootstraps: Counter = field(default_factory=Counter)
    history: list[RoundInfo] = field(default_factory=list)
    round: int = 0

    @property
    def layout(self) -> PK.Layout:
        return self.plan.layout

    @property
    def members(self) -> list[mhe.Member]:
        return [p.member for p in self.parties]

    @property
    def n_parties(self) -> int:
        return len(self.parties)

    @property
    def partitions(self) -> list[DatasetPartition]:
        return [p.data for p in self.parties]

    def schedules(self) -> list[BatchSchedule]:
        lp = self.lp
        return [BatchSchedule(p.data.n, lp.batch_size, lp.seed, p.pid, lp.sampling) for p in self.parties]

    def root_for(self, j: int) -> int:
        pids = self.net.parties
        if self.lp.root_policy == "round_robin":
            return pids[j % len(pids)]
        return self.net.topology.root

    def evaluator_counters(self) -> Counter:
        tot = Counter(self.ev.counters)
        for p in self.parties:
            tot.update(p.ev.counters)
        return tot


# ---------------------------------------------------------------------------
# preparation

def activation_kind(lp: LearningParams) -> str:
    """One-vs-all multinomial trains independent per-class sigmoids."""
    return "logistic" if lp.model == "multinomial" and lp.one_vs_all else lp.model


def default_specs(lp: LearningParams, interval=(-8.0, 8.0), degree: int = 3, logit_range=(-4.0, 4.0)):
    if activation_kind(lp) == "logistic":
        return A.fit_sigmoid(interval, degree)
    if lp.model == "multinomial":
        return A.fit_softmax(len(lp.classes), logit_range)
    return None


def required_levels(strategy: str, depth: int, m: int, tau_b: int) -> int:
    """Smallest L the strategy can run with."""
    if strategy == "LB":
        return depth + tau_b + 1
    return max(m, 1) * depth + tau_b + 1


def check_representable(lp: LearningParams, params: CryptoParams, slack_bits: int = 10):
    """Learning-rate constants must survive quantization at the smallest usable scale."""
    s = params.scale(params.tau_b)
    for name, v in (("alpha", lp.alpha), ("alpha*rho", lp.alpha * lp.rho)):
        if v == 0:
            continue
        if abs(v) * s < 2.0 ** slack_bits:
            raise PrecisionError(
                f"{name} = {v:.3g} is not representable at scale 2^{math.log2(s):.0f}: "
                f"need |{name}| * scale >= 2^{slack_bits}")


def _standardize(net: Network, parts: list[DatasetPartition]) -> Standardizer:
    """Global mean/std from (n, sum, sum of squares) aggregated up the tree."""
    c = parts[0].c
    vals = {pid: np.concatenate([[p.n], p.X.sum(axis=0), (p.X ** 2).sum(axis=0)])
            for pid, p in zip(net.parties, parts)}
    enc = lambda a: np.asarray(a, dtype="<f8").tobytes()
    dec = lambda b: np.frombuffer(b, dtype="<f8").copy()
    tot = net.gather(vals, lambda a, b: a + b, enc, dec, "prepare", 1)
    n = tot[0]
    mean = tot[1:1 + c] / n
    std = np.sqrt(np.maximum(tot[1 + c:] / n - mean ** 2, 0.0))
    std[std == 0] = 1.0
    net.scatter(np.concatenate([mean, std]), enc, dec, "prepare", 2)
    return Standardizer(mean, std)


def _batch_cache(party: Party, lp: LearningParams, approach: str, n_slots: int, n_iter: int,
                 encrypt_data=None):
    lay = None
    for t in range(n_iter):
        idx = party.schedule[t]
        B = party.data.X[idx]
        pm = PK.prepare(approach, B, lp.alpha, n_slots)
        if encrypt_data is not None:
            pm.encrypt(*encrypt_data)
        lay = pm.layout
        mus = [lay.pack(lp.alpha * B.T @ party.T[idx][:, k]) for k in range(party.T.shape[1])]
        party.batches[t] = (pm, mus)


def prepare(partitions: list[DatasetPartition], lp: LearningParams, params: CryptoParams,
            specs=None, topology: Topology | str = "star", seed: int = 0,
            standardize: bool = False, intercept: bool = False, encrypted_data: bool = False,
            net: Network | None = None, cost: PK.CostModel | None = None,
            trace: bool = False) -> System:
    """Key generation, data preparation and validation; returns a ready System."""
    S = len(partitions)
    if S < 1:
        raise ParameterError("need at least one party")
    widths = {p.c for p in partitions}
    if len(widths) != 1:
        raise ProtocolAbort(f"parties disagree on the feature count: {sorted(widths)}", phase="prepare")
    lp.validate(S, min(p.n for p in partitions))
    check_labels(partitions, lp)
    check_representable(lp, params)

    if net is None:
        topo = topology if isinstance(topology, Topology) else Topology.make(topology, S)
        net = Network(topo, seed=seed)
    if len(net.parties) != S:
        raise ParameterError(f"topology has {len(net.parties)} parties, data has {S}")

    parts = [DatasetPartition(p.X.copy(), p.y.copy(), p.stats, dict(p.meta)) for p in partitions]
    stdz = None
    with net.in_session("prepare"):
        if standardize:
            stdz = _standardize(net, parts)
            for p in parts:
                p.X = stdz.apply(p.X)
                p.stats = stdz
    if intercept:
        for p in parts:
            p.X = with_intercept(p.X)
    c = parts[0].c

    approach = lp.packing
    if approach == "auto":
        approach = PK.choose_approach(c, lp.batch_size, lp.threads, params.n_slots, cost)
    plan = PK.make_plan(approach, lp.batch_size, c, params.n_slots)
    if specs is None:
        specs = default_specs(lp)
    a_m = A.activation_depth(activation_kind(lp), specs)
    depth = plan.depth + a_m
    need = required_levels(lp.strategy, depth, lp.local_iters, params.tau_b)
    if params.L < need:
        raise ParameterError(
            f"strategy {lp.strategy} needs L >= {need} (iteration depth {depth} = packing "
            f"{plan.depth} + activation {a_m}, m = {lp.local_iters}, tau_b = {params.tau_b}); have L = {params.L}")
    mask = mhe.mask_spec_for(params.scale(params.tau_b), lp.value_bound, params.lam)
    mask.check(S, params.Q(params.tau_b))

    crs = mhe.Crs(seed)
    members = [mhe.new_member(params, pid, seed) for pid in net.parties]
    with net.in_session("prepare"):
        keys = mhe.dkeygen(params, members, net, crs)
    if len(set(keys.party_fingerprints.values())) != 1:
        raise ProtocolAbort("parties hold different public keys", phase="dkeygen")

    base = Evaluator(params, keys.rlk, keys.rtk, trace=trace)
    n_iter = lp.global_iters * lp.local_iters
    parties = []
    for mem, part in zip(members, parts):
        T = targets(part.y, lp)
        pa = Party(mem.pid, mem, part, T,
                   BatchSchedule(part.n, lp.batch_size, lp.seed, mem.pid, lp.sampling),
                   base.fork(), rng=derive_rng(seed, "eval", mem.pid))
        enc = (keys.pk, params, pa.rng) if encrypted_data else None
        _batch_cache(pa, lp, approach, params.n_slots, n_iter, enc)
        parties.append(pa)

    sys_ = System(params, lp, specs, parties, net, keys, crs, base, plan, a_m, depth,
                  parties[0].T.shape[1], stdz, intercept)
    _init_models(sys_)
    log.info("prepared %d parties: %s packing, depth %d/iteration, L=%d", S, approach, depth, params.L)
    return sys_


def _init_models(sys_: System):
    """Encrypted zero models: the global one from the root, locals per party."""
    params, net = sys_.params, sys_.net
    root = sys_.root_for(0)
    rng = sys_.parties[net.parties.index(root)].rng
    wG = [C.encrypt_values(np.zeros(params.n_slots), sys_.keys.pk, params, rng)
          for _ in range(sys_.n_out)]
    sys_.wG = wG
    with net.in_session("init"):
        copies = net.scatter(wG, C.dumps_many, C.loads_many, "init", 1, root=root)
    for p in sys_.parties:
        p.wG = copies[p.pid]
        if sys_.lp.strategy == "LB":
            p.w = [C.encrypt_values(np.zeros(params.n_slots), sys_.keys.pk, params, p.rng)
                   for _ in range(sys_.n_out)]
        else:
            p.w = [ct.copy() for ct in p.wG]


# ---------------------------------------------------------------------------
# bootstrapping

def bootstrap_policy(strategy: str, phase: str, level: int, tau_b: int, depth: int = 0) -> bool:
    """Whether a ciphertext at `level` must be refreshed before `phase`.

    phase: 'iteration' (a local iteration of `depth` levels follows),
    'combine' (the local goes into the sum), 'reduce' (the new global model).
    """
    if level < tau_b:
        raise MustBootstrapError(f"level {level} is below the bootstrap level {tau_b}")
    if phase == "reduce" and strategy in ("GB", "HB"):
        return True
    if phase == "iteration":
        if strategy == "GB":
            return False
        return level - depth < tau_b
    if phase in ("combine", "reduce"):
        return level < tau_b + 1
    raise ParameterError(f"unknown phase {phase!r}")


def _bootstrap(sys_: System, ct: Ciphertext, initiator: int, phase: str) -> Ciphertext:
    sys_.bootstraps[phase] += 1
    return mhe.dbootstrap(ct, sys_.members, sys_.net, sys_.params, sys_.crs,
                          value_bound=sys_.lp.value_bound, initiator=initiator)


def lazy_rescale(ev: Evaluator, ct: Ciphertext, margin_bits: int = 2) -> Ciphertext:
    """Rescale only while the result keeps a usable scale (about delta or more);
    refuse if the scale already wraps Q_l."""
    params = ev.params
    if ct.scale >= params.Q(ct.level):
        raise PrecisionError(f"scale 2^{math.log2(ct.scale):.1f} exceeds Q at level {ct.level}")
    while ct.level > 0 and ct.scale / params.moduli[ct.level] >= params.delta / 2.0 ** margin_bits:
        ct = ev.rescale(ct)
    return ct


# ---------------------------------------------------------------------------
# MAP / COMBINE / REDUCE

def _activate(sys_: System, ev: Evaluator, U, refresh):
    kind = activation_kind(sys_.lp)
    if kind != "multinomial":
        return [A.activation(ev, u, kind, sys_.specs) if not isinstance(u, list)
                else [A.activation(ev, x, kind, sys_.specs) for x in u] for u in U]
    if not isinstance(U[0], list):
        return A.activation(ev, U, kind, sys_.specs, refresh)
    shards = [A.activation(ev, [u[s] for u in U], kind, sys_.specs, refresh) for s in range(len(U[0]))]
    return [[sh[k] for sh in shards] for k in range(len(U))]


def _update(sys_: System, ev: Evaluator, w: Ciphertext, wg: Ciphertext, v: Ciphertext,
            mu: np.ndarray) -> Ciphertext:
    """(1 - alpha rho) w + alpha rho w_G + mu - v on the lowest common level."""
    lp = sys_.lp
    ar = lp.alpha * lp.rho
    t = min(v.level, wg.level - 1)
    if v.level > t:
        v = ev.scalar_to_level(v, 1.0, t)
    acc = ev.scalar_to_level(w, 1.0 - ar, t)
    if ar != 0:
        acc = ev.add(acc, ev.scalar_to_level(wg, ar, t))
    acc = ev.add_plain(acc, C.encode(mu, sys_.params, scale=acc.scale, level=t))
    return ev.sub(acc, v)


def local_iteration(sys_: System, party: Party, t: int) -> list[Ciphertext]:
    ev = party.ev
    pm, mus = party.batches[t]
    refresh = lambda ct: _bootstrap(sys_, ct, party.pid, "activation")
    U = [PK.forward(ev, pm, w) for w in party.w]
    Sg = _activate(sys_, ev, U, refresh)
    V = [PK.backward(ev, pm, s) for s in Sg]
    return [_update(sys_, ev, w, wg, v, mu) for w, wg, v, mu in zip(party.w, party.wG, V, mus)]


def map_local(sys_: System, party: Party, j: int) -> list[Ciphertext]:
    """m local iterations of round j; the result is rerandomized before leaving the party."""
    lp, params = sys_.lp, sys_.params
    if lp.strategy in ("GB", "HB") and j > 0:
        party.w = [ct.copy() for ct in party.wG]
    for l in range(lp.local_iters):
        if lp.strategy != "GB" and any(
                bootstrap_policy(lp.strategy, "iteration", w.level, params.tau_b, sys_.depth)
                for w in party.w):
            party.w = [_bootstrap(sys_, w, party.pid, "map") for w in party.w]
        party.w = local_iteration(sys_, party, j * lp.local_iters + l)
    party.w = [C.rerandomize(w, sys_.keys.pk, params, party.rng) for w in party.w]
    return party.w


def _sum_lists(ev: Evaluator):
    return lambda a, b: [ev.add_aligned(x, y) for x, y in zip(a, b)]


def combine(sys_: System, outputs: dict[int, list[Ciphertext]], root: int) -> list[Ciphertext]:
    """Sum the local models up the tree rooted at `root`."""
    params, lp = sys_.params, sys_.lp
    ready = {}
    for p in sys_.parties:
        ws = outputs[p.pid]
        if any(bootstrap_policy(lp.strategy, "combine", w.level, params.tau_b) for w in ws):
            ws = [_bootstrap(sys_, w, p.pid, "combine") for w in ws]
            p.w = ws
        ready[p.pid] = ws
    return sys_.net.gather(ready, _sum_lists(sys_.ev), C.dumps_many, C.loads_many, "combine", 1, root=root)


def reduce(sys_: System, wG: list[Ciphertext], wsum: list[Ciphertext], root: int) -> list[Ciphertext]:
    """w_G <- (1 - |S| alpha rho) w_G + alpha rho sum_i w_i."""
    ev, lp, params = sys_.ev, sys_.lp, sys_.params
    ar = lp.alpha * lp.rho
    k = 1.0 - sys_.n_parties * ar
    out = []
    for g, s in zip(wG, wsum):
        t = min(g.level, s.level) - 1
        if t < params.tau_b:
            raise MustBootstrapError(f"reduce would land on level {t} < {params.tau_b}")
        acc = ev.scalar_to_level(s, ar, t)
        if k != 0:
            acc = ev.add(ev.scalar_to_level(g, k, t), acc)
        if bootstrap_policy(lp.strategy, "reduce", acc.level, params.tau_b):
            acc = _bootstrap(sys_, acc, root, "reduce")
        out.append(acc)
    return out


def _broadcast(sys_: System, wG: list[Ciphertext], root: int):
    copies = sys_.net.scatter(wG, C.dumps_many, C.loads_many, "broadcast", 1, root=root)
    for p in sys_.parties:
        p.wG = copies[p.pid]


def train_round(sys_: System, j: int) -> list[Ciphertext]:
    lp = sys_.lp
    root = sys_.root_for(j)
    before = sum(sys_.bootstraps.values())
    with sys_.net.in_session(j):
        if lp.threads > 1 and lp.strategy == "GB":
            with ThreadPoolExecutor(lp.threads) as pool:
                res = list(pool.map(lambda p: map_local(sys_, p, j), sys_.parties))
            outs = {p.pid: r for p, r in zip(sys_.parties, res)}
        else:
            outs = {p.pid: map_local(sys_, p, j) for p in sys_.parties}
        wsum = combine(sys_, outs, root)
        rp = sys_.parties[sys_.net.parties.index(root)]
        sys_.wG = reduce(sys_, rp.wG, wsum, root)
        _broadcast(sys_, sys_.wG, root)
    sys_.round = j + 1
    sys_.history.append(RoundInfo(j, root, sys_.wG[0].level, {p.pid: p.w[0].level for p in sys_.parties},
                                  sum(sys_.bootstraps.values()) - before))
    return sys_.wG


def train(sys_: System, on_round=None) -> list[Ciphertext]:
    """Run the remaining global rounds; `on_round(j, system)` is called after each."""
    for j in range(sys_.round, sys_.lp.global_iters):
        train_round(sys_, j)
        log.info("round %d: global level %d, %d bootstraps", j, sys_.wG[0].level,
                 sys_.history[-1].bootstraps)
        if on_round is not None:
            on_round(j, sys_)
    return sys_.wG


# ---------------------------------------------------------------------------
# model release and oracles

def release_weights(sys_: System) -> np.ndarray:
    """Collectively decrypt the global model, (c, n_out); only done when the parties agree to."""
    with sys_.net.in_session("release"):
        cols = [sys_.layout.unpack(mhe.ddec(ct, sys_.members, sys_.net, sys_.params)) for ct in sys_.wG]
    return np.stack(cols, axis=1)


def oracle_decrypt(sys_: System, ct: Ciphertext) -> np.ndarray:
    """Test-harness view of a ciphertext through the summed secret; bypasses the network."""
    sk = mhe.collective_secret(sys_.members, sys_.params)
    return C.decrypt_values(ct, sk, sys_.params)


def oracle_weights(sys_: System, cts=None) -> np.ndarray:
    cts = sys_.wG if cts is None else cts
    return np.stack([sys_.layout.unpack(oracle_decrypt(sys_, ct)) for ct in cts], axis=1)


# ---------------------------------------------------------------------------
# prediction

QUERIER = -1


@dataclass
class Prediction:
    cts: list                   # per query ciphertext: list of per-output ciphertexts
    n_rows: int
    stride: int
    rows_per_ct: int

    def reveal(self, sk, params: CryptoParams) -> np.ndarray:
        """Querier-side decryption: (n_rows, n_out)."""
        out = []
        for group in self.cts:
            cols = [C.decrypt_values(ct, sk, params)[:: self.stride][: self.rows_per_ct] for ct in group]
            out.append(np.stack(cols, axis=1))
        return np.concatenate(out)[: self.n_rows]


def _replicate(ev: Evaluator, sys_: System, ct: Ciphertext) -> Ciphertext:
    """Tile an RBA weight layout over all slots."""
    lay = sys_.layout
    span = lay.period * lay.tiles
    steps = []
    while span < sys_.params.n_slots:
        steps.append(-span)
        span *= 2
    return ev.rotate_sum(ct, steps)


def predict(sys_: System, X, querier_pk, activate: bool = True, querier: int = QUERIER,
            rng=None) -> Prediction:
    """Oblivious prediction: the querier's rows are encrypted under the collective key and
    the result is key-switched to `querier_pk`."""
    params, lay, ev = sys_.params, sys_.layout, sys_.ev
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if sys_.standardizer is not None:
        X = sys_.standardizer.apply(X)
    if sys_.intercept:
        X = with_intercept(X)
    c = sys_.partitions[0].c
    if X.shape[1] != c:
        raise ProtocolAbort(f"query has {X.shape[1]} features, model has {c}", phase="predict")
    rng = rng if rng is not None else derive_rng(sys_.lp.seed, "querier")
    net = sys_.net
    net.add_external(querier)
    root = sys_.net.topology.root
    stride = lay.period
    per = params.n_slots // stride
    kind = sys_.lp.model if activate else "linear"
    need = 2 + (A.activation_depth(kind, sys_.specs) if kind != "multinomial" else 0)

    wG = sys_.wG
    if any(w.level < need for w in wG):
        wG = [_bootstrap(sys_, w, root, "predict") for w in wG]
    if lay.approach == "rba":
        wG = [_replicate(ev, sys_, w) for w in wG]
    mask = np.zeros(params.n_slots)
    mask[::stride] = 1.0

    groups = []
    with net.in_session("predict"):
        for s in range(0, len(X), per):
            rows = X[s:s + per]
            slots = np.zeros(params.n_slots)
            for i, r in enumerate(rows):
                slots[i * stride: i * stride + c] = r
            q = C.encrypt_values(slots, sys_.keys.pk, params, rng)
            q = net.exchange(querier, root, "predict", 1, q, C.dumps, C.loads)
            outs = []
            for w in wG:
                d = ev.rotate_sum(ev.mul_rr(q, w), [1 << i for i in range(PK.log2i(stride))])
                outs.append(ev.mult_values(d, mask))
            if kind == "logistic":
                outs = [A.af_eval(ev, u, sys_.specs) for u in outs]
            ks = [mhe.dkeyswitch(u, querier_pk, sys_.members, net, params, initiator=root) for u in outs]
            groups.append(net.exchange(root, querier, "predict", 2, ks, C.dumps_many, C.loads_many))
    return Prediction(groups, len(X), stride, per)
