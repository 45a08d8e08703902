"""Encrypted vector-matrix products for one local iteration: u = B w, v = alpha B^T s(u).

Row-based (RBA): rows of B are laid out in blocks of c' = P2(c) slots.  A
plaintext product followed by inner rotate-and-add sums leaves u_k at the
start of block k; masking and duplication spread it over the block; a
product with alpha*B and outer rotate-and-adds accumulate v in block 0,
which is masked and duplicated to every block again.  When b'c' exceeds the
slot count the rows are sharded over several plaintexts.

Diagonal (DA): the d x d padding of B (d = P2(max(b, c))) is multiplied with
the baby-step giant-step diagonal method; weights are replicated with period
d over all slots.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ckks as C
from .ckks import Ciphertext, Evaluator
from .errors import MustBootstrapError, ParameterError, UsageError


def p2(x: int) -> int:
    """Smallest power of two >= x."""
    return 1 if x <= 1 else 1 << (int(x) - 1).bit_length()


def log2i(x: int) -> int:
    return int(x).bit_length() - 1


def da_split(d: int) -> tuple[int, int]:
    """(N1, N2) with N2 the largest power of two <= sqrt(d) and N1 = d / N2."""
    n2 = 1 << (log2i(d) // 2)
    return d // n2, n2


# ---------------------------------------------------------------------------
# layouts

@dataclass(frozen=True)
class Layout:
    approach: str
    b: int
    c: int
    n_slots: int

    def __post_init__(self):
        if self.approach not in ("rba", "da"):
            raise ParameterError(f"unknown packing {self.approach!r}")
        if self.approach == "da" and self.d > self.n_slots:
            raise ParameterError(f"diagonal packing needs P2(max(b,c)) = {self.d} <= {self.n_slots} slots")
        if self.approach == "rba" and self.c_pad > self.n_slots:
            raise ParameterError(f"row packing needs P2(c) = {self.c_pad} <= {self.n_slots} slots")

    @property
    def b_pad(self) -> int:
        return p2(self.b)

    @property
    def c_pad(self) -> int:
        return p2(self.c)

    @property
    def d(self) -> int:
        return p2(max(self.b, self.c))

    @property
    def period(self) -> int:
        return self.d if self.approach == "da" else self.c_pad

    @property
    def rows_per_pt(self) -> int:
        return min(self.b_pad, self.n_slots // self.c_pad)

    @property
    def n_pt(self) -> int:
        if self.approach == "da":
            return self.d
        return self.b_pad // self.rows_per_pt

    @property
    def tiles(self) -> int:
        return self.n_slots // self.d if self.approach == "da" else self.rows_per_pt

    def pack(self, v) -> np.ndarray:
        """Weight-layout slot vector for a length-c vector."""
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size > self.c:
            raise UsageError(f"vector of length {v.size} exceeds c={self.c}")
        blk = np.zeros(self.period)
        blk[: v.size] = v
        out = np.zeros(self.n_slots)
        out[: self.tiles * self.period] = np.tile(blk, self.tiles)
        return out

    def unpack(self, slots) -> np.ndarray:
        return np.asarray(slots)[: self.c].real.copy()


@dataclass
class PackingPlan:
    approach: str
    layout: Layout
    N1: int
    N2: int
    rotation_schedule: list[tuple[str, int]]
    mults: int
    rotations: int
    depth: int                  # levels excluding the activation
    n_pt: int

    def formula_rotations(self) -> int:
        """Closed-form rotation count (exact whenever one plaintext suffices for RBA)."""
        lay = self.layout
        if self.approach == "da":
            return 2 * ((self.N1 - 1) + (self.N2 - 1))
        n = math.ceil(lay.c_pad * lay.b_pad * 2 / (2 * lay.n_slots))
        return n * 2 * (log2i(lay.b_pad) + log2i(lay.c_pad))

    def as_dict(self) -> dict:
        return {"approach": self.approach, "N1": self.N1, "N2": self.N2, "mults": self.mults,
                "rotations": self.rotations, "depth": self.depth, "n_pt": self.n_pt,
                "period": self.layout.period, "tiles": self.layout.tiles}


def make_plan(approach: str, b: int, c: int, n_slots: int) -> PackingPlan:
    lay = Layout(approach, b, c, n_slots)
    if approach == "da":
        n1, n2 = da_split(lay.d)
        one = [("L", 1)] * (n1 - 1) + [("L", n1)] * (n2 - 1)
        return PackingPlan("da", lay, n1, n2, one + one, 2 * n1 * n2, len(one) * 2, 2, lay.d)
    cp, R = lay.c_pad, lay.rows_per_pt
    inner = [("L", 1 << i) for i in range(log2i(cp))]
    dup = [("R", 1 << i) for i in range(log2i(cp))]
    outer = [("L", cp << i) for i in range(log2i(R))]
    final = [("R", cp << i) for i in range(log2i(R))]
    sched = (inner + dup) * lay.n_pt + outer * lay.n_pt + final
    return PackingPlan("rba", lay, 0, 0, sched, 4 * lay.n_pt, len(sched), 4, lay.n_pt)


# ---------------------------------------------------------------------------
# packed matrices

@dataclass
class PackedMatrix:
    layout: Layout
    alpha: float
    fwd: list[np.ndarray]            # B stage slot vectors
    bwd: list[np.ndarray]            # alpha B^T stage slot vectors
    masks: dict[str, np.ndarray]
    source: np.ndarray = field(repr=False)
    enc_fwd: list | None = field(default=None, repr=False)
    enc_bwd: list | None = field(default=None, repr=False)
    _coeffs: dict = field(default_factory=dict, repr=False)

    @property
    def encrypted(self) -> bool:
        return self.enc_fwd is not None

    @property
    def n_plaintexts(self) -> int:
        return len(self.fwd)

    def coeffs(self, key: tuple[str, int], N: int) -> np.ndarray:
        if key not in self._coeffs:
            vec = {"fwd": self.fwd, "bwd": self.bwd}[key[0]][key[1]] if key[0] in ("fwd", "bwd") \
                else self.masks[key[0]]
            self._coeffs[key] = C.slots_to_coeffs(vec, N)
        return self._coeffs[key]

    def unpack(self) -> np.ndarray:
        """Recover B from the forward-stage slot vectors."""
        lay = self.layout
        b, c = self.source.shape
        if lay.approach == "rba":
            rows = []
            for vec in self.fwd:
                rows.extend(vec[k * lay.c_pad: k * lay.c_pad + lay.c_pad] for k in range(lay.rows_per_pt))
            return np.array(rows)[:b, :c]
        d = lay.d
        n1, _ = da_split(d)
        M = np.zeros((d, d))
        for k, vec in enumerate(self.fwd):
            j = k // n1
            diag = np.roll(vec[:d], -j * n1)
            for i in range(d):
                M[i, (i + k) % d] = diag[i]
        return M[:b, :c]

    def encrypt(self, pk, params, rng) -> "PackedMatrix":
        """Encrypted-data mode: ciphertext copies of every stage vector."""
        self.enc_fwd = [C.encrypt_values(v, pk, params, rng) for v in self.fwd]
        self.enc_bwd = [C.encrypt_values(v, pk, params, rng) for v in self.bwd]
        return self


def _check_matrix(B) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.size == 0:
        raise UsageError("expected a non-empty 2-D matrix")
    return B


def prepare_rba(B, alpha: float, n_slots: int) -> PackedMatrix:
    B = _check_matrix(B)
    b, c = B.shape
    lay = Layout("rba", b, c, n_slots)
    cp, R = lay.c_pad, lay.rows_per_pt
    Bp = np.zeros((lay.b_pad, cp))
    Bp[:b, :c] = B
    fwd, bwd = [], []
    for s in range(lay.n_pt):
        f = np.zeros(n_slots)
        g = np.zeros(n_slots)
        blk = Bp[s * R:(s + 1) * R]
        f[: R * cp] = blk.ravel()
        g[: R * cp] = alpha * blk.ravel()
        fwd.append(f)
        bwd.append(g)
    rows = np.zeros(n_slots)
    rows[np.arange(R) * cp] = 1.0
    block0 = np.zeros(n_slots)
    block0[:cp] = 1.0
    return PackedMatrix(lay, alpha, fwd, bwd, {"rows": rows, "block0": block0}, B)


def _diagonals(M: np.ndarray, n_slots: int) -> list[np.ndarray]:
    d = M.shape[0]
    n1, _ = da_split(d)
    i = np.arange(d)
    out = []
    for k in range(d):
        diag = M[i, (i + k) % d]
        j = k // n1
        out.append(np.tile(np.roll(diag, j * n1), n_slots // d))
    return out


def prepare_da(B, alpha: float, n_slots: int) -> PackedMatrix:
    B = _check_matrix(B)
    b, c = B.shape
    lay = Layout("da", b, c, n_slots)
    d = lay.d
    M = np.zeros((d, d))
    M[:b, :c] = B
    return PackedMatrix(lay, alpha, _diagonals(M, n_slots), _diagonals(alpha * M.T, n_slots), {}, B)


def prepare(approach: str, B, alpha: float, n_slots: int) -> PackedMatrix:
    return (prepare_rba if approach == "rba" else prepare_da)(B, alpha, n_slots)


# ---------------------------------------------------------------------------
# pipelines

def _mul(ev: Evaluator, ct: Ciphertext, pm: PackedMatrix, key) -> Ciphertext:
    """ct times a packed vector, rescaled onto the canonical scale."""
    if ct.level == 0:
        raise MustBootstrapError("packing product at level 0")
    if pm.encrypted and key[0] in ("fwd", "bwd"):
        other = (pm.enc_fwd if key[0] == "fwd" else pm.enc_bwd)[key[1]]
        return ev.mul_rr(ct, other)
    params = ev.params
    pt = C.encode_coeffs(pm.coeffs(key, params.N), params, ev.plain_scale_for(ct), ct.level)
    out = ev.rescale(ev.mult_plain(ct, pt))
    out.scale = params.scale(ct.level - 1)
    return out


def _mul_sum(ev: Evaluator, cts, pm: PackedMatrix, keys) -> Ciphertext:
    """sum_i cts[i] * vec[keys[i]] with a single rescale (plaintext mode)."""
    if pm.encrypted:
        acc = None
        for ct, key in zip(cts, keys):
            t = _mul(ev, ct, pm, key)
            acc = t if acc is None else ev.add(acc, t)
        return acc
    params = ev.params
    lvl = cts[0].level
    if lvl == 0:
        raise MustBootstrapError("packing product at level 0")
    acc = None
    for ct, key in zip(cts, keys):
        pt = C.encode_coeffs(pm.coeffs(key, params.N), params, ev.plain_scale_for(ct), lvl)
        t = ev.mult_plain(ct, pt)
        t.scale = params.scale(lvl - 1) * params.moduli[lvl]
        acc = t if acc is None else ev.add(acc, t)
    out = ev.rescale(acc)
    out.scale = params.scale(lvl - 1)
    return out


def _da_matvec(ev: Evaluator, pm: PackedMatrix, ct: Ciphertext, stage: str) -> Ciphertext:
    d = pm.layout.d
    n1, n2 = da_split(d)
    baby = [ct]
    for _ in range(1, n1):
        baby.append(ev.rotate(baby[-1], 1))
    inner = [_mul_sum(ev, baby, pm, [(stage, j * n1 + i) for i in range(n1)]) for j in range(n2)]
    acc = inner[-1]
    for j in range(n2 - 2, -1, -1):
        acc = ev.add(ev.rotate(acc, n1), inner[j])
    return acc


def da_forward(ev: Evaluator, pm: PackedMatrix, ct_w: Ciphertext) -> Ciphertext:
    return _da_matvec(ev, pm, ct_w, "fwd")


def da_backward(ev: Evaluator, pm: PackedMatrix, ct_s: Ciphertext) -> Ciphertext:
    return _da_matvec(ev, pm, ct_s, "bwd")


def rba_forward(ev: Evaluator, pm: PackedMatrix, ct_w: Ciphertext) -> list[Ciphertext]:
    """Steps (b)-(e): per shard, u_k replicated over block k."""
    cp = pm.layout.c_pad
    steps = [1 << i for i in range(log2i(cp))]
    out = []
    for s in range(pm.layout.n_pt):
        x = _mul(ev, ct_w, pm, ("fwd", s))
        x = ev.rotate_sum(x, steps)
        x = _mul(ev, x, pm, ("rows", 0))
        x = ev.rotate_sum(x, [-t for t in steps])
        out.append(x)
    return out


def rba_backward(ev: Evaluator, pm: PackedMatrix, ct_s) -> Ciphertext:
    """Steps (f)-(h) plus the final duplication back to the weight layout."""
    if isinstance(ct_s, Ciphertext):
        ct_s = [ct_s]
    lay = pm.layout
    outer = [lay.c_pad << i for i in range(log2i(lay.rows_per_pt))]
    acc = None
    for s, x in enumerate(ct_s):
        y = _mul(ev, x, pm, ("bwd", s))
        y = ev.rotate_sum(y, outer)
        y = _mul(ev, y, pm, ("block0", 0))
        acc = y if acc is None else ev.add(acc, y)
    return ev.rotate_sum(acc, [-t for t in outer])


def forward(ev, pm, ct_w):
    return da_forward(ev, pm, ct_w) if pm.layout.approach == "da" else rba_forward(ev, pm, ct_w)


def backward(ev, pm, ct_s):
    return da_backward(ev, pm, ct_s) if pm.layout.approach == "da" else rba_backward(ev, pm, ct_s)


def _apply(act, ev, u):
    if act is None:
        return u
    if isinstance(u, list):
        return [act(ev, x) for x in u]
    return act(ev, u)


def rba_pipeline(ev: Evaluator, pm: PackedMatrix, ct_w: Ciphertext, act=None):
    """(ct_u, ct_v); ct_u is a list when rows are sharded over several plaintexts."""
    u = rba_forward(ev, pm, ct_w)
    v = rba_backward(ev, pm, _apply(act, ev, u))
    return (u[0] if len(u) == 1 else u), v


def da_pipeline(ev: Evaluator, pm: PackedMatrix, ct_w: Ciphertext, act=None):
    u = da_forward(ev, pm, ct_w)
    return u, da_backward(ev, pm, _apply(act, ev, u))


def pipeline(ev, pm, ct_w, act=None):
    return (da_pipeline if pm.layout.approach == "da" else rba_pipeline)(ev, pm, ct_w, act)


def matvec_clear(B, w, alpha, act=None):
    """Cleartext oracle: (u, v) for a b x c matrix."""
    B = np.asarray(B, dtype=np.float64)
    u = B @ np.asarray(w, dtype=np.float64)
    s = u if act is None else act(u)
    return u, alpha * B.T @ s


# ---------------------------------------------------------------------------
# approach selection

@dataclass(frozen=True)
class CostModel:
    """Relative cost of one multiplication and one rotation.

    The defaults weigh a multiplication (with its rescale/relinearization) at
    1.5 rotations, which gives the usual single-thread preference
    for row packing at small widths; `measure` replaces them with timings.
    """
    mult: float = 1.5
    rot: float = 1.0

    @classmethod
    def measure(cls, params, repeats: int = 3) -> "CostModel":
        rng = np.random.default_rng(0)
        sk, pk = C.keygen(params, rng)
        ev = Evaluator(params, C.gen_relin_key(params, sk, rng), C.gen_rotation_keys(params, sk, rng, [1]))
        ct = C.encrypt_values(rng.uniform(-1, 1, params.n_slots), pk, params, rng)
        t0 = time.perf_counter()
        for _ in range(repeats):
            ev.mul_rr(ct, ct)
        tm = time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(repeats):
            ev.rotate(ct, 1)
        tr = time.perf_counter() - t0
        return cls(mult=tm / tr, rot=1.0)

    def cost(self, plan: PackingPlan, threads: int = 1) -> float:
        raw = plan.mults * self.mult + plan.rotations * self.rot
        if plan.approach == "da":
            raw /= max(1, min(threads, plan.N1 * plan.N2))
        return raw


def choose_approach(c: int, b: int, threads: int = 1, n_slots: int = 1 << 13,
                    cost: CostModel | None = None) -> str:
    cost = cost or CostModel()
    rba = make_plan("rba", b, c, n_slots)
    if p2(max(b, c)) > n_slots:
        return "rba"
    da = make_plan("da", b, c, n_slots)
    return "rba" if cost.cost(rba, threads) <= cost.cost(da, threads) else "da"
