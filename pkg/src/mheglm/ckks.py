"""Single-party leveled CKKS over the RNS ring.

Ciphertexts are kept in evaluation (NTT) form.  Each level l has a canonical
scale: scale(L) = delta and scale(l-1) = scale(l)**2 / q_l, so a product of two
canonical ciphertexts rescales to the next canonical scale.  Plaintext and
scalar multiplications pick the plaintext scale that lands the rescaled result
on the canonical scale, which keeps additions well defined everywhere.

Key switching is hybrid: chain primes are grouped in digits of `digit_size`
primes, extended to a special modulus P made of `digit_size` extra primes.
"""
from __future__ import annotations

import functools
import io
import math
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ring as R
from .errors import (KeyMissingError, MustBootstrapError, ParameterError,
                     PrecisionError, UsageError)
from .ring import RingParams, RingPoly


# ---------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class CryptoParams:
    ring: RingParams
    delta: float
    tau_b: int = 1
    lam: int = 30
    digit_size: int = 3
    smudge_bits: int = 10

    def __post_init__(self):
        if self.tau_b < 1:
            raise ParameterError("tau_b must be >= 1")
        if self.tau_b > self.L:
            raise ParameterError("tau_b exceeds the number of levels")
        for i, q in enumerate(self.ring.moduli):
            if not self.delta < q:
                raise ParameterError(f"scale {self.delta:.3g} is not below q_{i}")
        if len(self.ring.special) != self.digit_size:
            raise ParameterError("number of special primes must equal digit_size")
        P = self.P
        for g in self.digit_groups(self.L):
            if math.prod(self.ring.moduli[i] for i in g) >= P:
                raise ParameterError("special modulus too small for digit size")
        scales = [0.0] * (self.L + 1)
        scales[self.L] = float(self.delta)
        for lvl in range(self.L, 0, -1):
            scales[lvl - 1] = scales[lvl] * scales[lvl] / self.ring.moduli[lvl]
        object.__setattr__(self, "_scales", tuple(scales))

    @classmethod
    def build(cls, log_n: int = 12, levels: int = 5, delta_bits: int = 40,
              q0_bits: int = 50, digit_size: int = 3, eta: float = 3.2,
              tau_b: int = 1, lam: int = 30, smudge_bits: int = 10) -> "CryptoParams":
        """Generate a chain: q_0 of q0_bits, `levels` primes just above 2**delta_bits."""
        N = 1 << log_n
        if q0_bits > R.MAX_PRIME_BITS or delta_bits >= q0_bits:
            raise ParameterError("need delta_bits < q0_bits <= 50")
        chain = R.ntt_primes(N, levels, 1 << delta_bits)
        top = R.ntt_primes(N, 1 + digit_size, 1 << (q0_bits - 1), exclude=chain)
        q0, special = top[0], tuple(top[1:])
        # the prime closest to delta sits at the top level
        moduli = (q0,) + tuple(reversed(chain))
        rp = RingParams(N=N, moduli=moduli, eta=eta, special=special)
        return cls(ring=rp, delta=float(2 ** delta_bits), tau_b=tau_b, lam=lam,
                   digit_size=digit_size, smudge_bits=smudge_bits)

    # --- derived quantities
    @property
    def N(self) -> int:
        return self.ring.N

    @property
    def n_slots(self) -> int:
        return self.ring.N // 2

    @property
    def L(self) -> int:
        return self.ring.L

    @property
    def moduli(self) -> tuple[int, ...]:
        return self.ring.moduli

    @property
    def special(self) -> tuple[int, ...]:
        return self.ring.special

    @property
    def P(self) -> int:
        return math.prod(self.ring.special)

    def Q(self, level: int | None = None) -> int:
        return self.ring.Q(level)

    def scale(self, level: int) -> float:
        """Canonical scale at a level."""
        return self._scales[level]

    def level_moduli(self, level: int) -> tuple[int, ...]:
        return self.ring.moduli[: level + 1]

    def key_moduli(self) -> tuple[int, ...]:
        return self.ring.moduli + self.ring.special

    def digit_groups(self, level: int) -> list[tuple[int, ...]]:
        idx = list(range(level + 1))
        a = self.digit_size
        return [tuple(idx[i:i + a]) for i in range(0, level + 1, a)]

    def n_digits(self) -> int:
        return len(self.digit_groups(self.L))

    def describe(self) -> dict:
        return {
            "N": self.N, "L": self.L, "delta_bits": math.log2(self.delta),
            "moduli": list(self.moduli), "special": list(self.special),
            "log2_Q": round(math.log2(self.Q()), 2), "log2_P": round(math.log2(self.P), 2),
            "eta": self.ring.eta, "tau_b": self.tau_b, "lambda": self.lam,
            "digit_size": self.digit_size, "smudge_bits": self.smudge_bits,
        }


# ---------------------------------------------------------------------------
# data containers

@dataclass
class Plaintext:
    poly: RingPoly          # evaluation form
    scale: float

    @property
    def level(self) -> int:
        return self.poly.level


@dataclass
class Ciphertext:
    polys: list[RingPoly]   # evaluation form, all at one level
    scale: float

    @property
    def level(self) -> int:
        return self.polys[0].level

    @property
    def size(self) -> int:
        return len(self.polys)

    @property
    def N(self) -> int:
        return self.polys[0].N

    def copy(self) -> "Ciphertext":
        return Ciphertext([p.copy() for p in self.polys], self.scale)


@dataclass
class SecretKey:
    s: RingPoly             # ternary, evaluation form over Q_L * P


@dataclass
class PublicKey:
    b: RingPoly             # evaluation form over Q_L
    a: RingPoly


@dataclass
class SwitchingKey:
    """Per-digit pairs (b_j, a_j) with b_j = -a_j s + e_j + P g_j s'."""
    b: list[RingPoly]
    a: list[RingPoly]


RelinKey = SwitchingKey


@dataclass
class RotationKeySet:
    """Maps a signed slot rotation (left > 0) to its switching key."""
    keys: dict[int, SwitchingKey] = field(default_factory=dict)

    def steps(self) -> list[int]:
        return sorted(self.keys)

    def __contains__(self, r) -> bool:
        return r in self.keys


def pow2_steps(n_slots: int) -> list[int]:
    out = []
    r = 1
    while r < n_slots:
        out += [r, -r]
        r *= 2
    return out


def galois_element(r: int, N: int) -> int:
    """Galois element for a left rotation by r (negative r rotates right)."""
    two_n = 2 * N
    if r >= 0:
        return pow(5, r, two_n)
    return pow(pow(5, -r, two_n), -1, two_n)


# ---------------------------------------------------------------------------
# encoding

@functools.lru_cache(maxsize=16)
def _embedding(N: int):
    n = N // 2
    two_n = 2 * N
    g = np.array([pow(5, j, two_n) for j in range(n)], dtype=np.int64)
    slot = (g - 1) // 2
    conj = (two_n - g - 1) // 2
    i = np.arange(N)
    psi = np.exp(1j * np.pi * i / N)
    return slot, conj, psi, np.conj(psi)


def slots_to_coeffs(values, N: int) -> np.ndarray:
    """Real coefficient vector whose canonical embedding is `values` (unscaled)."""
    slot, conj, psi, psi_inv = _embedding(N)
    z = np.zeros(N // 2, dtype=np.complex128)
    v = np.asarray(values)
    if v.ndim != 1 or v.size > N // 2:
        raise UsageError(f"slot vector must have at most {N // 2} entries")
    z[: v.size] = v
    E = np.zeros(N, dtype=np.complex128)
    E[slot] = z
    E[conj] = np.conj(z)
    return (np.fft.fft(E) / N * psi_inv).real


def coeffs_to_slots(coeffs: np.ndarray, N: int) -> np.ndarray:
    slot, _, psi, _ = _embedding(N)
    E = N * np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * psi)
    return E[slot]


def _round_to_poly(coeffs: np.ndarray, scale: float, moduli) -> RingPoly:
    x = coeffs * scale
    m = float(np.max(np.abs(x))) if x.size else 0.0
    Q = math.prod(moduli)
    if not math.isfinite(m) or m >= Q / 2:
        raise PrecisionError("scaled values exceed the modulus")
    if m < 2.0 ** 62:
        return R.from_ints(np.rint(x).astype(np.int64), moduli)
    big = np.array([int(round(float(c))) for c in x], dtype=object)
    return R.from_ints(big, moduli)


def encode(values, params: CryptoParams, scale: float | None = None,
           level: int | None = None) -> Plaintext:
    level = params.L if level is None else level
    scale = params.scale(level) if scale is None else scale
    coeffs = slots_to_coeffs(values, params.N)
    poly = _round_to_poly(coeffs, scale, params.level_moduli(level))
    return Plaintext(R.ntt_forward(poly), float(scale))


def encode_coeffs(coeffs: np.ndarray, params: CryptoParams, scale: float, level: int) -> Plaintext:
    """Encode from a cached `slots_to_coeffs` result."""
    poly = _round_to_poly(coeffs, scale, params.level_moduli(level))
    return Plaintext(R.ntt_forward(poly), float(scale))


def decode(pt: Plaintext, params: CryptoParams | None = None, complex_out=False) -> np.ndarray:
    ints = R.to_centered_ints(pt.poly)
    coeffs = np.array([float(c) for c in ints]) / pt.scale
    z = coeffs_to_slots(coeffs, pt.poly.N)
    return z if complex_out else z.real


# ---------------------------------------------------------------------------
# keys, encryption

def _key_rows(params: CryptoParams, level: int) -> list[int]:
    L = params.L
    return list(range(level + 1)) + list(range(L + 1, L + 1 + params.digit_size))


def ternary_secret(params: CryptoParams, rng) -> RingPoly:
    return R.ntt_forward(R.sample_ternary(rng, params.N, params.key_moduli()))


def gaussian_ntt(params: CryptoParams, rng, moduli) -> RingPoly:
    return R.ntt_forward(R.sample_gaussian(rng, params.N, moduli, params.ring.eta))


def uniform_ntt(params: CryptoParams, rng, moduli) -> RingPoly:
    # a uniform vector is uniform in either domain
    return RingPoly(R.uniform_residues(rng, params.N, moduli), tuple(moduli), True)


def secret_at(sk_poly: RingPoly, params: CryptoParams, level: int) -> RingPoly:
    return R.drop_level(R.RingPoly(sk_poly.data[: params.L + 1], params.moduli, True), level)


def gadget_add(b: RingPoly, s_prime: RingPoly, j: int, params: CryptoParams) -> RingPoly:
    """b + P * g_j * s' where g_j is the CRT indicator of digit j."""
    out = b.copy()
    P = params.P
    q, qf = R._qcols(b.moduli)
    for i in params.digit_groups(params.L)[j]:
        qi = b.moduli[i]
        pc = np.int64(P % qi)
        t = R.mulmod(s_prime.data[i], pc, q[i], qf[i])
        out.data[i] = R.addmod(out.data[i], t, q[i])
    return out


def gen_switching_key(params: CryptoParams, s: RingPoly, s_prime: RingPoly, rng) -> SwitchingKey:
    km = params.key_moduli()
    bs, as_ = [], []
    for j in range(params.n_digits()):
        a = uniform_ntt(params, rng, km)
        e = gaussian_ntt(params, rng, km)
        b = R.poly_add(R.poly_neg(R.poly_mul(a, s)), e)
        bs.append(gadget_add(b, s_prime, j, params))
        as_.append(a)
    return SwitchingKey(bs, as_)


def keygen(params: CryptoParams, rng) -> tuple[SecretKey, PublicKey]:
    s = ternary_secret(params, rng)
    return SecretKey(s), public_key_from_secret(params, s, rng)


def public_key_from_secret(params: CryptoParams, s: RingPoly, rng) -> PublicKey:
    m = params.moduli
    a = uniform_ntt(params, rng, m)
    e = gaussian_ntt(params, rng, m)
    sL = secret_at(s, params, params.L)
    b = R.poly_add(R.poly_neg(R.poly_mul(a, sL)), e)
    return PublicKey(b, a)


def gen_relin_key(params: CryptoParams, sk: SecretKey, rng) -> RelinKey:
    return gen_switching_key(params, sk.s, R.poly_mul(sk.s, sk.s), rng)


def gen_rotation_keys(params: CryptoParams, sk: SecretKey, rng, steps=None) -> RotationKeySet:
    steps = pow2_steps(params.n_slots) if steps is None else steps
    ks = RotationKeySet()
    for r in steps:
        g = galois_element(r, params.N)
        ks.keys[r] = gen_switching_key(params, sk.s, R.automorphism(sk.s, g), rng)
    return ks


def encrypt(pt: Plaintext, pk: PublicKey, params: CryptoParams, rng) -> Ciphertext:
    lvl = pt.level
    m = params.level_moduli(lvl)
    b = R.drop_level(pk.b, lvl)
    a = R.drop_level(pk.a, lvl)
    u = R.ntt_forward(R.sample_ternary(rng, params.N, m))
    e0 = gaussian_ntt(params, rng, m)
    e1 = gaussian_ntt(params, rng, m)
    c0 = R.poly_add(R.poly_add(R.poly_mul(b, u), e0), pt.poly)
    c1 = R.poly_add(R.poly_mul(a, u), e1)
    return Ciphertext([c0, c1], pt.scale)


def encrypt_values(values, pk: PublicKey, params: CryptoParams, rng,
                   level: int | None = None) -> Ciphertext:
    return encrypt(encode(values, params, level=level), pk, params, rng)


def encrypt_zero(pk: PublicKey, params: CryptoParams, rng, level: int, scale: float) -> Ciphertext:
    m = params.level_moduli(level)
    pt = Plaintext(R.zero(params.N, m, True), scale)
    return encrypt(pt, pk, params, rng)


def decrypt(ct: Ciphertext, sk: SecretKey, params: CryptoParams) -> Plaintext:
    s = secret_at(sk.s, params, ct.level)
    acc = ct.polys[-1]
    for c in reversed(ct.polys[:-1]):
        acc = R.poly_add(R.poly_mul(acc, s), c)
    return Plaintext(acc, ct.scale)


def decrypt_values(ct: Ciphertext, sk: SecretKey, params: CryptoParams) -> np.ndarray:
    return decode(decrypt(ct, sk, params), params)


def rerandomize(ct: Ciphertext, pk: PublicKey, params: CryptoParams, rng) -> Ciphertext:
    z = encrypt_zero(pk, params, rng, ct.level, ct.scale)
    return Ciphertext([R.poly_add(a, b) for a, b in zip(ct.polys, z.polys)] + ct.polys[2:], ct.scale)


# ---------------------------------------------------------------------------
# key switching core

@functools.lru_cache(maxsize=1024)
def _basis_consts(src: tuple[int, ...], dst: tuple[int, ...]):
    F = math.prod(src)
    inv = np.array([pow((F // q) % q, -1, q) for q in src], dtype=np.int64).reshape(-1, 1)
    mat = np.array([[(F // f) % t for t in dst] for f in src], dtype=np.int64)
    return inv, mat[:, :, None]


def basis_extend(x: np.ndarray, src: tuple[int, ...], dst: tuple[int, ...]) -> np.ndarray:
    """Approximate fast basis conversion of coefficient residues (exact on shared primes)."""
    inv, mat = _basis_consts(src, dst)
    qs = np.array(src, dtype=np.int64).reshape(-1, 1)
    y = R.mulmod(x, inv, qs, qs.astype(np.float64))
    qd = np.array(dst, dtype=np.int64).reshape(-1, 1)
    qdf = qd.astype(np.float64)
    out = np.zeros((len(dst), x.shape[1]), dtype=np.int64)
    for f in range(len(src)):
        out = R.addmod(out, R.mulmod(y[f][None, :], mat[f], qd, qdf), qd)
    pos = {q: i for i, q in enumerate(src)}
    for t_idx, t in enumerate(dst):
        if t in pos:
            out[t_idx] = x[pos[t]]
    return out


def keyswitch(params: CryptoParams, c: RingPoly, key: SwitchingKey) -> tuple[RingPoly, RingPoly]:
    """Return (d0, d1) in evaluation form with d0 + d1 s ~ c s' (mod Q_l)."""
    if c.is_ntt:
        c = R.ntt_inverse(c)
    level = c.level
    qm = params.level_moduli(level)
    ext = qm + params.special
    rows = _key_rows(params, level)
    q = np.array(ext, dtype=np.int64).reshape(-1, 1)
    qf = q.astype(np.float64)
    acc0 = np.zeros((len(ext), c.N), dtype=np.int64)
    acc1 = np.zeros_like(acc0)
    for j, grp in enumerate(params.digit_groups(level)):
        src = tuple(qm[i] for i in grp)
        x = basis_extend(c.data[list(grp)], src, ext)
        X = R.ntt_array(x, ext)
        kb = key.b[j].data[rows]
        ka = key.a[j].data[rows]
        acc0 = R.addmod(acc0, R.mulmod(X, kb, q, qf), q)
        acc1 = R.addmod(acc1, R.mulmod(X, ka, q, qf), q)
    return mod_down(params, acc0, level), mod_down(params, acc1, level)


def mod_down(params: CryptoParams, acc: np.ndarray, level: int) -> RingPoly:
    qm = params.level_moduli(level)
    k = len(qm)
    sp = R.intt_array(acc[k:], params.special)
    corr = R.ntt_array(basis_extend(sp, params.special, qm), qm)
    q = np.array(qm, dtype=np.int64).reshape(-1, 1)
    pinv = np.array([pow(params.P % m, -1, m) for m in qm], dtype=np.int64).reshape(-1, 1)
    d = R.submod(acc[:k], corr, q)
    return RingPoly(R.mulmod(d, pinv, q, q.astype(np.float64)), qm, True)


# ---------------------------------------------------------------------------
# evaluator

def _close(a: float, b: float, rel=1e-9) -> bool:
    return math.isclose(a, b, rel_tol=rel)


class Evaluator:
    """Homomorphic operations with op counters.

    Counters (keys of `self.counters`): add, mult_plain, mult_scalar, mult,
    relin, rescale, rotate, keyswitch.
    """

    def __init__(self, params: CryptoParams, rlk: RelinKey | None = None,
                 rotation_keys: RotationKeySet | None = None, trace: bool = False):
        self.params = params
        self.rlk = rlk
        self.rtk = rotation_keys or RotationKeySet()
        self.counters: Counter = Counter()
        self.trace: list | None = [] if trace else None
        self.min_level = params.L

    def fork(self) -> "Evaluator":
        """Evaluator sharing keys but with private counters."""
        return Evaluator(self.params, self.rlk, self.rtk, trace=self.trace is not None)

    def merge_counters(self, other: "Evaluator"):
        self.counters.update(other.counters)
        self.min_level = min(self.min_level, other.min_level)
        if self.trace is not None and other.trace:
            self.trace.extend(other.trace)

    # --- level/scale plumbing
    def drop_level(self, ct: Ciphertext, level: int) -> Ciphertext:
        """Modulus drop: same scale, fewer primes."""
        if level > ct.level:
            raise UsageError(f"cannot raise level {ct.level} to {level}")
        if level == ct.level:
            return ct
        return Ciphertext([R.drop_level(p, level) for p in ct.polys], ct.scale)

    def _match_levels(self, a: Ciphertext, b: Ciphertext):
        lvl = min(a.level, b.level)
        return self.drop_level(a, lvl), self.drop_level(b, lvl)

    def _check_scales(self, s1: float, s2: float):
        if not _close(s1, s2):
            raise UsageError(f"scale mismatch: {s1:.6g} vs {s2:.6g}")

    # --- additive ops
    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        a, b = self._match_levels(a, b)
        self._check_scales(a.scale, b.scale)
        self.counters["add"] += 1
        n = max(a.size, b.size)
        out = []
        for i in range(n):
            if i < a.size and i < b.size:
                out.append(R.poly_add(a.polys[i], b.polys[i]))
            else:
                out.append((a.polys[i] if i < a.size else b.polys[i]).copy())
        return Ciphertext(out, max(a.scale, b.scale))

    def neg(self, a: Ciphertext) -> Ciphertext:
        return Ciphertext([R.poly_neg(p) for p in a.polys], a.scale)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.add(a, self.neg(b))

    def add_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check_scales(ct.scale, pt.scale)
        lvl = min(ct.level, pt.level)
        ct = self.drop_level(ct, lvl)
        self.counters["add"] += 1
        c0 = R.poly_add(ct.polys[0], R.drop_level(pt.poly, lvl))
        return Ciphertext([c0] + [p.copy() for p in ct.polys[1:]], ct.scale)

    def sub_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        return self.add_plain(ct, Plaintext(R.poly_neg(pt.poly), pt.scale))

    def add_const(self, ct: Ciphertext, c: float) -> Ciphertext:
        """Add a constant to every slot (constant polynomial at the ct scale)."""
        k = int(round(c * ct.scale))
        if k == 0:
            return ct
        c0 = ct.polys[0]
        const = np.array([k % q for q in c0.moduli], dtype=np.int64).reshape(-1, 1)
        self.counters["add"] += 1
        data = R.addmod(c0.data, np.broadcast_to(const, c0.data.shape), c0.qcol())
        return Ciphertext([RingPoly(data, c0.moduli, True)] + [p.copy() for p in ct.polys[1:]], ct.scale)

    # --- multiplicative ops
    def mult_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        if ct.level == 0:
            raise MustBootstrapError("multiplication at level 0")
        lvl = min(ct.level, pt.level)
        ct = self.drop_level(ct, lvl)
        p = R.drop_level(pt.poly, lvl)
        self.counters["mult_plain"] += 1
        return Ciphertext([R.poly_mul(c, p) for c in ct.polys], ct.scale * pt.scale)

    def mult_int(self, ct: Ciphertext, k: int, pt_scale: float) -> Ciphertext:
        """Multiply by integer constant k that encodes a scalar at scale pt_scale."""
        if ct.level == 0:
            raise MustBootstrapError("multiplication at level 0")
        self.counters["mult_scalar"] += 1
        return Ciphertext([R.poly_mul_int(c, k) for c in ct.polys], ct.scale * pt_scale)

    def mult(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        if a.size != 2 or b.size != 2:
            raise UsageError("mult expects size-2 ciphertexts")
        if min(a.level, b.level) == 0:
            raise MustBootstrapError("multiplication at level 0")
        a, b = self._match_levels(a, b)
        self.counters["mult"] += 1
        a0, a1 = a.polys
        b0, b1 = b.polys
        d0 = R.poly_mul(a0, b0)
        d1 = R.poly_add(R.poly_mul(a0, b1), R.poly_mul(a1, b0))
        d2 = R.poly_mul(a1, b1)
        scale = a.scale * b.scale
        if scale >= self.params.Q(a.level):
            raise PrecisionError("product scale exceeds the ciphertext modulus")
        return Ciphertext([d0, d1, d2], scale)

    def relinearize(self, ct: Ciphertext) -> Ciphertext:
        if ct.size == 2:
            return ct
        if ct.size != 3:
            raise UsageError("relinearize expects a size-3 ciphertext")
        if self.rlk is None:
            raise KeyMissingError("relinearization key not available")
        self.counters["relin"] += 1
        self.counters["keyswitch"] += 1
        d0, d1 = keyswitch(self.params, ct.polys[2], self.rlk)
        return Ciphertext([R.poly_add(ct.polys[0], d0), R.poly_add(ct.polys[1], d1)], ct.scale)

    def rescale(self, ct: Ciphertext) -> Ciphertext:
        lvl = ct.level
        if lvl == 0:
            raise MustBootstrapError("rescale at level 0")
        self.counters["rescale"] += 1
        ql = ct.polys[0].moduli[lvl]
        qm = ct.polys[0].moduli[:lvl]
        q = np.array(qm, dtype=np.int64).reshape(-1, 1)
        qf = q.astype(np.float64)
        inv = np.array([pow(ql, -1, m) for m in qm], dtype=np.int64).reshape(-1, 1)
        out = []
        for p in ct.polys:
            last = R.intt_array(p.data[lvl:lvl + 1], (ql,))[0]
            last = np.where(last > ql // 2, last - ql, last)
            t = R.ntt_array(np.mod(last[None, :], q), qm)
            d = R.submod(p.data[:lvl], t, q)
            out.append(RingPoly(R.mulmod(d, inv, q, qf), qm, True))
        self.min_level = min(self.min_level, lvl - 1)
        return Ciphertext(out, ct.scale / ql)

    def rotate(self, ct: Ciphertext, r: int) -> Ciphertext:
        """Cyclic slot rotation: r > 0 rotates left, r < 0 rotates right."""
        n = self.params.n_slots
        r = r % n
        if r == 0:
            return ct
        if ct.size != 2:
            raise UsageError("rotate expects a size-2 ciphertext")
        for step in self._decompose(r):
            ct = self._rotate_key(ct, step)
        return ct

    def _decompose(self, r: int) -> list[int]:
        n = self.params.n_slots
        if r in self.rtk.keys:
            return [r]
        if r - n in self.rtk.keys:
            return [r - n]
        left = [1 << i for i in range(r.bit_length()) if r >> i & 1]
        rr = n - r
        right = [-(1 << i) for i in range(rr.bit_length()) if rr >> i & 1]
        best = left if len(left) <= len(right) else right
        for s in best:
            if s not in self.rtk.keys:
                alt = right if best is left else left
                if all(t in self.rtk.keys for t in alt):
                    return alt
                raise KeyMissingError(f"no rotation key for step {s}")
        return best

    def _rotate_key(self, ct: Ciphertext, step: int) -> Ciphertext:
        key = self.rtk.keys.get(step)
        if key is None:
            raise KeyMissingError(f"no rotation key for step {step}")
        g = galois_element(step, self.params.N)
        c0 = R.automorphism(ct.polys[0], g)
        c1 = R.automorphism(ct.polys[1], g)
        self.counters["rotate"] += 1
        self.counters["keyswitch"] += 1
        d0, d1 = keyswitch(self.params, c1, key)
        return Ciphertext([R.poly_add(c0, d0), d1], ct.scale)

    # --- canonical-scale helpers
    def scalar_to_level(self, ct: Ciphertext, c: float, level: int,
                        target_scale: float | None = None) -> Ciphertext:
        """c * ct landed on `level` with the canonical (or given) scale; costs one rescale."""
        target_scale = self.params.scale(level) if target_scale is None else target_scale
        if ct.level == level and c == 1.0 and _close(ct.scale, target_scale):
            return ct
        if ct.level <= level:
            raise MustBootstrapError(f"need level > {level} for scalar alignment, have {ct.level}")
        ct = self.drop_level(ct, level + 1)
        q = self.params.moduli[level + 1]
        pt_scale = target_scale * q / ct.scale
        k = int(round(c * pt_scale))
        if self.trace is not None:
            self.trace.append(("scalar", float(c), level))
        out = self.rescale(self.mult_int(ct, k, pt_scale))
        out.scale = target_scale
        return out

    def align(self, a: Ciphertext, b: Ciphertext) -> tuple[Ciphertext, Ciphertext]:
        """Bring two ciphertexts to a common level and scale."""
        if a.level == b.level:
            self._check_scales(a.scale, b.scale)
            return a, b
        if a.level > b.level:
            return self.scalar_to_level(a, 1.0, b.level, b.scale), b
        return a, self.scalar_to_level(b, 1.0, a.level, a.scale)

    def add_aligned(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.add(*self.align(a, b))

    def sub_aligned(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        return self.sub(*self.align(a, b))

    def mul_rr(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        """Multiply, relinearize and rescale two canonical-scale ciphertexts."""
        lvl = min(a.level, b.level)
        if lvl == 0:
            raise MustBootstrapError("multiplication at level 0")
        if a.level > lvl:
            a = self.scalar_to_level(a, 1.0, lvl)
        if b.level > lvl:
            b = self.scalar_to_level(b, 1.0, lvl)
        out = self.rescale(self.relinearize(self.mult(a, b)))
        out.scale = self.params.scale(lvl - 1) if _close(out.scale, self.params.scale(lvl - 1)) else out.scale
        return out

    def plain_scale_for(self, ct: Ciphertext) -> float:
        """Plaintext scale that makes mult_plain + rescale land on the canonical scale."""
        lvl = ct.level
        return self.params.scale(lvl - 1) * self.params.moduli[lvl] / ct.scale

    def encode_for(self, ct: Ciphertext, values) -> Plaintext:
        return encode(values, self.params, scale=self.plain_scale_for(ct), level=ct.level)

    def mult_values(self, ct: Ciphertext, values) -> Ciphertext:
        """Slotwise product with cleartext values, rescaled to the canonical scale."""
        if ct.level == 0:
            raise MustBootstrapError("multiplication at level 0")
        out = self.rescale(self.mult_plain(ct, self.encode_for(ct, values)))
        out.scale = self.params.scale(ct.level - 1)
        return out

    def rotate_sum(self, ct: Ciphertext, steps) -> Ciphertext:
        """ct + rot(ct, s1), then the same for s2, ... (inner sums / duplication)."""
        for s in steps:
            ct = self.add(ct, self.rotate(ct, s))
        return ct

    def dot_product(self, x, ct: Ciphertext, a: int) -> Ciphertext:
        """Inner product of the first `a` slots, result in slot 0."""
        if a & (a - 1) or a < 1 or a > self.params.n_slots:
            raise UsageError("length must be a power of two <= N/2")
        if isinstance(x, Ciphertext):
            prod = self.mul_rr(x, ct)
        elif isinstance(x, Plaintext):
            prod = self.rescale(self.mult_plain(ct, x))
        else:
            prod = self.mult_values(ct, x)
        return self.rotate_sum(prod, [1 << i for i in range(a.bit_length() - 1)])


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"MHEG"
VERSION = 1
_KIND = {"poly": 1, "pt": 2, "ct": 3, "pk": 4, "swk": 5, "polys": 6}


def _write_poly(buf: io.BytesIO, p: RingPoly):
    buf.write(struct.pack("<IIB", p.N, len(p.moduli), int(p.is_ntt)))
    buf.write(np.asarray(p.moduli, dtype="<u8").tobytes())
    raw = np.ascontiguousarray(p.data, dtype="<i8").tobytes()
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)


def _read_poly(buf: io.BytesIO) -> RingPoly:
    N, k, ntt = struct.unpack("<IIB", buf.read(9))
    moduli = tuple(int(x) for x in np.frombuffer(buf.read(8 * k), dtype="<u8"))
    (n,) = struct.unpack("<Q", buf.read(8))
    data = np.frombuffer(buf.read(n), dtype="<i8").reshape(k, N).astype(np.int64)
    return RingPoly(data, moduli, bool(ntt))


def dumps(obj) -> bytes:
    """Serialize a RingPoly, Plaintext, Ciphertext, PublicKey, SwitchingKey or list of polys."""
    buf = io.BytesIO()
    if isinstance(obj, RingPoly):
        kind, polys, scale = "poly", [obj], 0.0
    elif isinstance(obj, Plaintext):
        kind, polys, scale = "pt", [obj.poly], obj.scale
    elif isinstance(obj, Ciphertext):
        kind, polys, scale = "ct", obj.polys, obj.scale
    elif isinstance(obj, PublicKey):
        kind, polys, scale = "pk", [obj.b, obj.a], 0.0
    elif isinstance(obj, SwitchingKey):
        kind, polys, scale = "swk", list(obj.b) + list(obj.a), 0.0
    elif isinstance(obj, (list, tuple)) and all(isinstance(p, RingPoly) for p in obj):
        kind, polys, scale = "polys", list(obj), 0.0
    else:
        raise UsageError(f"cannot serialize {type(obj).__name__}")
    N = polys[0].N if polys else 0
    level = polys[0].level if polys else -1
    buf.write(MAGIC)
    buf.write(struct.pack("<HBIidI", VERSION, _KIND[kind], N, level, scale, len(polys)))
    for p in polys:
        _write_poly(buf, p)
    return buf.getvalue()


def loads(data: bytes):
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise UsageError("bad magic")
    version, kind, N, level, scale, n = struct.unpack("<HBIidI", buf.read(struct.calcsize("<HBIidI")))
    if version != VERSION:
        raise UsageError(f"unsupported version {version}")
    polys = [_read_poly(buf) for _ in range(n)]
    if kind == _KIND["poly"]:
        return polys[0]
    if kind == _KIND["pt"]:
        return Plaintext(polys[0], scale)
    if kind == _KIND["ct"]:
        return Ciphertext(polys, scale)
    if kind == _KIND["pk"]:
        return PublicKey(polys[0], polys[1])
    if kind == _KIND["swk"]:
        h = len(polys) // 2
        return SwitchingKey(polys[:h], polys[h:])
    return polys


def dumps_many(objs) -> bytes:
    """Length-prefixed concatenation of several serialized objects."""
    parts = [dumps(o) for o in objs]
    return struct.pack("<I", len(parts)) + b"".join(struct.pack("<Q", len(p)) + p for p in parts)


def loads_many(data: bytes) -> list:
    buf = io.BytesIO(data)
    (n,) = struct.unpack("<I", buf.read(4))
    out = []
    for _ in range(n):
        (k,) = struct.unpack("<Q", buf.read(8))
        out.append(loads(buf.read(k)))
    return out


def ciphertext_nbytes(params: CryptoParams, level: int, size: int = 2) -> int:
    """Serialized size of a ciphertext at a level."""
    header = 4 + struct.calcsize("<HBIidI")
    per_poly = 9 + 8 * (level + 1) + 8 + 8 * (level + 1) * params.N
    return header + size * per_poly
