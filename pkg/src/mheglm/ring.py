"""Negacyclic polynomial arithmetic over an RNS moduli chain.

A polynomial of Z_Q[X]/(X^N + 1) with Q = q_0 * ... * q_l is stored as an
(l+1, N) int64 array of residues.  Products of residues use a float quotient
estimate and wrapping int64 correction, exact for primes below 2**50.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import sympy

from .errors import ParameterError, UsageError

MAX_PRIME_BITS = 50


# ---------------------------------------------------------------------------
# word-level modular arithmetic (broadcasting, int64)

def mulmod(a, b, q, qf):
    """(a * b) mod q for residues a, b in [0, q) and q < 2**50."""
    quot = np.floor(a.astype(np.float64) * b.astype(np.float64) / qf).astype(np.int64)
    r = a * b - quot * q
    r += (r >> 63) & q
    r -= q
    r += (r >> 63) & q
    return r


def mulmod_pre(a, w, wq, q):
    """a * w mod q where wq = w / q was precomputed in float."""
    quot = np.floor(a.astype(np.float64) * wq).astype(np.int64)
    r = a * w - quot * q
    r += (r >> 63) & q
    r -= q
    r += (r >> 63) & q
    return r


def addmod(a, b, q):
    r = a + b - q
    r += (r >> 63) & q
    return r


def submod(a, b, q):
    r = a - b
    r += (r >> 63) & q
    return r


# ---------------------------------------------------------------------------
# primes and roots

def is_ntt_prime(q: int, N: int) -> bool:
    return q % (2 * N) == 1 and sympy.isprime(q)


def ntt_primes(N: int, count: int, above: int, exclude=()) -> list[int]:
    """Smallest `count` primes q > above with q = 1 mod 2N, skipping `exclude`."""
    step = 2 * N
    q = (above // step + 1) * step + 1
    out = []
    skip = set(exclude)
    while len(out) < count:
        if q not in skip and sympy.isprime(q):
            out.append(q)
        q += step
    if out and out[-1].bit_length() > MAX_PRIME_BITS:
        raise ParameterError(f"prime {out[-1]} exceeds {MAX_PRIME_BITS} bits")
    return out


@functools.lru_cache(maxsize=None)
def root_of_unity(q: int, N: int) -> int:
    """A primitive 2N-th root of unity mod q (deterministic choice)."""
    if (q - 1) % (2 * N):
        raise ParameterError(f"modulus {q} has no order-{2 * N} root of unity")
    e = (q - 1) // (2 * N)
    for x in range(2, 1 << 16):
        psi = pow(x, e, q)
        if pow(psi, N, q) == q - 1:
            return psi
    raise ParameterError(f"no 2N-th root found for {q}")


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=None)
def _prime_tables(q: int, N: int):
    psi = root_of_unity(q, N)
    psi_inv = pow(psi, -1, q)
    n_inv = pow(N, -1, q)
    fwd = np.empty(N, dtype=np.int64)
    inv = np.empty(N, dtype=np.int64)
    a, b = 1, n_inv
    for i in range(N):
        fwd[i] = a
        inv[i] = b
        a = a * psi % q
        b = b * psi_inv % q
    # omega = psi^2 powers
    om = np.empty(N, dtype=np.int64)
    iom = np.empty(N, dtype=np.int64)
    w, wi = pow(psi, 2, q), pow(psi_inv, 2, q)
    a = b = 1
    for i in range(N):
        om[i] = a
        iom[i] = b
        a = a * w % q
        b = b * wi % q
    return fwd, inv, om, iom


class _NTTTables:
    def __init__(self, N: int, moduli: tuple[int, ...]):
        self.N = N
        self.logn = N.bit_length() - 1
        k = len(moduli)
        self.q = np.array(moduli, dtype=np.int64).reshape(k, 1)
        self.qf = self.q.astype(np.float64)
        self.q3 = self.q.reshape(k, 1, 1)
        self.bitrev = _bitrev(N)
        tabs = [_prime_tables(q, N) for q in moduli]
        self.twist = np.stack([t[0] for t in tabs])
        self.itwist = np.stack([t[1] for t in tabs])
        self.twist_q = self.twist / self.qf
        self.itwist_q = self.itwist / self.qf
        om = np.stack([t[2] for t in tabs])
        iom = np.stack([t[3] for t in tabs])
        self.stages = []
        self.istages = []
        for s in range(self.logn):
            m = 1 << s
            stride = N // (2 * m)
            w = np.ascontiguousarray(om[:, ::stride][:, :m]).reshape(k, 1, m)
            wi = np.ascontiguousarray(iom[:, ::stride][:, :m]).reshape(k, 1, m)
            self.stages.append((w, w / self.q3.astype(np.float64)))
            self.istages.append((wi, wi / self.q3.astype(np.float64)))


@functools.lru_cache(maxsize=256)
def ntt_tables(N: int, moduli: tuple[int, ...]) -> _NTTTables:
    for q in moduli:
        if (q - 1) % (2 * N):
            raise ParameterError(f"modulus {q} has no order-{2 * N} root of unity")
    return _NTTTables(N, moduli)


def _dit(a: np.ndarray, t: _NTTTables, stages) -> np.ndarray:
    k, N = a.shape
    q3 = t.q3
    a = a[:, t.bitrev]
    for s in range(t.logn):
        m = 1 << s
        a = a.reshape(k, N // (2 * m), 2, m)
        u = a[:, :, 0, :]
        v = a[:, :, 1, :]
        if s:
            w, wq = stages[s]
            v = mulmod_pre(v, w, wq, q3)
        out = np.empty_like(a)
        out[:, :, 0, :] = addmod(u, v, q3)
        out[:, :, 1, :] = submod(u, v, q3)
        a = out
    return a.reshape(k, N)


def ntt_array(data: np.ndarray, moduli: tuple[int, ...]) -> np.ndarray:
    t = ntt_tables(data.shape[1], tuple(moduli))
    a = mulmod_pre(data, t.twist, t.twist_q, t.q)
    return _dit(a, t, t.stages)


def intt_array(data: np.ndarray, moduli: tuple[int, ...]) -> np.ndarray:
    t = ntt_tables(data.shape[1], tuple(moduli))
    a = _dit(data, t, t.istages)
    return mulmod_pre(a, t.itwist, t.itwist_q, t.q)


# ---------------------------------------------------------------------------
# parameters and polynomials

@dataclass(frozen=True)
class RingParams:
    N: int
    moduli: tuple[int, ...]
    eta: float = 3.2
    special: tuple[int, ...] = ()

    def __post_init__(self):
        N = self.N
        if N < 1024 or N & (N - 1):
            raise ParameterError(f"N must be a power of two >= 2^10, got {N}")
        allq = tuple(self.moduli) + tuple(self.special)
        if len(set(allq)) != len(allq):
            raise ParameterError("moduli must be pairwise distinct")
        for q in allq:
            if not is_ntt_prime(q, N):
                raise ParameterError(f"modulus {q} is not a prime = 1 mod 2N (no 2N-th root of unity)")
            if q.bit_length() > MAX_PRIME_BITS:
                raise ParameterError(f"modulus {q} exceeds {MAX_PRIME_BITS} bits")
        if self.eta <= 0:
            raise ParameterError("eta must be positive")

    @property
    def L(self) -> int:
        return len(self.moduli) - 1

    def Q(self, level: int | None = None) -> int:
        level = self.L if level is None else level
        out = 1
        for q in self.moduli[: level + 1]:
            out *= q
        return out


@dataclass
class RingPoly:
    """Residues (k, N) of one polynomial modulo each prime in `moduli`."""

    data: np.ndarray
    moduli: tuple[int, ...]
    is_ntt: bool = False

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def level(self) -> int:
        return len(self.moduli) - 1

    def copy(self) -> "RingPoly":
        return RingPoly(self.data.copy(), self.moduli, self.is_ntt)

    def qcol(self) -> np.ndarray:
        return np.array(self.moduli, dtype=np.int64).reshape(-1, 1)

    def __eq__(self, other):
        return (isinstance(other, RingPoly) and self.moduli == other.moduli
                and self.is_ntt == other.is_ntt and np.array_equal(self.data, other.data))


def _qcols(moduli):
    q = np.array(moduli, dtype=np.int64).reshape(-1, 1)
    return q, q.astype(np.float64)


def zero(N: int, moduli, is_ntt=False) -> RingPoly:
    return RingPoly(np.zeros((len(moduli), N), dtype=np.int64), tuple(moduli), is_ntt)


def from_ints(coeffs, moduli) -> RingPoly:
    """Reduce an integer coefficient vector (int64 or Python ints) into residues."""
    coeffs = np.asarray(coeffs)
    moduli = tuple(moduli)
    if coeffs.dtype == object:
        rows = [np.array([int(c) % q for c in coeffs], dtype=np.int64) for q in moduli]
        return RingPoly(np.stack(rows), moduli)
    q, _ = _qcols(moduli)
    return RingPoly(np.mod(coeffs.astype(np.int64)[None, :], q), moduli)


@functools.lru_cache(maxsize=128)
def _crt_consts(moduli: tuple[int, ...]):
    Q = 1
    for q in moduli:
        Q *= q
    consts = []
    for q in moduli:
        Qi = Q // q
        consts.append(Qi * pow(Qi % q, -1, q))
    return Q, consts


def to_centered_ints(p: RingPoly) -> np.ndarray:
    """CRT-reconstruct coefficients into (-Q/2, Q/2] as a Python-int object array."""
    if p.is_ntt:
        p = ntt_inverse(p)
    if len(p.moduli) == 1:
        q = p.moduli[0]
        d = p.data[0]
        return np.where(d > q // 2, d - q, d).astype(object)
    Q, consts = _crt_consts(p.moduli)
    acc = np.zeros(p.N, dtype=object)
    for row, c in zip(p.data, consts):
        acc = acc + row.astype(object) * c
    acc = acc % Q
    half = Q // 2
    return np.where(acc > half, acc - Q, acc)


def ntt_forward(p: RingPoly) -> RingPoly:
    if p.is_ntt:
        raise UsageError("polynomial already in evaluation form")
    return RingPoly(ntt_array(p.data, p.moduli), p.moduli, True)


def ntt_inverse(p: RingPoly) -> RingPoly:
    if not p.is_ntt:
        raise UsageError("polynomial already in coefficient form")
    return RingPoly(intt_array(p.data, p.moduli), p.moduli, False)


def _check_pair(a: RingPoly, b: RingPoly):
    if a.N != b.N:
        raise UsageError("ring dimension mismatch")
    if a.moduli != b.moduli:
        raise UsageError(f"level mismatch: {a.level} vs {b.level}")
    if a.is_ntt != b.is_ntt:
        raise UsageError("domain mismatch (coefficient vs evaluation form)")


def poly_add(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    return RingPoly(addmod(a.data, b.data, a.qcol()), a.moduli, a.is_ntt)


def poly_sub(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    return RingPoly(submod(a.data, b.data, a.qcol()), a.moduli, a.is_ntt)


def poly_neg(a: RingPoly) -> RingPoly:
    q = a.qcol()
    return RingPoly(submod(np.zeros_like(a.data), a.data, q), a.moduli, a.is_ntt)


def poly_mul(a: RingPoly, b: RingPoly) -> RingPoly:
    """Negacyclic product; result is in the domain of the inputs."""
    _check_pair(a, b)
    q, qf = _qcols(a.moduli)
    if a.is_ntt:
        return RingPoly(mulmod(a.data, b.data, q, qf), a.moduli, True)
    prod = mulmod(ntt_array(a.data, a.moduli), ntt_array(b.data, b.moduli), q, qf)
    return RingPoly(intt_array(prod, a.moduli), a.moduli, False)


def poly_mul_int(a: RingPoly, c: int) -> RingPoly:
    """Multiply by an arbitrary integer constant (reduced per prime)."""
    q, qf = _qcols(a.moduli)
    cs = np.array([int(c) % m for m in a.moduli], dtype=np.int64).reshape(-1, 1)
    return RingPoly(mulmod(a.data, cs, q, qf), a.moduli, a.is_ntt)


def drop_level(p: RingPoly, target: int) -> RingPoly:
    """Keep residues q_0..q_target (reduction into the smaller modulus Q_target)."""
    if target > p.level:
        raise UsageError(f"cannot raise level {p.level} to {target}")
    if target < 0:
        raise UsageError("negative level")
    if target == p.level:
        return p
    return RingPoly(p.data[: target + 1].copy(), p.moduli[: target + 1], p.is_ntt)


def select_moduli(p: RingPoly, rows, moduli) -> RingPoly:
    return RingPoly(p.data[list(rows)], tuple(moduli), p.is_ntt)


@functools.lru_cache(maxsize=512)
def automorphism_index(N: int, g: int) -> np.ndarray:
    """Permutation realising X -> X^g on evaluation-form vectors."""
    k = np.arange(N, dtype=np.int64)
    return (((2 * k + 1) * g) % (2 * N) - 1) // 2


def automorphism(p: RingPoly, g: int) -> RingPoly:
    if p.is_ntt:
        return RingPoly(p.data[:, automorphism_index(p.N, g)], p.moduli, True)
    N = p.N
    i = np.arange(N, dtype=np.int64)
    j = (i * g) % (2 * N)
    out = np.zeros_like(p.data)
    neg = j >= N
    pos = ~neg
    out[:, j[pos]] = p.data[:, pos]
    q = p.qcol()
    out[:, j[neg] - N] = submod(np.zeros_like(p.data[:, neg]), p.data[:, neg], q)
    return RingPoly(out, p.moduli, False)


# ---------------------------------------------------------------------------
# samplers

def uniform_residues(rng: np.random.Generator, N: int, moduli) -> np.ndarray:
    return np.stack([rng.integers(0, q, size=N, dtype=np.int64) for q in moduli])


def sample_uniform(rng: np.random.Generator, N: int, moduli) -> RingPoly:
    """Uniform element of Z_Q[X]/(X^N+1), independent per residue (CRT-uniform)."""
    return RingPoly(uniform_residues(rng, N, moduli), tuple(moduli))


def gaussian_coeffs(rng: np.random.Generator, N: int, eta: float) -> np.ndarray:
    """Rounded Gaussian with standard deviation eta, tail-cut at 6 eta."""
    bound = 6.0 * eta
    x = rng.normal(0.0, eta, size=N)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.normal(0.0, eta, size=int(bad.sum()))
        bad = np.abs(x) > bound
    return np.rint(x).astype(np.int64)


def ternary_coeffs(rng: np.random.Generator, N: int) -> np.ndarray:
    return rng.integers(-1, 2, size=N, dtype=np.int64)


def sample_gaussian(rng: np.random.Generator, N: int, moduli, eta: float = 3.2) -> RingPoly:
    return from_ints(gaussian_coeffs(rng, N, eta), moduli)


def sample_ternary(rng: np.random.Generator, N: int, moduli) -> RingPoly:
    return from_ints(ternary_coeffs(rng, N), moduli)


def derive_rng(seed, *labels) -> np.random.Generator:
    """Independent generator for a (seed, label...) path."""
    words = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            words.append(int(lab) & 0xFFFFFFFF)
        else:
            words.extend(str(lab).encode())
    return np.random.default_rng(np.random.SeedSequence(words))
