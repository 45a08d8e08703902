"""Polynomial approximations of activations and their encrypted evaluation.

Fits are produced in the monomial basis.  Encrypted evaluation uses a
baby-step giant-step split: baby powers u^1..u^(2^k), giant powers
u^(2^(k+1))..u^(2^(w-1)) with 2^w > d and k = w // 2, then
p = u^(2^(w'-1)) * q + r applied recursively until the pieces are short
enough to be linear combinations of baby powers.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from numpy.polynomial import Chebyshev, Polynomial

from .ckks import Ciphertext, Evaluator
from .errors import (FitQualityWarning, MustBootstrapError, ParameterError,
                     UsageError)

MAX_DEGREE = 31


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class ApproxSpec:
    target: str                         # sigmoid | exp | recip | identity | custom
    fit: str                            # least-squares | chebyshev | exact
    interval: tuple[float, float]
    degree: int
    coeffs: tuple[float, ...]           # monomial basis, length degree+1
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        a, g = self.interval
        if not a < g:
            raise ParameterError("empty approximation interval")
        if self.degree < 1:
            raise ParameterError("degree must be >= 1")
        if len(self.coeffs) != self.degree + 1:
            raise ParameterError("need degree+1 coefficients")
        if not all(math.isfinite(c) for c in self.coeffs):
            raise ParameterError("non-finite coefficient")

    def __call__(self, x):
        return horner(self.coeffs, x)

    evaluate = __call__

    @property
    def depth(self) -> int:
        return plan_depth(self.coeffs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval"] = list(self.interval)
        d["coeffs"] = list(self.coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ApproxSpec":
        return cls(target=d["target"], fit=d["fit"], interval=tuple(d["interval"]),
                   degree=int(d["degree"]), coeffs=tuple(float(c) for c in d["coeffs"]),
                   meta=dict(d.get("meta", {})))


def horner(coeffs, x):
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def identity_spec() -> ApproxSpec:
    return ApproxSpec("identity", "exact", (-1.0, 1.0), 1, (0.0, 1.0))


def _finish(target, fit, interval, d, coef, max_coeff, strict) -> ApproxSpec:
    coef = np.zeros(d + 1) if coef is None else coef
    coef = np.pad(np.asarray(coef, dtype=np.float64), (0, max(0, d + 1 - len(coef))))[: d + 1]
    big = float(np.max(np.abs(coef)))
    if big > max_coeff:
        msg = f"ill-conditioned fit: max |coefficient| = {big:.3g}"
        if strict:
            raise ParameterError(msg)
        warnings.warn(msg, FitQualityWarning, stacklevel=3)
    return ApproxSpec(target, fit, (float(interval[0]), float(interval[1])), d,
                      tuple(float(c) for c in coef))


def fit_least_squares(f: Callable, interval, d: int, target: str = "custom",
                      grid: int = 10_000, odd: bool = False, max_coeff: float = 1e6,
                      strict: bool = False) -> ApproxSpec:
    """Least-squares fit on a dense uniform grid.

    With `odd=True` the fit is constrained to f(mid) + odd part around the
    interval midpoint (useful for the sigmoid, whose odd part is exact).
    """
    if not 1 <= d <= MAX_DEGREE:
        raise ParameterError(f"degree must be in [1, {MAX_DEGREE}]")
    a, g = float(interval[0]), float(interval[1])
    x = np.linspace(a, g, grid)
    y = np.asarray(f(x), dtype=np.float64)
    if not odd:
        coef = Polynomial.fit(x, y, d).convert().coef
    else:
        mid, half = (a + g) / 2, (g - a) / 2
        t = (x - mid) / half
        c0 = float(f(np.array([mid]))[0])
        powers = list(range(1, d + 1, 2))
        A = np.stack([t ** k for k in powers], axis=1)
        sol, *_ = np.linalg.lstsq(A, y - c0, rcond=None)
        ct = np.zeros(d + 1)
        ct[0] = c0
        ct[powers] = sol
        coef = Polynomial(ct)(Polynomial([-mid / half, 1 / half])).coef
    return _finish(target, "least-squares", (a, g), d, coef, max_coeff, strict)


def fit_chebyshev(f: Callable, interval, d: int, target: str = "custom",
                  max_coeff: float = 1e6, strict: bool = False) -> ApproxSpec:
    """Chebyshev interpolation converted to the monomial basis."""
    if not 1 <= d <= MAX_DEGREE:
        raise ParameterError(f"degree must be in [1, {MAX_DEGREE}]")
    a, g = float(interval[0]), float(interval[1])
    cheb = Chebyshev.interpolate(lambda x: np.asarray(f(x), dtype=np.float64), d, domain=[a, g])
    coef = cheb.convert(kind=Polynomial).coef
    return _finish(target, "chebyshev", (a, g), d, coef, max_coeff, strict)


def fit_sigmoid(interval=(-8.0, 8.0), d: int = 3, odd: bool = False) -> ApproxSpec:
    return fit_least_squares(sigmoid, interval, d, target="sigmoid", odd=odd)


def max_grid_error(spec: ApproxSpec, f: Callable, grid: int = 10_000) -> float:
    x = np.linspace(*spec.interval, grid)
    return float(np.max(np.abs(spec(x) - f(x))))


# ---------------------------------------------------------------------------
# depth planning

def _pow_depth(e: int) -> int:
    return 0 if e <= 1 else (e - 1).bit_length()


def depth_bound(d: int) -> int:
    """Levels spent by the evaluator for a degree-d polynomial."""
    if d <= 1:
        return 1
    if d <= 7:
        return d.bit_length()       # ceil(log2(d + 1))
    return (d - 1).bit_length() + 1


def _trim(coeffs) -> list[float]:
    c = [float(x) for x in coeffs]
    while len(c) > 1 and c[-1] == 0.0:
        c.pop()
    return c


def _basis_plan(d: int) -> tuple[int, int]:
    w = d.bit_length()          # smallest w with 2^w > d
    return w, w // 2


def _natural(coeffs: list[float], k: int) -> int:
    deg = len(coeffs) - 1
    if deg <= 0:
        return 0
    if deg <= (1 << k):
        return _pow_depth(deg) + 1
    split = 1 << (deg.bit_length() - 1)
    q, r = coeffs[split:], coeffs[:split]
    q, r = _trim(q), _trim(r)
    return max(max(_natural(q, k), _pow_depth(split)) + 1, _natural(r, k))


def plan_depth(coeffs) -> int:
    c = _trim(coeffs)
    d = len(c) - 1
    if d <= 0:
        return 0
    _, k = _basis_plan(d)
    return max(depth_bound(d), _natural(c, k))


# ---------------------------------------------------------------------------
# encrypted evaluation

class _Powers:
    def __init__(self, ev: Evaluator, u: Ciphertext, d: int):
        self.ev = ev
        w, k = _basis_plan(d)
        self.k = k
        self.p = {1: u}
        for e in range(2, (1 << k) + 1):
            self.get(e)
        e = 1 << (k + 1)
        while e <= 1 << (w - 1):
            self.get(e)
            e <<= 1

    def get(self, e: int) -> Ciphertext:
        if e not in self.p:
            hi = 1 << (e.bit_length() - 1)
            if hi == e:
                h = self.get(e // 2)
                self.p[e] = self.ev.mul_rr(h, h)
            else:
                self.p[e] = self.ev.mul_rr(self.get(hi), self.get(e - hi))
        return self.p[e]


def _lincomb(ev: Evaluator, pw: _Powers, coeffs: list[float], level: int):
    """sum_{i>=1} c_i u^i + c_0 on `level` (one rescale)."""
    terms = [(i, c) for i, c in enumerate(coeffs) if i >= 1 and c != 0.0]
    if not terms:
        return ("const", coeffs[0])
    params = ev.params
    target = params.scale(level)
    acc = None
    for i, c in terms:
        x = pw.get(i)
        if x.level <= level:
            raise MustBootstrapError("power basis too low for planned level")
        x = ev.drop_level(x, level + 1)
        pt_scale = target * params.moduli[level + 1] / x.scale
        y = ev.mult_int(x, int(round(c * pt_scale)), pt_scale)
        y.scale = target * params.moduli[level + 1]
        acc = y if acc is None else ev.add(acc, y)
    out = ev.rescale(acc)
    out.scale = target
    if coeffs[0] != 0.0:
        out = ev.add_const(out, coeffs[0])
    return ("ct", out)


def _eval(ev: Evaluator, pw: _Powers, coeffs: list[float], level: int):
    coeffs = _trim(coeffs)
    deg = len(coeffs) - 1
    if deg <= 0:
        return ("const", coeffs[0])
    if deg <= (1 << pw.k):
        return _lincomb(ev, pw, coeffs, level)
    split = 1 << (deg.bit_length() - 1)
    qk, qv = _eval(ev, pw, coeffs[split:], level + 1)
    G = pw.get(split)
    if qk == "const":
        prod = ev.scalar_to_level(G, qv, level) if qv != 0.0 else None
    else:
        if G.level > level + 1:
            G = ev.scalar_to_level(G, 1.0, level + 1)
        prod = ev.mul_rr(G, qv)
    rk, rv = _eval(ev, pw, coeffs[:split], level)
    if prod is None:
        return (rk, rv)
    if rk == "const":
        return ("ct", ev.add_const(prod, rv))
    return ("ct", ev.add(prod, rv))


def af_eval(ev: Evaluator, ct: Ciphertext, spec, target_level: int | None = None) -> Ciphertext:
    """Encrypted p(u) slotwise; consumes exactly `plan_depth` levels unless a lower target is given."""
    coeffs = _trim(spec.coeffs if isinstance(spec, ApproxSpec) else spec)
    deg = len(coeffs) - 1
    if deg <= 0:
        raise UsageError("constant polynomial has no encrypted evaluation")
    need = plan_depth(coeffs)
    if target_level is None:
        target_level = ct.level - need
    if target_level < 0 or ct.level - target_level < need:
        raise MustBootstrapError(f"af_eval needs {need} levels, ciphertext has {ct.level}")
    pw = _Powers(ev, ct, deg)
    kind, val = _eval(ev, pw, coeffs, target_level)
    if kind == "const":  # pragma: no cover - nonconstant polynomial always yields ct
        raise UsageError("degenerate polynomial")
    if val.level > target_level:
        val = ev.scalar_to_level(val, 1.0, target_level)
    return val


# ---------------------------------------------------------------------------
# softmax components

@dataclass
class SoftmaxSpecs:
    """Fitted pieces for the multinomial activation."""
    exp_max: ApproxSpec           # (1/h') e^{x/h}, used by apMax
    recip_max: ApproxSpec         # 1/x, used by apMax
    soft_num: ApproxSpec          # e^x
    soft_den: ApproxSpec          # 1/x
    n_classes: int

    def to_dict(self) -> dict:
        return {"exp_max": self.exp_max.to_dict(), "recip_max": self.recip_max.to_dict(),
                "soft_num": self.soft_num.to_dict(), "soft_den": self.soft_den.to_dict(),
                "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxSpecs":
        return cls(*(ApproxSpec.from_dict(d[k]) for k in ("exp_max", "recip_max", "soft_num", "soft_den")),
                   n_classes=int(d["n_classes"]))


def fit_softmax(n_classes: int, logit_range: tuple[float, float], deg_exp: int = 7,
                deg_recip: int = 7, deg_num: int = 7, deg_den: int = 7,
                h: float | None = None, h_prime: float | None = None) -> SoftmaxSpecs:
    """Fit the four softmax pieces for logits in `logit_range`.

    Intervals follow from the apMax bounds: centered logits stay within
    +-r = span (n-1)/n, the mean exp-weight is at least 1 (Jensen), and
    with h = span/4 the soft max lands between the mean and about span/8
    above the true max, so u - m lies in [-span, span/4] and the
    exponential sum in [1, n e^{span/8}].
    """
    lo, hi = logit_range
    span = float(hi - lo)
    n = n_classes
    r = span * (n - 1) / n
    h = span / 4 if h is None else h
    hp = float(n) if h_prime is None else h_prime
    exp_max = fit_chebyshev(lambda x: np.exp(x / h) / hp, (-r, r), deg_exp, target="exp")
    a2 = n / hp
    g2 = n * math.exp(r / h) / hp
    recip_max = fit_chebyshev(lambda x: 1.0 / x, (0.9 * a2, 1.05 * g2), deg_recip, target="recip")
    soft_num = fit_chebyshev(np.exp, (-span, span / 4), deg_num, target="exp")
    soft_den = fit_chebyshev(lambda x: 1.0 / x, (0.8, 1.1 * n * math.exp(span / 8)), deg_den, target="recip")
    for s in (exp_max, recip_max):
        s.meta.update(h=h, h_prime=hp)
    return SoftmaxSpecs(exp_max, recip_max, soft_num, soft_den, n_classes)


def _sum_aligned(ev: Evaluator, cts):
    acc = cts[0]
    for c in cts[1:]:
        acc = ev.add_aligned(acc, c)
    return acc


def _ensure(ev, ct, need, refresh):
    if ct.level >= need:
        return ct
    if refresh is None:
        raise MustBootstrapError(f"need level {need}, have {ct.level}")
    return refresh(ct)


def ap_max(ev: Evaluator, U: list[Ciphertext], specs: SoftmaxSpecs, refresh=None) -> Ciphertext:
    """Soft column-wise max: mean + sum_l w_l (u_l - mean) / sum_l w_l, w = exp-weights."""
    n = len(U)
    mean = ev.scalar_to_level(_sum_aligned(ev, U), 1.0 / n, min(u.level for u in U) - 1)
    cen = [ev.sub_aligned(u, mean) for u in U]
    cen = [_ensure(ev, c, specs.exp_max.depth + specs.recip_max.depth + 2, refresh) for c in cen]
    wts = [af_eval(ev, c, specs.exp_max) for c in cen]
    o = af_eval(ev, _sum_aligned(ev, wts), specs.recip_max)
    num = _sum_aligned(ev, [ev.mul_rr(w, c) for w, c in zip(wts, cen)])
    return ev.add_aligned(ev.mul_rr(num, o), mean)


def ap_max_clear(U: np.ndarray, specs: SoftmaxSpecs) -> np.ndarray:
    """Cleartext emulation of `ap_max` with the same polynomials."""
    U = np.asarray(U, dtype=np.float64)
    mean = U.mean(axis=0)
    cen = U - mean
    wts = specs.exp_max(cen)
    o = specs.recip_max(wts.sum(axis=0))
    return (wts * cen).sum(axis=0) * o + mean


def softmax_clear(U: np.ndarray, specs: SoftmaxSpecs) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    m = ap_max_clear(U, specs)
    n = specs.soft_num(U - m)
    return n * specs.soft_den(n.sum(axis=0))


def softmax_encrypted(ev: Evaluator, U: list[Ciphertext], specs: SoftmaxSpecs, refresh=None):
    m = ap_max(ev, U, specs, refresh)
    diff = [ev.sub_aligned(u, m) for u in U]
    diff = [_ensure(ev, d, specs.soft_num.depth + specs.soft_den.depth + 1, refresh) for d in diff]
    nums = [af_eval(ev, d, specs.soft_num) for d in diff]
    s = _sum_aligned(ev, nums)
    s = _ensure(ev, s, specs.soft_den.depth + 1, refresh)
    den = af_eval(ev, s, specs.soft_den)
    return [ev.mul_rr(x, den) for x in nums]


def activation(ev: Evaluator, u, kind: str, specs=None, refresh=None):
    """Dispatch: linear -> identity, logistic -> sigmoid polynomial, multinomial -> softmax."""
    if kind == "linear":
        return u
    if kind == "logistic":
        if specs is None:
            raise ParameterError("logistic activation needs a sigmoid spec")
        spec = specs if isinstance(specs, ApproxSpec) else specs["sigmoid"]
        return af_eval(ev, u, spec)
    if kind == "multinomial":
        if not isinstance(specs, SoftmaxSpecs):
            raise ParameterError("multinomial activation needs softmax specs")
        return softmax_encrypted(ev, list(u), specs, refresh)
    raise ParameterError(f"unknown model kind {kind!r}")


def activation_clear(u, kind: str, specs=None):
    if kind == "linear":
        return np.asarray(u, dtype=np.float64)
    if kind == "logistic":
        spec = specs if isinstance(specs, ApproxSpec) else specs["sigmoid"]
        return spec(u)
    if kind == "multinomial":
        return softmax_clear(u, specs)
    raise ParameterError(f"unknown model kind {kind!r}")


def activation_depth(kind: str, specs=None) -> int:
    if kind == "linear":
        return 0
    if kind == "logistic":
        spec = specs if isinstance(specs, ApproxSpec) else specs["sigmoid"]
        return spec.depth
    if kind == "multinomial":
        s = specs
        return (1 + s.exp_max.depth + s.recip_max.depth + 2) + (s.soft_num.depth + s.soft_den.depth + 1)
    raise ParameterError(f"unknown model kind {kind!r}")
