import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mheglm import ring as R
from mheglm.errors import ParameterError, UsageError

N16 = 16
Q16 = tuple(R.ntt_primes(N16, 2, 1 << 40))


def schoolbook(a, b, q):
    """Negacyclic convolution in Z_q[X]/(X^N + 1), Python ints."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            if k < n:
                out[k] += int(a[i]) * int(b[j])
            else:
                out[k - n] -= int(a[i]) * int(b[j])
    return [x % q for x in out]


def rand_poly(rng, N, moduli):
    return R.sample_uniform(rng, N, moduli)


def test_primes_support_ntt():
    for q in R.ntt_primes(1 << 12, 4, 1 << 40):
        assert R.is_ntt_prime(q, 1 << 12)
        w = R.root_of_unity(q, 1 << 12)
        assert pow(w, 1 << 13, q) == 1 and pow(w, 1 << 12, q) == q - 1


def test_bad_modulus_rejected():
    with pytest.raises(ParameterError):
        R.RingParams(N=1024, moduli=(1 << 40 | 1,))
    with pytest.raises(ParameterError):
        R.RingParams(N=1000, moduli=tuple(R.ntt_primes(1024, 1, 1 << 40)))


def test_constant_transforms_to_constant():
    p = R.from_ints(np.array([5] + [0] * (N16 - 1)), Q16)
    assert (R.ntt_forward(p).data == 5).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ntt_roundtrip(seed):
    p = rand_poly(np.random.default_rng(seed), 1024, tuple(R.ntt_primes(1024, 3, 1 << 45)))
    assert R.ntt_inverse(R.ntt_forward(p)) == p


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mul_matches_schoolbook(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_poly(rng, N16, Q16), rand_poly(rng, N16, Q16)
    got = R.ntt_inverse(R.poly_mul(R.ntt_forward(a), R.ntt_forward(b)))
    for i, q in enumerate(Q16):
        assert got.data[i].tolist() == schoolbook(a.data[i], b.data[i], q)


def test_negacyclic_wrap():
    x = np.zeros(N16, dtype=np.int64)
    x[1] = 1
    top = np.zeros(N16, dtype=np.int64)
    top[-1] = 1
    prod = R.ntt_inverse(R.poly_mul(R.ntt_forward(R.from_ints(top, Q16)), R.ntt_forward(R.from_ints(x, Q16))))
    assert R.to_centered_ints(prod).tolist() == [-1] + [0] * (N16 - 1)


def test_add_zero_and_level_mismatch(rng):
    m = tuple(R.ntt_primes(1024, 3, 1 << 40))
    a = rand_poly(rng, 1024, m)
    assert R.poly_add(a, R.zero(1024, m)) == a
    with pytest.raises(UsageError):
        R.poly_add(a, R.drop_level(a, 1))
    with pytest.raises(UsageError):
        R.drop_level(R.drop_level(a, 0), 2)


def test_mul_domains(rng):
    a, b = rand_poly(rng, N16, Q16), rand_poly(rng, N16, Q16)
    coeff = R.poly_mul(a, b)
    assert coeff == R.ntt_inverse(R.poly_mul(R.ntt_forward(a), R.ntt_forward(b)))
    with pytest.raises(UsageError):
        R.poly_mul(a, R.ntt_forward(b))
    with pytest.raises(UsageError):
        R.ntt_inverse(a)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-(2**60), 2**60), min_size=1024, max_size=1024))
def test_crt_roundtrip(vals):
    m = tuple(R.ntt_primes(1024, 3, 1 << 45))
    p = R.from_ints(np.array(vals, dtype=object), m)
    assert R.to_centered_ints(p).tolist() == vals


def test_automorphism_commutes_with_ntt(rng):
    m = tuple(R.ntt_primes(1024, 2, 1 << 40))
    a = rand_poly(rng, 1024, m)
    for g in (5, 25, 2 * 1024 - 1):
        direct = R.automorphism(a, g)
        via = R.ntt_inverse(R.automorphism(R.ntt_forward(a), g))
        assert direct == via


def test_gaussian_std():
    e = R.gaussian_coeffs(np.random.default_rng(0), 1 << 16, 3.2)
    assert abs(e.std() - 3.2) < 0.32
    assert np.abs(e).max() <= 6 * 3.2


def test_ternary_values():
    t = R.ternary_coeffs(np.random.default_rng(1), 4096)
    assert set(np.unique(t).tolist()) <= {-1, 0, 1}


def test_uniform_chi_square():
    q = R.ntt_primes(1 << 12, 1, 1 << 40)[0]
    x = R.uniform_residues(np.random.default_rng(2), 1 << 12, (q,))[0]
    counts = np.bincount((x.astype(np.float64) / q * 16).astype(int), minlength=16)
    chi2 = ((counts - 256) ** 2 / 256).sum()
    assert chi2 < 37.7          # 99.9% quantile, 15 dof


def test_derive_rng_is_deterministic():
    a = R.derive_rng(3, "x", 1).integers(0, 1 << 30, 4)
    b = R.derive_rng(3, "x", 1).integers(0, 1 << 30, 4)
    c = R.derive_rng(3, "x", 2).integers(0, 1 << 30, 4)
    assert (a == b).all() and not (a == c).all()
