import math

import numpy as np
import pytest

from mheglm import approx as A
from mheglm import ckks as C
from mheglm import packing as PK
from mheglm.errors import MustBootstrapError, ParameterError


@pytest.fixture(scope="module")
def env():
    params = C.CryptoParams.build(log_n=11, levels=6)
    rng = np.random.default_rng(3)
    sk, pk = C.keygen(params, rng)
    ev = C.Evaluator(params, C.gen_relin_key(params, sk, rng), C.gen_rotation_keys(params, sk, rng))
    return params, sk, pk, ev


def run(env, approach, B, w, alpha=1.0, act=None):
    params, sk, pk, ev = env
    ev.counters.clear()
    pm = PK.prepare(approach, B, alpha, params.n_slots)
    ct = C.encrypt_values(pm.layout.pack(w), pk, params, np.random.default_rng(0))
    u, v = PK.pipeline(ev, pm, ct, act)
    us = u if isinstance(u, list) else [u]
    du = [C.decrypt_values(x, sk, params) for x in us]
    dv = pm.layout.unpack(C.decrypt_values(v, sk, params))
    return pm, du, dv, v


def rba_u(pm, du):
    """Row dot products: slot k*c' of shard s holds u[s*R + k]."""
    lay = pm.layout
    out = []
    for d in du:
        out.extend(d[k * lay.c_pad] for k in range(lay.rows_per_pt))
    return np.array(out)[: lay.b]


def da_u(pm, du):
    return du[0][: pm.layout.b]


def test_plaintext_count_formula():
    pm = PK.prepare_rba(np.ones((4, 4)), 1.0, 8)
    assert pm.n_plaintexts == math.ceil(4 * 4 * 2 / 16)


@pytest.mark.parametrize("approach", ["rba", "da"])
@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (8, 8), (16, 4)])
def test_layout_roundtrip(approach, shape):
    B = np.random.default_rng(sum(shape)).normal(size=shape)
    assert np.array_equal(PK.prepare(approach, B, 0.5, 1024).unpack(), B)


def test_single_element():
    pm = PK.prepare_rba(np.array([[2.0]]), 1.0, 1024)
    assert pm.n_plaintexts == 1 and pm.fwd[0][0] == 2.0 and np.count_nonzero(pm.fwd[0]) == 1


@pytest.mark.parametrize("approach", ["rba", "da"])
def test_identity_matrix(env, approach):
    w = np.random.default_rng(1).uniform(-1, 1, 4)
    pm, du, dv, _ = run(env, approach, np.eye(4), w)
    u = rba_u(pm, du) if approach == "rba" else da_u(pm, du)
    assert np.abs(u - w).max() < 1e-5 and np.abs(dv - w).max() < 1e-5


@pytest.mark.parametrize("approach", ["rba", "da"])
def test_zero_weights_sigmoid(env, approach):
    params, _, _, ev = env
    spec = A.fit_sigmoid((-8, 8), 3)
    B = np.random.default_rng(2).uniform(-1, 1, (8, 8))
    act = lambda e, x: A.af_eval(e, x, spec)
    _, _, dv, _ = run(env, approach, B, np.zeros(8), 0.1, act)
    _, ref = PK.matvec_clear(B, np.zeros(8), 0.1, spec)
    assert np.abs(dv - ref).max() < 1e-3


@pytest.mark.parametrize("approach", ["rba", "da"])
def test_random_logistic(env, approach):
    spec = A.fit_sigmoid((-8, 8), 3)
    rng = np.random.default_rng(4)
    B = rng.uniform(-1, 1, (8, 8))
    w = rng.uniform(-1, 1, 8)
    pm, du, dv, v = run(env, approach, B, w, 0.25, lambda e, x: A.af_eval(e, x, spec))
    u_ref, v_ref = PK.matvec_clear(B, w, 0.25, spec)
    assert np.abs(dv - v_ref).max() < 1e-3
    assert env[0].L - v.level == PK.make_plan(approach, 8, 8, env[0].n_slots).depth + spec.depth


def test_da_rba_agree_rectangular(env):
    rng = np.random.default_rng(5)
    B = rng.uniform(-1, 1, (16, 32))
    w = rng.uniform(-1, 1, 32)
    _, _, v_rba, _ = run(env, "rba", B, w)
    _, _, v_da, _ = run(env, "da", B, w)
    _, ref = PK.matvec_clear(B, w, 1.0)
    assert np.abs(v_rba - ref).max() < 1e-3 and np.abs(v_da - ref).max() < 1e-3


def test_da_rotation_count(env):
    run(env, "da", np.ones((4, 4)), np.ones(4))
    plan = PK.make_plan("da", 4, 4, env[0].n_slots)
    assert (plan.N1, plan.N2) == (2, 2)
    assert env[3].counters["rotate"] == 4 == plan.rotations


def test_rba_sharding(env):
    """More rows than fit one plaintext: several shards, same result."""
    params = env[0]
    c = params.n_slots // 4
    B = np.random.default_rng(6).uniform(-1, 1, (8, c)) / 8
    w = np.random.default_rng(7).uniform(-1, 1, c)
    pm, du, dv, _ = run(env, "rba", B, w)
    assert pm.layout.n_pt == 2
    u_ref, v_ref = PK.matvec_clear(B, w, 1.0)
    assert np.abs(rba_u(pm, du) - u_ref).max() < 1e-3
    assert np.abs(dv - v_ref).max() < 1e-3
    assert env[3].counters["rotate"] == PK.make_plan("rba", 8, c, params.n_slots).rotations


def test_insufficient_level(env):
    params, sk, pk, ev = env
    pm = PK.prepare("da", np.eye(4), 1.0, params.n_slots)
    ct = C.encrypt_values(pm.layout.pack(np.ones(4)), pk, params, np.random.default_rng(0), level=0)
    with pytest.raises(MustBootstrapError):
        PK.pipeline(ev, pm, ct)


def test_capacity_errors():
    with pytest.raises(ParameterError):
        PK.Layout("da", 4, 4096, 2048)
    with pytest.raises(ParameterError):
        PK.Layout("rba", 4, 4096, 2048)


def test_choose_approach():
    assert PK.choose_approach(4, 4, threads=1) == "rba"
    assert all(PK.choose_approach(c, 8, threads=1) == "rba" for c in range(1, 64))
    assert PK.choose_approach(256, 256, threads=24, n_slots=8192) == "da"


def test_encrypted_data_mode(env):
    params, sk, pk, ev = env
    rng = np.random.default_rng(8)
    B = rng.uniform(-1, 1, (4, 4))
    w = rng.uniform(-1, 1, 4)
    pm = PK.prepare("da", B, 0.5, params.n_slots).encrypt(pk, params, rng)
    ct = C.encrypt_values(pm.layout.pack(w), pk, params, rng)
    _, v = PK.pipeline(ev, pm, ct)
    assert np.abs(pm.layout.unpack(C.decrypt_values(v, sk, params)) - 0.5 * B.T @ B @ w).max() < 1e-3
