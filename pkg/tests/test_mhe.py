import numpy as np
import pytest

from mheglm import ckks as C
from mheglm import mhe
from mheglm.errors import MustBootstrapError, ParameterError, ProtocolAbort
from mheglm.partysim import Network, Topology

PARAMS = C.CryptoParams.build(log_n=11, levels=3)


def setup(n, seed=0, topo="star", rotations=(1,)):
    net = Network(Topology.make(topo, n), seed=seed)
    members = [mhe.new_member(PARAMS, p, seed) for p in net.parties]
    crs = mhe.Crs(seed)
    keys = mhe.dkeygen(PARAMS, members, net, crs, rotations=list(rotations))
    return net, members, crs, keys


@pytest.fixture(scope="module")
def three():
    return setup(3)


def test_single_party_keygen():
    net, members, _, keys = setup(1)
    sk = mhe.collective_secret(members, PARAMS)
    v = np.linspace(-1, 1, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, np.random.default_rng(0))
    assert np.abs(C.decrypt_values(ct, sk, PARAMS) - v).max() < 2 ** -20
    assert net.counters().total_messages == 0


def test_fingerprints_agree(three):
    keys = three[3]
    assert set(keys.party_fingerprints) == {0, 1, 2}
    assert set(keys.party_fingerprints.values()) == {keys.fingerprint()}


def test_ddec_roundtrip(three):
    net, members, _, keys = three
    v = np.random.default_rng(1).uniform(-4, 4, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, np.random.default_rng(2))
    assert np.abs(mhe.ddec(ct, members, net, PARAMS) - v).max() < 2 ** -18
    zero = C.encrypt_values(np.zeros(4), keys.pk, PARAMS, np.random.default_rng(3))
    assert np.abs(mhe.ddec(zero, members, net, PARAMS)).max() < 2 ** -18


def test_ddec_matches_summed_secret(three):
    net, members, _, keys = three
    v = np.random.default_rng(4).uniform(-1, 1, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, np.random.default_rng(5), level=1)
    oracle = C.decrypt_values(ct, mhe.collective_secret(members, PARAMS), PARAMS)
    assert np.abs(mhe.ddec(ct, members, net, PARAMS, initiator=2) - oracle).max() < 2 ** -20


def test_collective_relin_and_rotation(three):
    net, members, _, keys = three
    ev = C.Evaluator(PARAMS, keys.rlk, keys.rtk)
    sk = mhe.collective_secret(members, PARAMS)
    rng = np.random.default_rng(6)
    a, b = rng.uniform(-1, 1, (2, PARAMS.n_slots))
    ca = C.encrypt_values(a, keys.pk, PARAMS, rng)
    cb = C.encrypt_values(b, keys.pk, PARAMS, rng)
    assert np.abs(C.decrypt_values(ev.mul_rr(ca, cb), sk, PARAMS) - a * b).max() < 1e-5
    assert np.abs(C.decrypt_values(ev.rotate(ca, 1), sk, PARAMS) - np.roll(a, -1)).max() < 1e-5


def test_keyswitch_to_querier(three):
    net, members, _, keys = three
    rng = np.random.default_rng(7)
    v = rng.uniform(-2, 2, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, rng)
    sk_q, pk_q = C.keygen(PARAMS, np.random.default_rng(8))
    out = mhe.dkeyswitch(ct, pk_q, members, net, PARAMS)
    assert np.abs(C.decrypt_values(out, sk_q, PARAMS) - v).max() < 2 ** -18
    # the switched ciphertext is noise under the parties' own key
    wrong = C.decrypt_values(out, mhe.collective_secret(members, PARAMS), PARAMS)
    assert abs(np.corrcoef(wrong, v)[0, 1]) < 0.1
    # pk' = pk keeps the values
    same = mhe.dkeyswitch(ct, keys.pk, members, net, PARAMS)
    assert np.abs(mhe.ddec(same, members, net, PARAMS) - v).max() < 2 ** -18


def test_keyswitch_shares_alone_are_noise(three):
    """A ciphertext with a partial (single-party) switch does not decrypt under sk'."""
    net, members, _, keys = three
    rng = np.random.default_rng(9)
    v = rng.uniform(-2, 2, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, rng)
    sk_q, pk_q = C.keygen(PARAMS, np.random.default_rng(10))
    partial = mhe.dkeyswitch(ct, pk_q, members[:1], Network(Topology.star(1)), PARAMS)
    got = C.decrypt_values(partial, sk_q, PARAMS)
    assert abs(np.corrcoef(got, v)[0, 1]) < 0.1


def test_bootstrap_restores_level(three):
    net, members, crs, keys = three
    rng = np.random.default_rng(11)
    v = rng.uniform(-1, 1, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, rng, level=1)
    audit = []
    out = mhe.dbootstrap(ct, members, net, PARAMS, crs, audit=audit)
    assert out.level == PARAMS.L and out.scale == PARAMS.scale(PARAMS.L)
    assert np.abs(mhe.ddec(out, members, net, PARAMS) - v).max() < 1e-2
    assert len(audit) == 3 and all(a["max_mask"] < a["bound"] for a in audit)
    zero = mhe.dbootstrap(C.encrypt_values(np.zeros(2), keys.pk, PARAMS, rng, level=1),
                          members, net, PARAMS, crs)
    assert np.abs(mhe.ddec(zero, members, net, PARAMS)).max() < 1e-2


def test_bootstrap_errors(three):
    net, members, crs, keys = three
    rng = np.random.default_rng(12)
    ct = C.encrypt_values([1.0], keys.pk, PARAMS, rng, level=0)
    with pytest.raises(MustBootstrapError):
        mhe.dbootstrap(ct, members, net, PARAMS, crs)
    ct = C.encrypt_values([1.0], keys.pk, PARAMS, rng, level=1)
    with pytest.raises(ParameterError):
        mhe.dbootstrap(ct, members, net, PARAMS, crs, mask=mhe.MaskSpec(lam=80, delta_bits=50))


def test_dropout_aborts():
    net = Network(Topology.star(3))
    members = [mhe.new_member(PARAMS, p, 0) for p in net.parties]
    net.drop(1)
    with pytest.raises(ProtocolAbort):
        mhe.dkeygen(PARAMS, members, net, mhe.Crs(0), rotations=None)


def test_missing_share_aborts(three):
    net, members, _, keys = three
    ct = C.encrypt_values([1.0], keys.pk, PARAMS, np.random.default_rng(13))
    with pytest.raises(ProtocolAbort):
        mhe.ddec(ct, members[:2], net, PARAMS)


def test_binary_tree_keygen_matches_oracle():
    net, members, _, keys = setup(5, topo="binary", rotations=())
    v = np.random.default_rng(14).uniform(-1, 1, PARAMS.n_slots)
    ct = C.encrypt_values(v, keys.pk, PARAMS, np.random.default_rng(15))
    assert np.abs(mhe.ddec(ct, members, net, PARAMS) - v).max() < 2 ** -18
