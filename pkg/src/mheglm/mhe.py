"""Multiparty layer: collective keys, distributed decryption, key switching and
the interactive (masked) bootstrap.

The collective secret is s = sum_i s_i; no protocol here ever materialises it.
Shares travel up the network tree and are summed on the way, so every
protocol costs one message per tree edge per round.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import ckks as C
from . import ring as R
from .ckks import Ciphertext, CryptoParams, PublicKey, SwitchingKey, RotationKeySet
from .errors import MustBootstrapError, ParameterError, ProtocolAbort
from .partysim import Network
from .ring import RingPoly


@dataclass
class SecretKeyShare:
    party: int
    s: RingPoly             # ternary, evaluation form over Q_L * P


@dataclass
class Member:
    """The cryptographic persona of one party: its share and private randomness."""
    pid: int
    share: SecretKeyShare
    rng: np.random.Generator = field(repr=False)


def new_member(params: CryptoParams, pid: int, seed: int) -> Member:
    rng = R.derive_rng(seed, "party", pid)
    return Member(pid, SecretKeyShare(pid, C.ternary_secret(params, rng)), rng)


def collective_secret(members, params: CryptoParams) -> C.SecretKey:
    """Test-harness oracle: the summed secret. Never used by the protocols."""
    acc = None
    for m in members:
        s = m.share.s if isinstance(m, Member) else m.s
        acc = s if acc is None else R.poly_add(acc, s)
    return C.SecretKey(acc)


class Crs:
    """Common reference string: public uniform polynomials drawn from a shared seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.counter = 0

    def poly(self, params: CryptoParams, moduli, tag: str | None = None) -> RingPoly:
        if tag is None:
            tag = f"auto{self.counter}"
            self.counter += 1
        return C.uniform_ntt(params, R.derive_rng(self.seed, "crs", tag), moduli)


@dataclass(frozen=True)
class MaskSpec:
    lam: int
    delta_bits: int

    @property
    def bits(self) -> int:
        return self.lam + self.delta_bits

    @property
    def bound(self) -> int:
        return 1 << self.bits

    def check(self, n_parties: int, modulus: int):
        if n_parties * self.bound + (1 << self.delta_bits) >= modulus:
            raise ParameterError(
                f"mask bound violated: {n_parties} * 2^{self.bits} + 2^{self.delta_bits}"
                f" >= Q (2^{math.log2(modulus):.1f})")


def mask_spec_for(scale: float, value_bound: float, lam: int) -> MaskSpec:
    """delta covers |coefficient| <= scale * value_bound (one bit of headroom)."""
    return MaskSpec(lam, int(math.ceil(math.log2(scale * value_bound))) + 1)


@dataclass
class CollectiveKeys:
    pk: PublicKey
    rlk: SwitchingKey | None
    rtk: RotationKeySet
    party_fingerprints: dict = field(default_factory=dict)   # pid -> fingerprint of its pk copy

    def fingerprint(self) -> str:
        return pk_fingerprint(self.pk)


def pk_fingerprint(pk: PublicKey) -> str:
    return hashlib.sha256(C.dumps(pk)).hexdigest()[:16]


# ---------------------------------------------------------------------------
# helpers

def _poly_sum(a, b):
    if isinstance(a, RingPoly):
        return R.poly_add(a, b)
    return [R.poly_add(x, y) for x, y in zip(a, b)]


def _enc_polys(v):
    return C.dumps([v] if isinstance(v, RingPoly) else list(v))


def _dec_polys(b):
    out = C.loads(b)
    return out[0] if len(out) == 1 else out


def _by_pid(members) -> dict[int, Member]:
    return {m.pid: m for m in members}


def _check_all(members, net: Network, phase: str) -> dict[int, Member]:
    mem = _by_pid(members)
    for p in net.parties:
        if p not in mem or p in net.offline:
            raise ProtocolAbort(f"share of party {p} unavailable", phase=phase)
    return mem


def _share_at(m: Member, params: CryptoParams, level: int) -> RingPoly:
    return C.secret_at(m.share.s, params, level)


def _smudge(m: Member, params: CryptoParams, moduli) -> RingPoly:
    b = 1 << params.smudge_bits
    e = m.rng.integers(-b, b + 1, size=params.N, dtype=np.int64)
    return R.ntt_forward(R.from_ints(e, moduli))


# ---------------------------------------------------------------------------
# key generation

def dkeygen(params: CryptoParams, members, net: Network, crs: Crs,
            rotations="pow2", relin: bool = True) -> CollectiveKeys:
    """Collective public key, relinearization key and rotation keys."""
    mem = _check_all(members, net, "dkeygen")
    L = params.L
    qm = params.moduli
    km = params.key_moduli()

    # public key: pk = (sum_i -a s_i + e_i, a)
    a = crs.poly(params, qm, "ckg")
    shares = net.run_round("dkeygen", lambda p: R.poly_add(
        R.poly_neg(R.poly_mul(a, _share_at(mem[p], params, L))),
        C.gaussian_ntt(params, mem[p].rng, qm)))
    b = net.gather(shares, _poly_sum, _enc_polys, _dec_polys, "dkeygen", 1)
    pk = PublicKey(b, a)
    pk_copies = net.scatter(pk, C.dumps, C.loads, "dkeygen", 1)

    rlk = _rkg(params, mem, net, crs) if relin else None

    if rotations == "pow2":
        rotations = C.pow2_steps(params.n_slots)
    rtk = RotationKeySet()
    nd = params.n_digits()
    for r in rotations or ():
        g = C.galois_element(r, params.N)
        acrs = [crs.poly(params, km, f"rtg{r}/{j}") for j in range(nd)]

        def share(p, acrs=acrs, g=g):
            s = mem[p].share.s
            sg = R.automorphism(s, g)
            out = []
            for j in range(nd):
                h = R.poly_add(R.poly_neg(R.poly_mul(acrs[j], s)),
                               C.gaussian_ntt(params, mem[p].rng, km))
                out.append(C.gadget_add(h, sg, j, params))
            return out

        bs = net.gather(net.run_round("dkeygen", share), _poly_sum, _enc_polys, _dec_polys,
                        "dkeygen", 3)
        if isinstance(bs, RingPoly):
            bs = [bs]
        rtk.keys[r] = SwitchingKey(list(bs), acrs)
        net.scatter(rtk.keys[r], C.dumps, C.loads, "dkeygen", 3)
    return CollectiveKeys(pk, rlk, rtk, {p: pk_fingerprint(v) for p, v in pk_copies.items()})


def _rkg(params: CryptoParams, mem: dict[int, Member], net: Network, crs: Crs) -> SwitchingKey:
    km = params.key_moduli()
    nd = params.n_digits()
    acrs = [crs.poly(params, km, f"rkg/{j}") for j in range(nd)]
    eph = {}

    def round1(p):
        m = mem[p]
        u = C.ternary_secret(params, m.rng)
        eph[p] = u
        h0, h1 = [], []
        for j in range(nd):
            e0 = C.gaussian_ntt(params, m.rng, km)
            e1 = C.gaussian_ntt(params, m.rng, km)
            t = R.poly_add(R.poly_neg(R.poly_mul(u, acrs[j])), e0)
            h0.append(C.gadget_add(t, m.share.s, j, params))
            h1.append(R.poly_add(R.poly_mul(m.share.s, acrs[j]), e1))
        return h0 + h1

    agg = net.gather(net.run_round("dkeygen", round1), _poly_sum, _enc_polys, _dec_polys, "dkeygen", 2)
    agg = net.scatter(agg, _enc_polys, _dec_polys, "dkeygen", 2)[net.topology.root]
    agg = [agg] if isinstance(agg, RingPoly) else agg
    h0, h1 = agg[:nd], agg[nd:]

    def round2(p):
        m = mem[p]
        s = m.share.s
        us = R.poly_sub(eph.pop(p), s)
        out = []
        for j in range(nd):
            a0 = R.poly_add(R.poly_mul(s, h0[j]), C.gaussian_ntt(params, m.rng, km))
            a1 = R.poly_add(R.poly_mul(us, h1[j]), C.gaussian_ntt(params, m.rng, km))
            out.append(R.poly_add(a0, a1))
        return out

    bs = net.gather(net.run_round("dkeygen", round2), _poly_sum, _enc_polys, _dec_polys, "dkeygen", 2)
    bs = [bs] if isinstance(bs, RingPoly) else list(bs)
    rlk = SwitchingKey(bs, list(h1))
    net.scatter(rlk, C.dumps, C.loads, "dkeygen", 2)
    return rlk


# ---------------------------------------------------------------------------
# decryption and key switching

def _distribute(ct: Ciphertext, net: Network, protocol: str, root: int) -> dict[int, Ciphertext]:
    if ct.size != 2:
        raise ProtocolAbort("distributed protocols expect size-2 ciphertexts", phase=protocol)
    return net.scatter(ct, C.dumps, C.loads, protocol, 1, root=root)


def ddec_plaintext(ct: Ciphertext, members, net: Network, params: CryptoParams,
                   initiator: int | None = None) -> C.Plaintext:
    mem = _check_all(members, net, "ddec")
    root = net.topology.root if initiator is None else initiator
    copies = _distribute(ct, net, "ddec", root)
    lvl = ct.level
    qm = params.level_moduli(lvl)

    def share(p):
        c1 = copies[p].polys[1]
        return R.poly_add(R.poly_mul(_share_at(mem[p], params, lvl), c1), _smudge(mem[p], params, qm))

    h = net.gather(net.run_round("ddec", share), _poly_sum, _enc_polys, _dec_polys, "ddec", 2, root=root)
    return C.Plaintext(R.poly_add(ct.polys[0], h), ct.scale)


def ddec(ct: Ciphertext, members, net: Network, params: CryptoParams,
         initiator: int | None = None) -> np.ndarray:
    return C.decode(ddec_plaintext(ct, members, net, params, initiator), params)


def dkeyswitch(ct: Ciphertext, target_pk: PublicKey, members, net: Network,
               params: CryptoParams, initiator: int | None = None) -> Ciphertext:
    """Re-encrypt under `target_pk` without decrypting."""
    mem = _check_all(members, net, "dkeyswitch")
    root = net.topology.root if initiator is None else initiator
    copies = _distribute(ct, net, "dkeyswitch", root)
    lvl = ct.level
    qm = params.level_moduli(lvl)
    b = R.drop_level(target_pk.b, lvl)
    a = R.drop_level(target_pk.a, lvl)

    def share(p):
        m = mem[p]
        u = R.ntt_forward(R.sample_ternary(m.rng, params.N, qm))
        h0 = R.poly_add(R.poly_mul(_share_at(m, params, lvl), copies[p].polys[1]),
                        R.poly_add(R.poly_mul(u, b), _smudge(m, params, qm)))
        h1 = R.poly_add(R.poly_mul(u, a), C.gaussian_ntt(params, m.rng, qm))
        return [h0, h1]

    h0, h1 = net.gather(net.run_round("dkeyswitch", share), _poly_sum, _enc_polys, _dec_polys,
                        "dkeyswitch", 2, root=root)
    return Ciphertext([R.poly_add(ct.polys[0], h0), h1], ct.scale)


# ---------------------------------------------------------------------------
# distributed bootstrap

def _sample_mask(rng: np.random.Generator, N: int, bits: int) -> np.ndarray:
    """Uniform integers in [0, 2^bits) as a Python-int object array."""
    out = np.zeros(N, dtype=object)
    shift = 0
    while shift < bits:
        w = min(32, bits - shift)
        chunk = rng.integers(0, 1 << w, size=N, dtype=np.int64)
        out = out + (chunk.astype(object) << shift)
        shift += w
    return out


def _residues(vals: np.ndarray, moduli) -> np.ndarray:
    return np.stack([(vals % q).astype(np.int64) for q in moduli])


def dbootstrap(ct: Ciphertext, members, net: Network, params: CryptoParams, crs: Crs,
               value_bound: float = 16.0, mask: MaskSpec | None = None,
               initiator: int | None = None, target_scale: float | None = None,
               audit: list | None = None) -> Ciphertext:
    """Refresh a ciphertext to level L through masked re-encryption.

    Each party contributes h0_i = s_i c1 - M_i + e (mod Q_l) and
    h1_i = -s_i a + r M_i + e (mod Q_L) for a CRS polynomial a and mask M_i;
    r = target_scale / scale moves the value onto the level-L canonical scale.
    """
    mem = _check_all(members, net, "dbootstrap")
    lvl = ct.level
    if lvl < params.tau_b:
        raise MustBootstrapError(f"level {lvl} below bootstrap level {params.tau_b}")
    mask = mask or mask_spec_for(ct.scale, value_bound, params.lam)
    Ql = params.Q(lvl)
    mask.check(len(net.parties), Ql)
    root = net.topology.root if initiator is None else initiator
    L = params.L
    qm_l = params.level_moduli(lvl)
    qm_L = params.moduli
    target_scale = params.scale(L) if target_scale is None else target_scale
    num = int(round(target_scale / ct.scale * 2.0 ** 64))
    half = 1 << 63
    a = crs.poly(params, qm_L)

    copies = _distribute(ct, net, "dbootstrap", root)

    def share(p):
        m = mem[p]
        M = _sample_mask(m.rng, params.N, mask.bits)
        top = max(M) if len(M) else 0
        assert top < mask.bound, "mask coefficient exceeds bound"
        if audit is not None:
            audit.append({"party": p, "max_mask": int(top), "bound": mask.bound})
        Mr = (M * num + half) >> 64
        Ml = R.ntt_forward(RingPoly(_residues(M, qm_l), qm_l))
        ML = R.ntt_forward(RingPoly(_residues(Mr, qm_L), qm_L))
        h0 = R.poly_mul(_share_at(m, params, lvl), copies[p].polys[1])
        h0 = R.poly_add(R.poly_sub(h0, Ml), C.gaussian_ntt(params, m.rng, qm_l))
        h1 = R.poly_neg(R.poly_mul(_share_at(m, params, L), a))
        h1 = R.poly_add(R.poly_add(h1, ML), C.gaussian_ntt(params, m.rng, qm_L))
        return [h0, h1]

    h0, h1 = net.gather(net.run_round("dbootstrap", share), _poly_sum, _enc_polys, _dec_polys,
                        "dbootstrap", 2, root=root)
    # initiator: lift c0 + sum h0 (= m + e - sum M mod Q_l) into (-Q_l + 2^delta, 2^delta]
    x = R.poly_add(ct.polys[0], h0)
    Q, consts = R._crt_consts(qm_l)
    xi = R.ntt_inverse(x)
    acc = np.zeros(params.N, dtype=object)
    for row, c in zip(xi.data, consts):
        acc = acc + row.astype(object) * c
    acc = acc % Q
    lim = 1 << mask.delta_bits
    t = np.where(acc > lim, acc - Q, acc)
    tr = (t * num + half) >> 64
    c0 = R.poly_add(R.ntt_forward(RingPoly(_residues(tr, qm_L), qm_L)), h1)
    return Ciphertext([c0, a], ct.scale * num / 2.0 ** 64)
