"""Run configuration (YAML) and the parameter-graph checks run before anything else."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .. import approx as A
from .. import packing as PK
from ..ckks import CryptoParams
from ..errors import ParameterError
from ..train.params import LearningParams
from ..train.system import activation_kind, required_levels

# Largest log2(Q*P) per ring degree for 128-bit classical security (uniform ternary secrets).
SECURITY_128 = {10: 27, 11: 54, 12: 109, 13: 218, 14: 438, 15: 881}


@dataclass
class CryptoConfig:
    log_n: int = 12
    levels: int = 14
    delta_bits: int = 40
    q0_bits: int = 50
    digit_size: int = 3
    eta: float = 3.2
    tau_b: int = 1
    lam: int = 30                   # statistical security of the bootstrap masks
    smudge_bits: int = 10
    log_q: float | None = None      # declared total modulus size; estimated from the chain if unset
    enforce_security: bool = True   # desk-scale presets turn this off (diagnostic becomes a warning)

    @property
    def n_slots(self) -> int:
        return 1 << (self.log_n - 1)

    def estimated_log_q(self) -> float:
        return self.q0_bits + self.levels * self.delta_bits + self.digit_size * self.q0_bits

    def build(self) -> CryptoParams:
        return CryptoParams.build(log_n=self.log_n, levels=self.levels, delta_bits=self.delta_bits,
                                  q0_bits=self.q0_bits, digit_size=self.digit_size, eta=self.eta,
                                  tau_b=self.tau_b, lam=self.lam, smudge_bits=self.smudge_bits)


@dataclass
class ApproxConfig:
    interval: tuple = (-16.0, 16.0)
    degree: int = 3
    fit: str = "ls"                 # ls | chebyshev
    logit_range: tuple = (-4.0, 4.0)
    spec_file: str | None = None    # a fitted spec written by `mheglm fit`

    def build(self, lp: LearningParams):
        kind = activation_kind(lp)
        if self.spec_file:
            import json
            with open(self.spec_file) as fh:
                d = json.load(fh)
            return A.SoftmaxSpecs.from_dict(d) if "soft_num" in d else A.ApproxSpec.from_dict(d)
        if kind == "logistic":
            if self.fit == "chebyshev":
                return A.fit_chebyshev(A.sigmoid, tuple(self.interval), self.degree, target="sigmoid")
            return A.fit_sigmoid(tuple(self.interval), self.degree)
        if kind == "multinomial":
            return A.fit_softmax(len(lp.classes), tuple(self.logit_range))
        return None


@dataclass
class DataConfig:
    path: str | None = None
    label: str = "label"
    parties: int = 3
    split: str = "even"             # even | proportional
    proportions: tuple = ()
    party_files: tuple = ()         # one CSV per party instead of path + split
    standardize: bool = True
    intercept: bool = True
    kfold: int = 5
    shuffle_seed: int = 0
    n_features: int | None = None   # known width, for validation before loading


@dataclass
class RunConfig:
    crypto: CryptoConfig = field(default_factory=CryptoConfig)
    learning: LearningParams = field(default_factory=LearningParams)
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    data: DataConfig = field(default_factory=DataConfig)
    topology: str = "star"
    seed: int = 0
    output: str = "runs/latest"

    def as_dict(self) -> dict:
        d = {"crypto": asdict(self.crypto), "learning": self.learning.as_dict(),
             "approx": asdict(self.approx), "data": asdict(self.data),
             "topology": self.topology, "seed": self.seed, "output": self.output}
        for k in ("interval", "logit_range"):
            d["approx"][k] = list(d["approx"][k])
        for k in ("proportions", "party_files"):
            d["data"][k] = list(d["data"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown config sections: {sorted(extra)}")
        return cls(crypto=_sub(CryptoConfig, d.get("crypto")),
                   learning=_sub(LearningParams, d.get("learning")),
                   approx=_sub(ApproxConfig, d.get("approx"), tuples=("interval", "logit_range")),
                   data=_sub(DataConfig, d.get("data"), tuples=("proportions", "party_files")),
                   topology=d.get("topology", "star"), seed=int(d.get("seed", 0)),
                   output=d.get("output", "runs/latest"))


def _sub(kind, d, tuples=()):
    d = dict(d or {})
    known = {f.name for f in fields(kind)}
    extra = set(d) - known
    if extra:
        raise ParameterError(f"unknown {kind.__name__} keys: {sorted(extra)}")
    for k in tuples:
        if k in d and d[k] is not None:
            d[k] = tuple(d[k])
    return kind(**d)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.as_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# presets

def preset(name: str) -> RunConfig:
    """SP1/SP2: large 128-bit parameter sets (validation only); DESK: what runs here."""
    name = name.upper()
    if name == "SP1":
        crypto = CryptoConfig(log_n=14, levels=9, delta_bits=34, log_q=438)
        return RunConfig(crypto=crypto, approx=ApproxConfig(interval=(-8.0, 8.0), degree=5))
    if name == "SP2":
        crypto = CryptoConfig(log_n=13, levels=6, delta_bits=30, log_q=218)
        return RunConfig(crypto=crypto, approx=ApproxConfig(interval=(-8.0, 8.0), degree=3))
    if name == "DESK":
        return RunConfig(crypto=CryptoConfig(log_n=12, levels=14, delta_bits=40, enforce_security=False))
    raise ParameterError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# validation

@dataclass
class Diagnostic:
    name: str
    message: str
    fatal: bool = True

    def __str__(self):
        return f"{self.name}: {self.message}"


def _depth_for(cfg: RunConfig, c: int | None) -> tuple[int, str]:
    """(iteration depth, approach) for the configured packing; auto picks the shallower feasible one."""
    lp = cfg.learning
    c = c or 1
    kind = activation_kind(lp)
    if kind == "logistic":
        a_m = A.depth_bound(cfg.approx.degree)
    elif kind == "multinomial":
        a_m = A.activation_depth("multinomial", A.fit_softmax(len(lp.classes), tuple(cfg.approx.logit_range)))
    else:
        a_m = 0
    slots = cfg.crypto.n_slots
    if lp.packing == "auto":
        da_ok = PK.p2(max(lp.batch_size, c)) <= slots
        approach = "da" if da_ok else "rba"
    else:
        approach = lp.packing
    return PK.make_plan(approach, lp.batch_size, c, slots).depth + a_m, approach


def validate_params(cfg: RunConfig, n_features: int | None = None) -> list[Diagnostic]:
    """Check every implementable edge of the parameter graph; return all diagnostics."""
    cc, lp = cfg.crypto, cfg.learning
    out: list[Diagnostic] = []
    c = n_features or cfg.data.n_features
    if cfg.data.intercept and c:
        c += 1

    if cc.log_n not in SECURITY_128:
        out.append(Diagnostic("ring_degree", f"N = 2^{cc.log_n} outside the supported range 2^10..2^15"))
    else:
        log_q = cc.log_q if cc.log_q is not None else cc.estimated_log_q()
        bound = SECURITY_128[cc.log_n]
        if log_q > bound:
            out.append(Diagnostic(
                "security", f"log2 Q = {log_q:g} exceeds {bound} bits allowed for N = 2^{cc.log_n} at 128-bit security",
                fatal=cc.enforce_security))

    if cc.delta_bits >= cc.q0_bits or cc.delta_bits >= 50:
        out.append(Diagnostic("delta_precision",
                              f"scale 2^{cc.delta_bits} must stay below every modulus (q0 has {cc.q0_bits} bits, "
                              f"primes are at most 50 bits)"))
    if cc.levels < 1 or cc.tau_b < 1 or cc.tau_b > cc.levels:
        out.append(Diagnostic("levels", f"need 1 <= tau_b <= L (tau_b = {cc.tau_b}, L = {cc.levels})"))

    if c is not None:
        if PK.p2(c) > cc.n_slots:
            out.append(Diagnostic("slots", f"P2(c) = {PK.p2(c)} exceeds N/2 = {cc.n_slots} slots"))
        if lp.packing == "da" and PK.p2(max(c, lp.batch_size)) > cc.n_slots:
            out.append(Diagnostic("slots", f"diagonal packing needs P2(max(b, c)) <= {cc.n_slots}"))

    try:
        depth, approach = _depth_for(cfg, c)
        need = required_levels(lp.strategy, depth, lp.local_iters, cc.tau_b)
        if cc.levels < need:
            out.append(Diagnostic(
                "level_budget", f"{lp.strategy} with {approach} packing and activation degree "
                f"{cfg.approx.degree} needs L >= {need}, have L = {cc.levels}"))
    except ParameterError as e:
        out.append(Diagnostic("level_budget", str(e)))

    min_scale_bits = cc.delta_bits   # canonical scales stay within a bit of delta
    for name, v in (("alpha", lp.alpha), ("alpha*rho", lp.alpha * lp.rho)):
        if v <= 0 and name == "alpha":
            out.append(Diagnostic("learning_rate", "alpha must be positive"))
        elif v > 0 and math.log2(v) + min_scale_bits < 10:
            out.append(Diagnostic("representable", f"{name} = {v:.3g} is lost at scale 2^{cc.delta_bits}"))
    if lp.rho < 0:
        out.append(Diagnostic("learning_rate", "rho must be non-negative"))

    parties = cfg.data.parties if not cfg.data.party_files else len(cfg.data.party_files)
    delta_mask = math.ceil(cc.delta_bits + math.log2(lp.value_bound)) + 1
    q_tau = cc.q0_bits + cc.tau_b * cc.delta_bits
    if math.log2(max(parties, 1)) + cc.lam + delta_mask + 1 >= q_tau:
        out.append(Diagnostic("mask_headroom",
                              f"{parties} parties * 2^{cc.lam + delta_mask} masks do not fit Q at level {cc.tau_b}"))
    return out


def check(cfg: RunConfig, n_features: int | None = None) -> list[Diagnostic]:
    """Raise ParameterError listing every fatal diagnostic; return the non-fatal ones."""
    diags = validate_params(cfg, n_features)
    fatal = [d for d in diags if d.fatal]
    if fatal:
        err = ParameterError("; ".join(str(d) for d in fatal))
        err.diagnostics = fatal
        raise err
    return diags
