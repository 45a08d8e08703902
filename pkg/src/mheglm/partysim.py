"""In-process multi-party harness: tree topologies, FIFO transport, traffic counters.

Every value that crosses a party boundary is serialized into an Envelope and
pushed through the transport, so byte counts are real payload sizes.
"""
from __future__ import annotations

import contextlib
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ProtocolAbort, UsageError


@dataclass(frozen=True)
class Topology:
    """Rooted tree over party ids; `parent[root]` is None."""

    parent: tuple[tuple[int, int | None], ...]

    def __post_init__(self):
        par = dict(self.parent)
        roots = [p for p, q in par.items() if q is None]
        if len(roots) != 1:
            raise UsageError("topology must have exactly one root")
        for p, q in par.items():
            if q is not None and q not in par:
                raise UsageError(f"party {p} has unknown parent {q}")
        for p in par:  # acyclic and connected: every walk reaches the root
            seen = set()
            while par[p] is not None:
                if p in seen:
                    raise UsageError("topology contains a cycle")
                seen.add(p)
                p = par[p]

    @classmethod
    def from_parents(cls, parents: dict[int, int | None]) -> "Topology":
        return cls(tuple(sorted(parents.items())))

    @classmethod
    def star(cls, n: int, root: int = 0) -> "Topology":
        return cls.from_parents({i: (None if i == root else root) for i in range(n)})

    @classmethod
    def chain(cls, n: int) -> "Topology":
        return cls.from_parents({i: (None if i == 0 else i - 1) for i in range(n)})

    @classmethod
    def binary(cls, n: int) -> "Topology":
        return cls.from_parents({i: (None if i == 0 else (i - 1) // 2) for i in range(n)})

    @classmethod
    def make(cls, kind: str, n: int) -> "Topology":
        try:
            return {"star": cls.star, "chain": cls.chain, "binary": cls.binary}[kind](n)
        except KeyError:
            raise UsageError(f"unknown topology {kind!r}") from None

    @property
    def parents(self) -> dict[int, int | None]:
        return dict(self.parent)

    @property
    def parties(self) -> list[int]:
        return sorted(self.parents)

    @property
    def root(self) -> int:
        return next(p for p, q in self.parent if q is None)

    def children(self, pid: int) -> list[int]:
        return sorted(p for p, q in self.parent if q == pid)

    def edges(self) -> list[tuple[int, int]]:
        return [(p, q) for p, q in self.parent if q is not None]

    def rooted_at(self, new_root: int) -> "Topology":
        """Same undirected tree, re-oriented towards `new_root`."""
        if new_root == self.root:
            return self
        adj = defaultdict(list)
        for a, b in self.edges():
            adj[a].append(b)
            adj[b].append(a)
        par = {new_root: None}
        todo = deque([new_root])
        while todo:
            x = todo.popleft()
            for y in sorted(adj[x]):
                if y not in par:
                    par[y] = x
                    todo.append(y)
        return Topology.from_parents(par)

    def post_order(self) -> list[int]:
        out = []

        def walk(p):
            for c in self.children(p):
                walk(c)
            out.append(p)

        walk(self.root)
        return out

    def pre_order(self) -> list[int]:
        out = []
        stack = [self.root]
        while stack:
            p = stack.pop()
            out.append(p)
            stack.extend(reversed(self.children(p)))
        return out


@dataclass(frozen=True)
class Envelope:
    sender: int
    receiver: int
    protocol: str
    round: int
    payload: bytes = field(repr=False)
    size: int = 0
    session: Any = None

    @classmethod
    def make(cls, sender, receiver, protocol, rnd, payload: bytes, session=None) -> "Envelope":
        return cls(sender, receiver, protocol, rnd, payload, len(payload), session)


class InProcessTransport:
    """Per ordered pair FIFO queues; thread-safe."""

    def __init__(self):
        self._queues: dict[tuple[int, int], deque] = defaultdict(deque)
        self._lock = threading.Lock()

    def send(self, env: Envelope):
        with self._lock:
            self._queues[(env.sender, env.receiver)].append(env)

    def recv(self, sender: int, receiver: int) -> Envelope:
        with self._lock:
            q = self._queues.get((sender, receiver))
            if not q:
                raise ProtocolAbort(f"no message from {sender} to {receiver}")
            return q.popleft()

    def pending(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())


@dataclass
class TrafficReport:
    messages: dict[str, int]
    bytes: dict[str, int]
    by_round: dict[tuple, int]     # (session, protocol, round) -> messages
    by_session: dict[tuple, int]   # (session, protocol) -> messages

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())

    def as_dict(self) -> dict:
        return {"messages": dict(self.messages), "bytes": dict(self.bytes),
                "total_messages": self.total_messages, "total_bytes": self.total_bytes}


class Network:
    """Party-to-party messaging over a topology with counters and a transcript."""

    def __init__(self, topology: Topology, transport=None, seed: int = 0,
                 randomized: bool = False):
        self.topology = topology
        self.transport = transport or InProcessTransport()
        self.randomized = randomized
        self._rng = np.random.default_rng(seed)
        self.offline: set[int] = set()
        self.external: set[int] = set()
        self.session: Any = None
        self.transcript: list[str] = []
        self._msgs = defaultdict(int)
        self._bytes = defaultdict(int)
        self._by_round = defaultdict(int)
        self._by_session = defaultdict(int)
        self._lock = threading.Lock()

    @property
    def parties(self) -> list[int]:
        return self.topology.parties

    # --- lifecycle
    def drop(self, pid: int):
        self.offline.add(pid)

    def add_external(self, pid: int):
        """Register an endpoint outside the tree (e.g. a querier)."""
        self.external.add(pid)

    def restore(self, pid: int):
        self.offline.discard(pid)

    @contextlib.contextmanager
    def in_session(self, label):
        prev = self.session
        self.session = label
        try:
            yield self
        finally:
            self.session = prev

    # --- messaging
    def deliver(self, env: Envelope):
        for p in (env.sender, env.receiver):
            if p in self.offline or (p not in self.topology.parents and p not in self.external):
                raise ProtocolAbort(f"party {p} unreachable", phase=f"{env.protocol}/{env.round}")
        if env.size != len(env.payload):
            raise UsageError("envelope size does not match payload")
        self.transport.send(env)
        with self._lock:
            self._msgs[env.protocol] += 1
            self._bytes[env.protocol] += env.size
            self._by_round[(env.session, env.protocol, env.round)] += 1
            self._by_session[(env.session, env.protocol)] += 1
            self.transcript.append(
                f"{env.session}\t{env.sender}\t{env.receiver}\t{env.protocol}\t{env.round}\t{env.size}")

    def send(self, sender: int, receiver: int, protocol: str, rnd: int, payload: bytes) -> Envelope:
        env = Envelope.make(sender, receiver, protocol, rnd, payload, self.session)
        self.deliver(env)
        return env

    def recv(self, sender: int, receiver: int) -> Envelope:
        return self.transport.recv(sender, receiver)

    def exchange(self, sender, receiver, protocol, rnd, value, encode, decode):
        """Serialize, deliver and decode one value (the receiver's view)."""
        self.send(sender, receiver, protocol, rnd, encode(value))
        return decode(self.recv(sender, receiver).payload)

    # --- scheduling
    def order(self, pids) -> list[int]:
        pids = list(pids)
        if self.randomized:
            self._rng.shuffle(pids)
        return pids

    def run_round(self, protocol: str, step: Callable[[int], Any], parties=None) -> dict[int, Any]:
        """Run `step(pid)` for every party in scheduler order."""
        parties = self.parties if parties is None else parties
        out = {}
        for pid in self.order(parties):
            if pid in self.offline:
                raise ProtocolAbort(f"party {pid} offline", phase=protocol)
            out[pid] = step(pid)
        return {p: out[p] for p in sorted(out)}

    # --- tree collectives
    def gather(self, values: dict[int, Any], combine, encode, decode, protocol: str,
               rnd: int = 0, root: int | None = None):
        """Aggregate values up the tree (one message per edge); result at the root."""
        topo = self.topology if root is None else self.topology.rooted_at(root)
        for p in topo.parties:
            if p not in values:
                raise ProtocolAbort(f"missing input from party {p}", phase=protocol)
        partial = {}
        for p in topo.post_order():
            acc = values[p]
            for c in topo.children(p):
                acc = combine(acc, partial.pop(c))
            par = topo.parents[p]
            if par is None:
                return acc
            partial[p] = self.exchange(p, par, protocol, rnd, acc, encode, decode)
        raise ProtocolAbort("empty topology", phase=protocol)

    def scatter(self, value, encode, decode, protocol: str, rnd: int = 0,
                root: int | None = None) -> dict[int, Any]:
        """Send a value down the tree from the root; every party gets a copy."""
        topo = self.topology if root is None else self.topology.rooted_at(root)
        got = {topo.root: value}
        for p in topo.pre_order():
            for c in topo.children(p):
                got[c] = self.exchange(p, c, protocol, rnd, got[p], encode, decode)
        return got

    # --- reporting
    def counters(self) -> TrafficReport:
        with self._lock:
            return TrafficReport(dict(self._msgs), dict(self._bytes),
                                 dict(self._by_round), dict(self._by_session))

    def reset_counters(self):
        with self._lock:
            self._msgs.clear()
            self._bytes.clear()
            self._by_round.clear()
            self._by_session.clear()
            self.transcript.clear()

    def dump_transcript(self, path):
        with open(path, "w") as fh:
            fh.write("session\tsender\treceiver\tprotocol\tround\tbytes\n")
            fh.write("\n".join(self.transcript))
            fh.write("\n")
