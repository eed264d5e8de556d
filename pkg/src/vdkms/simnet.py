"""Deterministic discrete-event simulation of a consortium ledger.

A single event loop drives every replica: messages travel with uniform
latency and independent drops, nodes crash and recover on a schedule, and a
Poisson workload injects transactions through random gateway replicas. All
randomness comes from RNGs derived from ``SimConfig.seed``, so a run is a
pure function of its configuration.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .consensus import QueueFull, Replica, ReplicaConfig
from .credentials import def_gen, issue_credential, schema_gen, vin_check_digit
from .crypto import canonical, keygen
from .errors import Rejected, ValidationError
from .identity import create_identity, did_from_key, keypair_for, primary_did, register_did
from .ledger import Block, make_genesis, snapshot
from .txn import Transaction
from .wallet import Wallet

DID_REG = "did_reg"
SCHEMA_DEF = "schema_def"
CRED_REG = "cred_reg"
TXN_CLASSES = (DID_REG, SCHEMA_DEF, CRED_REG)
CSV_COLUMNS = ("bucket_start_s", "txn_class", "committed_count", "latency_ms_p50", "latency_ms_p95", "live_nodes")
EPOCH = 1_700_000_000
ATTRIBUTES = ("VIN", "make", "model", "owner")


@dataclass
class SimConfig:
    seed: int = 0
    duration_s: int = 60
    nodes: int = 4
    batch_size: int = 1000
    batch_interval_ms: int = 500
    view_timeout_ms: int = 2000
    vehicles: int = 20
    providers: int = 2
    registrars: int = 1
    txn_mix: tuple[float, float, float] = (0.5, 0.1, 0.4)
    rate_per_s: float = 5.0
    latency_ms: tuple[int, int] = (5, 50)
    drop_rate: float = 0.0
    crash_schedule: list[tuple[str, float, float]] = field(default_factory=list)
    metrics_bucket_s: int = 10
    warmup_s: float = 5.0
    tick_ms: int = 100
    client_timeout_s: float = 5.0

    def __post_init__(self):
        self.txn_mix = tuple(float(w) for w in self.txn_mix)
        self.latency_ms = tuple(int(x) for x in self.latency_ms)
        self.crash_schedule = [(str(n), float(a), float(b)) for n, a, b in self.crash_schedule]
        self.validate()

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(f"n{i}" for i in range(self.nodes))

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.nodes < 4 or (self.nodes - 1) % 3:
            raise ValidationError("nodes must be 3f+1 with f >= 1")
        if self.duration_s <= 0 or self.metrics_bucket_s <= 0 or self.tick_ms <= 0:
            raise ValidationError("duration, bucket width and tick must be positive")
        if len(self.txn_mix) != 3 or any(w < 0 for w in self.txn_mix) or not math.isclose(sum(self.txn_mix), 1.0):
            raise ValidationError("txn_mix must be three non-negative weights summing to 1")
        lo, hi = self.latency_ms
        if not 0 <= lo <= hi:
            raise ValidationError("latency range must satisfy 0 <= min <= max")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValidationError("drop_rate must lie in [0, 1]")
        if self.rate_per_s < 0 or self.warmup_s < 0 or self.client_timeout_s <= 0:
            raise ValidationError("rates and timeouts must be non-negative")
        if self.registrars < 1 or self.vehicles < 1 or self.providers < 0:
            raise ValidationError("need at least one registrar and one vehicle")
        for nid, down, up in self.crash_schedule:
            if nid not in self.node_ids:
                raise ValidationError(f"unknown node {nid} in crash schedule")
            if not 0 <= down < up <= self.duration_s:
                raise ValidationError(f"crash window for {nid} must lie within the run")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["txn_mix"] = list(self.txn_mix)
        d["latency_ms"] = list(self.latency_ms)
        d["crash_schedule"] = [list(c) for c in self.crash_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def paper_interruption(crash: int, *, nodes: int = 7, seed: int = 42, duration_s: int = 600) -> SimConfig:
    """600 s run with ``crash`` nodes down between 40% and 60% of the run.

    The highest-numbered nodes crash so the view-0 primary stays up.
    """
    if not 0 <= crash < nodes:
        raise ValidationError("crash count must be below the node count")
    down, up = 0.4 * duration_s, 0.6 * duration_s
    schedule = [(f"n{i}", down, up) for i in range(nodes - crash, nodes)]
    return SimConfig(seed=seed, duration_s=duration_s, nodes=nodes, crash_schedule=schedule)


# -- events --------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    at: int  # simulated ms since the start of the run
    kind: str  # deliver | timer | crash | recover | inject_txn | client_retry
    target: str = ""
    payload: Any = None


class EventQueue:
    """Priority queue ordered by (time, insertion sequence)."""

    def __init__(self):
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0

    def push(self, event: Event) -> None:
        heapq.heappush(self._heap, (event.at, self._seq, event))
        self._seq += 1

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[2]

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


# -- workload ------------------------------------------------------------------


def workload(config: SimConfig, rng: random.Random) -> Iterator[Event]:
    """Poisson arrivals after the warm-up; each carries a class drawn from the mix."""
    if config.rate_per_s <= 0:
        return
    t = config.warmup_s
    i = 0
    while True:
        t += rng.expovariate(config.rate_per_s)
        if t >= config.duration_s:
            return
        cls = rng.choices(TXN_CLASSES, weights=config.txn_mix)[0]
        yield Event(int(t * 1000), "inject_txn", cls, i)
        i += 1


def vin_for(index: int, rng: random.Random) -> str:
    """A valid VIN unique to ``index``."""
    body = f"{rng.randrange(10**8):08d}{index:09d}"[-17:]
    body = body[:8] + "0" + body[9:]
    return body[:8] + vin_check_digit(body) + body[9:]


class TxnFactory:
    """Builds the signed transactions injected for each workload class."""

    def __init__(self, config: SimConfig, rng: random.Random):
        self.rng = rng
        self.registrars = []
        for _ in range(config.registrars):
            w = Wallet("sim", rng=rng, log2_n=2)
            create_identity(w, rng=rng)
            w.put("vin_tag_key", bytes(rng.getrandbits(8) for _ in range(32)).hex())
            self.registrars.append(w)
        self.vehicles = [keygen(rng=rng) for _ in range(config.vehicles)]
        self.providers = [keygen(rng=rng) for _ in range(config.providers)]
        self.cred_defs = {}
        self._serial = 0

    def registrar_entries(self) -> list[tuple[str, bytes]]:
        return [(str(primary_did(w)), keypair_for(w, primary_did(w)).public_key) for w in self.registrars]

    def bootstrap(self, timestamp: int) -> list[Transaction]:
        """Schema and definition per registrar, then every holder's DID."""
        out = []
        for w in self.registrars:
            schema, st = schema_gen(w, "VINCredential", "1.0", ATTRIBUTES, timestamp=timestamp, rng=self.rng)
            cdef, dt = def_gen(w, schema, timestamp=timestamp, rng=self.rng)
            self.cred_defs[id(w)] = cdef
            out += [st, dt]
        for pair in self.vehicles + self.providers:
            out.append(register_did(pair, timestamp=timestamp, rng=self.rng))
        return out

    def make(self, cls: str, timestamp: int, view) -> Transaction:
        self._serial += 1
        if cls == DID_REG:
            return register_did(keygen(rng=self.rng), timestamp=timestamp, rng=self.rng)
        w = self.rng.choice(self.registrars)
        if cls == SCHEMA_DEF:
            return schema_gen(w, f"Schema{self._serial}", "1.0", ATTRIBUTES, timestamp=timestamp, rng=self.rng)[1]
        if cls == CRED_REG:
            pair = self.rng.choice(self.vehicles)
            attrs = {"VIN": vin_for(self._serial, self.rng), "make": "Make", "model": "Model", "owner": "Owner"}
            return issue_credential(
                w, self.cred_defs[id(w)], did_from_key(pair.public_key), pair.public_key, attrs,
                view=view, timestamp=timestamp, rng=self.rng,
            )[1]
        raise ValidationError(f"unknown transaction class {cls}")


# -- results -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsSample:
    bucket_start_s: int
    txn_class: str
    committed_count: int
    latency_ms_p50: int | None
    latency_ms_p95: int | None
    live_nodes: int


@dataclass
class Outcome:
    txn_class: str
    injected_ms: int
    status: str = "in-flight"  # committed | rejected | in-flight
    reason: str | None = None
    done_ms: int | None = None


@dataclass
class SimResult:
    config: SimConfig
    metrics: list[MetricsSample]
    chains: dict[str, list[Block]]
    outcomes: dict[str, Outcome]
    trace_digest: str
    messages_sent: int = 0
    messages_dropped: int = 0

    def tally(self) -> Counter:
        return Counter(o.status for o in self.outcomes.values())

    def chain_bytes(self) -> dict[str, list[bytes]]:
        return {nid: [canonical(b.to_dict()) for b in blocks] for nid, blocks in self.chains.items()}


def chains_consistent(chains: dict[str, list[Block]]) -> bool:
    """True when every pair of chains agrees byte-for-byte on their common prefix."""
    encoded = [[canonical(b.to_dict()) for b in c] for c in chains.values()]
    longest = max(encoded, key=len, default=[])
    return all(c == longest[: len(c)] for c in encoded)


def percentile(values: list[int], p: float) -> int | None:
    """Nearest-rank percentile."""
    if not values:
        return None
    ordered = sorted(values)
    return ordered[max(0, math.ceil(p / 100 * len(ordered)) - 1)]


def live_nodes(config: SimConfig, start_s: float, end_s: float) -> int:
    """Nodes up for the whole of [start_s, end_s)."""
    down = {nid for nid, a, b in config.crash_schedule if a < end_s and b > start_s}
    return config.nodes - len(down)


def build_metrics(config: SimConfig, outcomes: dict[str, Outcome]) -> list[MetricsSample]:
    width = config.metrics_bucket_s
    nbuckets = math.ceil(config.duration_s / width)
    latencies: dict[tuple[int, str], list[int]] = {}
    for o in outcomes.values():
        if o.status == "committed" and o.txn_class in TXN_CLASSES:
            b = o.done_ms // (width * 1000)
            latencies.setdefault((b, o.txn_class), []).append(o.done_ms - o.injected_ms)
    out = []
    for b in range(nbuckets):
        start = b * width
        live = live_nodes(config, start, min(start + width, config.duration_s))
        for cls in TXN_CLASSES:
            lat = latencies.get((b, cls), [])
            out.append(MetricsSample(start, cls, len(lat), percentile(lat, 50), percentile(lat, 95), live))
    return out


def export_csv(metrics: list[MetricsSample], path: str | Path) -> Path:
    """One row per (bucket, class); missing latencies are written as empty fields."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in metrics:
            w.writerow(
                [
                    m.bucket_start_s,
                    m.txn_class,
                    m.committed_count,
                    "" if m.latency_ms_p50 is None else m.latency_ms_p50,
                    "" if m.latency_ms_p95 is None else m.latency_ms_p95,
                    m.live_nodes,
                ]
            )
    return path


def bucket_throughput(metrics: list[MetricsSample]) -> dict[int, int]:
    """Committed transactions per bucket, summed over classes."""
    out: dict[int, int] = {}
    for m in metrics:
        out[m.bucket_start_s] = out.get(m.bucket_start_s, 0) + m.committed_count
    return out


# -- simulation ----------------------------------------------------------------


class Simulation:
    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.net_rng = random.Random(f"{config.seed}:net")
        self.client_rng = random.Random(f"{config.seed}:client")
        self.factory = TxnFactory(config, random.Random(f"{config.seed}:keys"))
        key_rng = random.Random(f"{config.seed}:nodes")
        ids = config.node_ids
        self.node_keys = {nid: keygen(rng=key_rng) for nid in ids}
        genesis = make_genesis(
            self.factory.registrar_entries(), {k: p.public_key for k, p in self.node_keys.items()}, timestamp=EPOCH
        )
        self.replicas = {
            nid: Replica(
                ReplicaConfig(
                    ids,
                    nid,
                    batch_size=config.batch_size,
                    batch_interval_ms=config.batch_interval_ms,
                    view_timeout_ms=config.view_timeout_ms,
                ),
                self.node_keys[nid],
                genesis,
                on_commit=self._on_commit,
            )
            for nid in ids
        }
        self.f = self.replicas[ids[0]].config.f
        self.down: set[str] = set()
        self.queue = EventQueue()
        self.now = 0
        self.outcomes: dict[str, Outcome] = {}
        self.txns: dict[str, Transaction] = {}
        self._finalized: Counter = Counter()
        self._trace = hashlib.sha256()
        self.sent = 0
        self.dropped = 0

    def _abs_ms(self) -> int:
        return EPOCH * 1000 + self.now

    # -- plumbing --

    def _on_commit(self, replica: Replica, block: Block, state, now: int) -> None:
        results = [(t, None) for t in state.applied] + list(state.rejections)
        for tid, reason in results:
            self._finalized[tid] += 1
            o = self.outcomes.get(tid)
            if o is None or o.status != "in-flight" or self._finalized[tid] < self.f + 1:
                continue
            o.status = "committed" if reason is None else "rejected"
            o.reason = reason
            o.done_ms = self.now

    def _send(self, src: str, out) -> None:
        lo, hi = self.config.latency_ms
        for dest, msg in out:
            targets = [d for d in self.config.node_ids if d != src] if dest is None else [dest]
            for nid in targets:
                self.sent += 1
                if self.config.drop_rate and self.net_rng.random() < self.config.drop_rate:
                    self.dropped += 1
                    continue
                self.queue.push(Event(self.now + self.net_rng.randint(lo, hi), "deliver", nid, msg))

    def _submit(self, nid: str, txn: Transaction) -> None:
        if nid in self.down:
            return
        try:
            self._send(nid, self.replicas[nid].on_client_txn(txn, self._abs_ms()))
        except QueueFull:
            pass

    # -- handlers --

    def _inject(self, ev: Event) -> None:
        cls = ev.target
        ts = EPOCH + self.now // 1000
        gateway = self.client_rng.choice(self.config.node_ids)
        # the client builds its transaction against the gateway's latest snapshot
        view = snapshot(self.replicas[gateway].state)
        try:
            txn = self.factory.make(cls, ts, view)
        except Rejected as exc:
            key = f"client:{ev.payload}"
            self.outcomes[key] = Outcome(cls, self.now, "rejected", exc.reason, self.now)
            return
        self.outcomes[txn.txn_id] = Outcome(cls, self.now)
        self.txns[txn.txn_id] = txn
        self._submit(gateway, txn)
        self.queue.push(Event(self.now + int(self.config.client_timeout_s * 1000), "client_retry", txn.txn_id))

    def _retry(self, ev: Event) -> None:
        o = self.outcomes[ev.target]
        if o.status != "in-flight":
            return
        for nid in self.config.node_ids:
            self._submit(nid, self.txns[ev.target])
        self.queue.push(Event(self.now + int(self.config.client_timeout_s * 1000), "client_retry", ev.target))

    def _handle(self, ev: Event) -> None:
        kind = ev.kind
        if kind == "deliver":
            if ev.target not in self.down:
                self._send(ev.target, self.replicas[ev.target].on_message(ev.payload, self._abs_ms()))
        elif kind == "timer":
            if ev.target not in self.down:
                self._send(ev.target, self.replicas[ev.target].tick(self._abs_ms()))
            self.queue.push(Event(self.now + self.config.tick_ms, "timer", ev.target))
        elif kind == "crash":
            self.down.add(ev.target)
        elif kind == "recover":
            self.down.discard(ev.target)
            self._send(ev.target, self.replicas[ev.target].recover(self._abs_ms()))
        elif kind == "inject_txn":
            self._inject(ev)
        elif kind == "client_retry":
            self._retry(ev)
        else:
            raise ValidationError(f"unknown event kind {kind}")

    def _schedule(self) -> None:
        # crashes and recoveries go first so they precede same-instant timers
        for nid, down, up in sorted(self.config.crash_schedule, key=lambda c: (c[1], c[0])):
            self.queue.push(Event(int(down * 1000), "crash", nid))
            self.queue.push(Event(int(up * 1000), "recover", nid))
        for nid in self.config.node_ids:
            self.queue.push(Event(0, "timer", nid))
        for ev in workload(self.config, random.Random(f"{self.config.seed}:workload")):
            self.queue.push(ev)
        for txn in self.factory.bootstrap(EPOCH):
            self.txns[txn.txn_id] = txn
            self.outcomes[txn.txn_id] = Outcome("bootstrap", 0)
            for nid in self.config.node_ids:
                self._submit(nid, txn)
            self.queue.push(Event(int(self.config.client_timeout_s * 1000), "client_retry", txn.txn_id))

    def run(self) -> SimResult:
        self._schedule()
        end = self.config.duration_s * 1000
        while self.queue.peek_time() is not None and self.queue.peek_time() < end:
            ev = self.queue.pop()
            self.now = ev.at
            self._trace.update(f"{ev.at}|{ev.kind}|{ev.target}\n".encode())
            self._handle(ev)
        self.now = end
        workload_outcomes = {k: o for k, o in self.outcomes.items() if o.txn_class in TXN_CLASSES}
        return SimResult(
            self.config,
            build_metrics(self.config, workload_outcomes),
            {nid: list(r.blocks) for nid, r in self.replicas.items()},
            workload_outcomes,
            self._trace.hexdigest(),
            self.sent,
            self.dropped,
        )


def run(config: SimConfig) -> SimResult:
    """Run one simulation; the result is a pure function of ``config``."""
    return Simulation(config).run()
