"""PBFT-style ordering of ledger transactions across n = 3f+1 replicas.

Each ``Replica`` is a deterministic state machine. Handlers take the current
time in unix milliseconds and return a list of ``(destination, message)``
pairs; a destination of ``None`` means every other replica. The caller owns
delivery, clocks and crashes.

Sequence numbers are block heights. A leader proposes height h+1 only after
committing h, so at most one proposal per view is in flight.
"""

from __future__ import annotations

import json
import logging
import random
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable

from .crypto import KeyPair, canonical, digest, keygen, sign, verify
from .errors import LedgerUnavailable, NotFoundError, VdkmsError
from .ledger import (
    Block,
    BlockStore,
    ChainError,
    LedgerState,
    LedgerView,
    apply_block,
    build_block,
    genesis_state,
    make_genesis,
    replay,
    snapshot,
)
from .txn import Transaction

log = logging.getLogger(__name__)

PRE_PREPARE = "PRE_PREPARE"
PREPARE = "PREPARE"
COMMIT = "COMMIT"
VIEW_CHANGE = "VIEW_CHANGE"
NEW_VIEW = "NEW_VIEW"
FORWARD = "FORWARD"
BLOCK_REQUEST = "BLOCK_REQUEST"
BLOCK_RESPONSE = "BLOCK_RESPONSE"

MAX_BACKOFF_EXP = 4
CATCHUP_BATCH = 64


class QueueFull(VdkmsError):
    """Backpressure: the replica's pending queue is at capacity."""


@dataclass(frozen=True)
class ReplicaConfig:
    node_ids: tuple[str, ...]
    this_node: str
    batch_size: int = 100
    batch_interval_ms: int = 500
    view_timeout_ms: int = 2000
    catchup_retry_ms: int = 500
    max_pending: int = 50_000

    def __post_init__(self):
        n = len(self.node_ids)
        if n < 4 or (n - 1) % 3:
            raise ValueError(f"need n = 3f+1 >= 4 nodes, got {n}")
        if self.this_node not in self.node_ids:
            raise ValueError(f"{self.this_node} not in node set")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def primary(self, view: int) -> str:
        return self.node_ids[view % self.n]


@dataclass(frozen=True, eq=False)
class ConsensusMessage:
    """One signed protocol message.

    ``digest`` is the block digest for PRE_PREPARE/PREPARE/COMMIT. ``seq`` is
    the height the message refers to (last stable height for VIEW_CHANGE,
    first requested height for BLOCK_REQUEST). Attachments are bound into the
    signature through their digests.
    """

    kind: str
    view: int
    seq: int
    sender: str
    digest: bytes = b""
    block: Block | None = None
    blocks: tuple[Block, ...] = ()
    txn: Transaction | None = None
    proof: tuple["ConsensusMessage", ...] = ()
    signature: bytes = field(default=b"", repr=False)

    def _attachment_digest(self) -> bytes:
        parts = []
        if self.block is not None:
            parts.append(self.block.digest)
        parts.extend(b.digest for b in self.blocks)
        if self.txn is not None:
            parts.append(digest(self.txn.canonical_bytes))
        parts.extend(digest(m.signing_bytes) for m in self.proof)
        return digest(b"".join(parts))

    @cached_property
    def signing_bytes(self) -> bytes:
        return canonical(
            {
                "kind": self.kind,
                "view": self.view,
                "seq": self.seq,
                "sender": self.sender,
                "digest": self.digest,
                "attach": self._attachment_digest(),
            }
        )

    def verify(self, node_keys: dict[str, bytes]) -> bool:
        pk = node_keys.get(self.sender)
        if pk is None or not verify(pk, self.signing_bytes, self.signature):
            return False
        if self.kind == PRE_PREPARE:
            return self.block is not None and self.block.digest == self.digest and self.block.height == self.seq
        if self.kind == FORWARD:
            return self.txn is not None
        return True


def make_message(pair: KeyPair, kind: str, view: int, seq: int, sender: str, **kw) -> ConsensusMessage:
    unsigned = ConsensusMessage(kind, view, seq, sender, **kw)
    return ConsensusMessage(kind, view, seq, sender, **kw, signature=sign(pair.secret_key, unsigned.signing_bytes))


def prepared_certificate_ok(vc: ConsensusMessage, node_keys: dict[str, bytes], quorum: int) -> bool:
    """A VIEW_CHANGE either carries no certificate or a valid one for seq last_stable+1."""
    if not vc.proof:
        return vc.block is None
    if vc.block is None or vc.block.height != vc.seq + 1:
        return False
    first = vc.proof[0]
    senders = set()
    for p in vc.proof:
        if p.kind != PREPARE or (p.view, p.seq, p.digest) != (first.view, first.seq, first.digest):
            return False
        if not p.verify(node_keys):
            return False
        senders.add(p.sender)
    return len(senders) >= quorum and first.seq == vc.block.height and first.digest == vc.block.digest


def choose_reproposals(view_changes: Iterable[ConsensusMessage]) -> tuple[Block, ...]:
    """For each height with a prepared certificate keep the block from the highest view."""
    best: dict[int, tuple[int, Block]] = {}
    for vc in view_changes:
        if vc.block is None:
            continue
        cert_view = vc.proof[0].view
        cur = best.get(vc.block.height)
        if cur is None or cert_view > cur[0] or (cert_view == cur[0] and vc.block.digest < cur[1].digest):
            best[vc.block.height] = (cert_view, vc.block)
    return tuple(best[h][1] for h in sorted(best))


CommitHook = Callable[["Replica", Block, LedgerState, int], None]
Outbound = list[tuple[str | None, ConsensusMessage]]


class Replica:
    """A single PBFT replica holding a full copy of the ledger."""

    def __init__(
        self,
        config: ReplicaConfig,
        keypair: KeyPair,
        genesis: Block,
        *,
        store: BlockStore | None = None,
        on_commit: CommitHook | None = None,
    ):
        self.config = config
        self.id = config.this_node
        self.keypair = keypair
        self.node_keys = {nid: bytes.fromhex(pk) for nid, pk in genesis.genesis["nodes"].items()}
        if set(self.node_keys) != set(config.node_ids):
            raise ValueError("genesis node set does not match config")
        if self.node_keys[self.id] != keypair.public_key:
            raise ValueError("keypair does not match genesis entry")
        self.store = store
        self.on_commit = on_commit
        self.view = 0
        self.pending: dict[str, Transaction] = {}
        self.equivocations = 0
        self.invalid_messages = 0
        # after a crash this replica may have forgotten its own proposals, so it
        # stays silent as primary until it enters a fresh view
        self.may_propose = True
        self._load_chain(genesis)
        self._reset_volatile(0)

    # -- chain -------------------------------------------------------------

    def _load_chain(self, genesis: Block) -> None:
        blocks = self.store.load() if self.store is not None else []
        if not blocks:
            blocks = [genesis]
            if self.store is not None:
                self.store.append(genesis)
        elif blocks[0] != genesis:
            raise ChainError("block store belongs to a different chain")
        self.blocks = blocks
        self.state = replay(blocks) if len(blocks) > 1 else genesis_state(genesis)
        self.committed_ids = {t.txn_id for b in blocks for t in b.txns}

    @property
    def height(self) -> int:
        return self.state.height

    def is_primary(self) -> bool:
        return self.config.primary(self.view) == self.id

    def _reset_volatile(self, now: int) -> None:
        self.view_changing = False
        self.vc_target = self.view
        self.vc_started = now
        self.backoff = 0
        self.last_progress = now
        self.proposals: dict[tuple[int, int], tuple[bytes, Block]] = {}
        self.validated: dict[bytes, LedgerState] = {}
        self.invalid_blocks: set[bytes] = set()
        self.prepares: dict[tuple[int, int, bytes], dict[str, ConsensusMessage]] = defaultdict(dict)
        self.commits: dict[tuple[int, int, bytes], set[str]] = defaultdict(set)
        self.sent_prepare: set[tuple[int, int]] = set()
        self.sent_commit: set[tuple[int, int]] = set()
        self.known_blocks: dict[bytes, Block] = {}
        self.view_changes: dict[int, dict[str, ConsensusMessage]] = defaultdict(dict)
        self.new_views: dict[int, ConsensusMessage] = {}
        self.higher_view_senders: dict[int, set[str]] = defaultdict(set)
        self.known_height = self.height
        self.catchup: dict[int, dict[bytes, set[str]]] = defaultdict(lambda: defaultdict(set))
        self.last_block_request = -(10**18)
        self.next_batch_at = now

    def _msg(self, kind: str, view: int, seq: int, **kw) -> ConsensusMessage:
        return make_message(self.keypair, kind, view, seq, self.id, **kw)

    def _finalize(self, block: Block, new_state: LedgerState, now: int) -> None:
        self.state = new_state
        self.blocks.append(block)
        if self.store is not None:
            self.store.append(block)
        for txn in block.txns:
            self.committed_ids.add(txn.txn_id)
            self.pending.pop(txn.txn_id, None)
        self.last_progress = now
        self.backoff = 0
        h = self.height
        self.validated.clear()
        self.invalid_blocks.clear()
        for table in (self.proposals, self.prepares, self.commits):
            for key in [k for k in table if k[1] < h]:
                del table[key]
        self.sent_prepare = {k for k in self.sent_prepare if k[1] >= h}
        self.sent_commit = {k for k in self.sent_commit if k[1] >= h}
        for key in [k for k in self.catchup if k <= h]:
            del self.catchup[key]
        self.known_blocks = {d: b for d, b in self.known_blocks.items() if b.height > h}
        if self.on_commit is not None:
            self.on_commit(self, block, new_state, now)

    # -- client path -------------------------------------------------------

    def _admit(self, txn: Transaction, now: int) -> bool:
        tid = txn.txn_id
        if tid in self.committed_ids or tid in self.pending:
            return False
        if len(self.pending) >= self.config.max_pending:
            raise QueueFull(f"{self.id} has {len(self.pending)} pending transactions")
        if not self.pending:
            self.last_progress = max(self.last_progress, now)
        self.pending[tid] = txn
        return True

    def on_client_txn(self, txn: Transaction, now: int) -> Outbound:
        """Accept a transaction from a client and relay it to every peer."""
        if len(txn.author_signature) != 64 or len(txn.nonce) == 0:
            return []
        if not self._admit(txn, now):
            return []
        out: Outbound = [(None, self._msg(FORWARD, self.view, 0, txn=txn))]
        out += self._maybe_propose(now, flush=False)
        return out

    def _outstanding(self) -> bool:
        return any(v == self.view and s > self.height for v, s in self.proposals)

    def _maybe_propose(self, now: int, flush: bool) -> Outbound:
        if not self.is_primary() or not self.may_propose or self.view_changing or self._outstanding():
            return []
        if self.known_height > self.height or not self.pending:
            return []
        if not flush and len(self.pending) < self.config.batch_size:
            return []
        batch = list(self.pending.values())[: self.config.batch_size]
        ts = max(self.state.time, now // 1000)
        block, new_state = build_block(self.state, batch, ts)
        seq = block.height
        d = block.digest
        self.proposals[(self.view, seq)] = (d, block)
        self.known_blocks[d] = block
        self.validated[d] = new_state
        pp = self._msg(PRE_PREPARE, self.view, seq, digest=d, block=block)
        prep = self._msg(PREPARE, self.view, seq, digest=d)
        self.prepares[(self.view, seq, d)][self.id] = prep
        self.sent_prepare.add((self.view, seq))
        out: Outbound = [(None, pp), (None, prep)]
        return out + self._progress(now)

    # -- timers ------------------------------------------------------------

    def tick(self, now: int, flush: bool | None = None) -> Outbound:
        """Advance timers. ``flush`` forces a proposal of whatever is pending;
        by default it is set when the batch interval has elapsed."""
        out: Outbound = []
        if flush is None:
            flush = now >= self.next_batch_at
        if flush:
            interval = self.config.batch_interval_ms
            self.next_batch_at = (now // interval + 1) * interval
        if self.view_changing:
            limit = self.config.view_timeout_ms << min(self.backoff, MAX_BACKOFF_EXP)
            if now - self.vc_started >= limit:
                self.backoff += 1
                out += self._start_view_change(self.vc_target + 1, now)
        elif (self.pending or self._outstanding()) and now - self.last_progress >= self.config.view_timeout_ms:
            out += self.on_timeout(now)
        if self.known_height > self.height:
            out += self._request_catchup(now)
        out += self._maybe_propose(now, flush=flush)
        return out

    def on_timeout(self, now: int) -> Outbound:
        """Suspect the current primary and move to the next view."""
        target = (self.vc_target if self.view_changing else self.view) + 1
        return self._start_view_change(target, now)

    # -- message dispatch --------------------------------------------------

    def on_message(self, msg: ConsensusMessage, now: int) -> Outbound:
        if msg.sender == self.id or not msg.verify(self.node_keys):
            self.invalid_messages += msg.sender != self.id
            return []
        handler = {
            PRE_PREPARE: self._on_pre_prepare,
            PREPARE: self._on_prepare,
            COMMIT: self._on_commit,
            VIEW_CHANGE: self._on_view_change,
            NEW_VIEW: self._on_new_view,
            FORWARD: self._on_forward,
            BLOCK_REQUEST: self._on_block_request,
            BLOCK_RESPONSE: self._on_block_response,
        }.get(msg.kind)
        if handler is None:
            self.invalid_messages += 1
            return []
        return handler(msg, now)

    def _note_height(self, seq: int, now: int) -> Outbound:
        if seq > self.known_height:
            self.known_height = seq
        if self.known_height > self.height:
            return self._request_catchup(now)
        return []

    def _note_view(self, msg: ConsensusMessage, now: int) -> Outbound:
        """Adopt a higher view once f+1 replicas are seen operating in it."""
        if msg.view <= self.view:
            return []
        self.higher_view_senders[msg.view].add(msg.sender)
        if len(self.higher_view_senders[msg.view]) >= self.config.f + 1:
            if not self.view_changing or msg.view >= self.vc_target:
                return self._enter_view(msg.view, now, self.new_views.get(msg.view))
        return []

    def _on_forward(self, msg: ConsensusMessage, now: int) -> Outbound:
        try:
            admitted = self._admit(msg.txn, now)
        except QueueFull:
            return []
        return self._maybe_propose(now, flush=False) if admitted else []

    def _on_pre_prepare(self, msg: ConsensusMessage, now: int) -> Outbound:
        if msg.view < self.view or msg.sender != self.config.primary(msg.view):
            return []
        key = (msg.view, msg.seq)
        existing = self.proposals.get(key)
        if existing is not None:
            if existing[0] != msg.digest:
                self.equivocations += 1
                log.warning("%s: equivocating pre-prepare from %s at %s", self.id, msg.sender, key)
            return []
        if msg.seq <= self.height:
            return self._support(msg.view, msg.seq, msg.digest)
        self.proposals[key] = (msg.digest, msg.block)
        self.known_blocks[msg.digest] = msg.block
        out = self._note_height(msg.seq - 1, now)
        out += self._note_view(msg, now)
        return out + self._progress(now)

    def _on_prepare(self, msg: ConsensusMessage, now: int) -> Outbound:
        if msg.view < self.view:
            return []
        self.prepares[(msg.view, msg.seq, msg.digest)][msg.sender] = msg
        out = self._note_height(msg.seq - 1, now)
        out += self._note_view(msg, now)
        return out + self._progress(now)

    def _on_commit(self, msg: ConsensusMessage, now: int) -> Outbound:
        self.commits[(msg.view, msg.seq, msg.digest)].add(msg.sender)
        out = self._note_height(msg.seq - 1, now)
        out += self._note_view(msg, now)
        return out + self._progress(now)

    def _support(self, view: int, seq: int, d: bytes) -> Outbound:
        """Vote for a re-proposal of a block this replica already committed."""
        if view != self.view or self.view_changing or self.blocks[seq].digest != d:
            return []
        out: Outbound = []
        if (view, seq) not in self.sent_prepare:
            self.sent_prepare.add((view, seq))
            out.append((None, self._msg(PREPARE, view, seq, digest=d)))
        if (view, seq) not in self.sent_commit:
            self.sent_commit.add((view, seq))
            out.append((None, self._msg(COMMIT, view, seq, digest=d)))
        return out

    # -- normal-case progress ----------------------------------------------

    def _validate(self, block: Block) -> LedgerState | None:
        d = block.digest
        if d in self.validated:
            return self.validated[d]
        if d in self.invalid_blocks:
            return None
        try:
            new_state = apply_block(self.state, block)
        except ChainError as exc:
            log.warning("%s: rejecting block %d: %s", self.id, block.height, exc)
            self.invalid_blocks.add(d)
            return None
        self.validated[d] = new_state
        return new_state

    def _committable(self, seq: int) -> tuple[Block, LedgerState] | None:
        for (v, s, d), senders in self.commits.items():
            if s != seq or len(senders) < self.config.quorum:
                continue
            block = self.known_blocks.get(d)
            if block is None:
                continue
            new_state = self._validate(block)
            if new_state is not None:
                return block, new_state
        return None

    def _progress(self, now: int) -> Outbound:
        out: Outbound = []
        while True:
            seq = self.height + 1
            ready = self._committable(seq)
            if ready is not None:
                self._finalize(*ready, now)
                out += self._maybe_propose(now, flush=False)
                continue
            if self.view_changing:
                return out
            key = (self.view, seq)
            prop = self.proposals.get(key)
            if prop is None:
                return out
            d, block = prop
            if self._validate(block) is None:
                return out
            if key not in self.sent_prepare:
                self.sent_prepare.add(key)
                msg = self._msg(PREPARE, self.view, seq, digest=d)
                self.prepares[(self.view, seq, d)][self.id] = msg
                out.append((None, msg))
            if key not in self.sent_commit and len(self.prepares[(self.view, seq, d)]) >= self.config.quorum:
                self.sent_commit.add(key)
                self.commits[(self.view, seq, d)].add(self.id)
                out.append((None, self._msg(COMMIT, self.view, seq, digest=d)))
                continue
            return out

    # -- view change -------------------------------------------------------

    def _prepared_certificate(self) -> tuple[Block | None, tuple[ConsensusMessage, ...]]:
        seq = self.height + 1
        best = None
        for (v, s, d), votes in self.prepares.items():
            if s != seq or len(votes) < self.config.quorum or d not in self.validated:
                continue
            if self.proposals.get((v, s), (None,))[0] != d:
                continue
            if best is None or v > best[0]:
                best = (v, d, votes)
        if best is None:
            return None, ()
        v, d, votes = best
        proof = tuple(votes[k] for k in sorted(votes)[: self.config.quorum])
        return self.known_blocks[d], proof

    def _start_view_change(self, target: int, now: int) -> Outbound:
        self.view_changing = True
        self.vc_target = target
        self.vc_started = now
        block, proof = self._prepared_certificate()
        vc = self._msg(VIEW_CHANGE, target, self.height, block=block, proof=proof)
        self.view_changes[target][self.id] = vc
        log.info("%s: view change to %d at height %d", self.id, target, self.height)
        return [(None, vc)] + self._try_new_view(target, now)

    def _on_view_change(self, msg: ConsensusMessage, now: int) -> Outbound:
        if not prepared_certificate_ok(msg, self.node_keys, self.config.quorum):
            self.invalid_messages += 1
            return []
        out = self._note_height(msg.seq, now)
        if msg.view <= self.view:
            nv = self.new_views.get(msg.view)
            if nv is not None and nv.sender == self.id:
                out.append((msg.sender, nv))
            return out
        current = self.vc_target if self.view_changing else self.view
        if self.view_changing and msg.view < current:
            # point a lagging replica (e.g. one just back from a crash) at our target
            own = self.view_changes.get(current, {}).get(self.id)
            if own is not None:
                out.append((msg.sender, own))
        self.view_changes[msg.view][msg.sender] = msg
        higher = {}
        for v, vcs in self.view_changes.items():
            if v > current:
                for sender in vcs:
                    if sender != self.id:
                        higher[sender] = min(higher.get(sender, v), v)
        if len(higher) >= self.config.f + 1:
            out += self._start_view_change(min(higher.values()), now)
        return out + self._try_new_view(msg.view, now)

    def _try_new_view(self, view: int, now: int) -> Outbound:
        if self.config.primary(view) != self.id or view in self.new_views:
            return []
        if not (self.view_changing and self.vc_target == view):
            return []
        vcs = self.view_changes[view]
        if len(vcs) < self.config.quorum or self.id not in vcs:
            return []
        chosen = [vcs[self.id]] + [vcs[s] for s in sorted(vcs) if s != self.id][: self.config.quorum - 1]
        proof = tuple(sorted(chosen, key=lambda m: m.sender))
        nv = self._msg(NEW_VIEW, view, 0, proof=proof, blocks=choose_reproposals(proof))
        return [(None, nv)] + self._enter_view(view, now, nv)

    def _on_new_view(self, msg: ConsensusMessage, now: int) -> Outbound:
        if msg.view < self.view or msg.sender != self.config.primary(msg.view):
            return []
        if msg.view == self.view and not self.view_changing and msg.view in self.new_views:
            return []
        senders = set()
        for vc in msg.proof:
            if vc.kind != VIEW_CHANGE or vc.view != msg.view or not vc.verify(self.node_keys):
                return []
            if not prepared_certificate_ok(vc, self.node_keys, self.config.quorum):
                return []
            senders.add(vc.sender)
        if len(senders) < self.config.quorum:
            return []
        if [b.digest for b in choose_reproposals(msg.proof)] != [b.digest for b in msg.blocks]:
            self.invalid_messages += 1
            return []
        return self._enter_view(msg.view, now, msg)

    def _enter_view(self, view: int, now: int, nv: ConsensusMessage | None) -> Outbound:
        self.view = view
        self.view_changing = False
        self.vc_target = view
        self.last_progress = now
        self.may_propose = True
        for v in [v for v in self.view_changes if v <= view]:
            del self.view_changes[v]
        for v in [v for v in self.higher_view_senders if v <= view]:
            del self.higher_view_senders[v]
        out: Outbound = []
        if nv is not None:
            self.new_views[view] = nv
            for vc in nv.proof:
                out += self._note_height(vc.seq, now)
            for block in nv.blocks:
                d = block.digest
                if block.height <= self.height:
                    out += self._support(view, block.height, d)
                    continue
                self.proposals.setdefault((view, block.height), (d, block))
                self.known_blocks[d] = block
        log.info("%s: entered view %d (primary %s)", self.id, view, self.config.primary(view))
        out += self._progress(now)
        return out + self._maybe_propose(now, flush=False)

    # -- catch-up ----------------------------------------------------------

    def _request_catchup(self, now: int) -> Outbound:
        if now - self.last_block_request < self.config.catchup_retry_ms:
            return []
        self.last_block_request = now
        return [(None, self._msg(BLOCK_REQUEST, self.view, self.height + 1))]

    def _on_block_request(self, msg: ConsensusMessage, now: int) -> Outbound:
        if msg.seq > self.height or msg.seq < 1:
            return []
        blocks = tuple(self.blocks[msg.seq : msg.seq + CATCHUP_BATCH])
        return [(msg.sender, self._msg(BLOCK_RESPONSE, self.view, msg.seq, blocks=blocks))]

    def _on_block_response(self, msg: ConsensusMessage, now: int) -> Outbound:
        for block in msg.blocks:
            if block.height > self.height:
                self.catchup[block.height][block.digest].add(msg.sender)
                self.known_blocks.setdefault(block.digest, block)
                self.known_height = max(self.known_height, block.height)
        progressed = False
        while True:
            votes = self.catchup.get(self.height + 1)
            if not votes:
                break
            agreed = [d for d, senders in votes.items() if len(senders) >= self.config.f + 1]
            if not agreed:
                break
            block = self.known_blocks[agreed[0]]
            new_state = self._validate(block)
            if new_state is None:
                del votes[agreed[0]]
                continue
            self._finalize(block, new_state, now)
            progressed = True
        out: Outbound = []
        if progressed:
            self.last_block_request = -(10**18)
            if self.known_height > self.height:
                out += self._request_catchup(now)
        return out + self._progress(now) + self._maybe_propose(now, flush=False)

    # -- crash recovery ----------------------------------------------------

    def recover(self, now: int) -> Outbound:
        """Rebuild state from the block store after a crash and ask peers for news."""
        genesis = self.blocks[0]
        if self.store is not None:
            self._load_chain(genesis)
        else:
            self.state = replay(self.blocks)
        self.pending = {k: t for k, t in self.pending.items() if k not in self.committed_ids}
        self._reset_volatile(now)
        self.may_propose = False
        self.last_block_request = now
        return [(None, self._msg(BLOCK_REQUEST, self.view, self.height + 1))]


# -- embedded cluster ----------------------------------------------------------


class LocalCluster:
    """An in-process cluster with instant, lossless delivery.

    Used as the embedded ledger by the CLI and the end-to-end tests. With a
    ``data_dir`` every replica keeps its own block store there and the cluster
    can be reopened later.
    """

    def __init__(
        self,
        genesis: Block,
        node_keys: dict[str, KeyPair],
        *,
        data_dir: str | Path | None = None,
        clock: Callable[[], float] = time.time,
        batch_size: int = 100,
    ):
        ids = tuple(genesis.genesis["nodes"])
        self.genesis = genesis
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.clock = clock
        self.reachable = True
        self.outcomes: dict[str, str | None] = {}
        self._last_ms = 0
        self._gateway = 0
        self.replicas = {
            nid: Replica(
                ReplicaConfig(ids, nid, batch_size=batch_size),
                node_keys[nid],
                genesis,
                store=BlockStore(self.data_dir / f"{nid}.blocks") if self.data_dir is not None else None,
                on_commit=self._record,
            )
            for nid in ids
        }
        self.ids = ids

    @classmethod
    def create(
        cls,
        registrars: list[tuple[str, bytes]],
        *,
        n: int = 4,
        data_dir: str | Path | None = None,
        seed: int | None = None,
        clock: Callable[[], float] = time.time,
        batch_size: int = 100,
    ) -> "LocalCluster":
        rng = random.Random(seed) if seed is not None else None
        node_keys = {f"n{i}": keygen(rng=rng) for i in range(n)}
        genesis = make_genesis(registrars, {k: p.public_key for k, p in node_keys.items()}, timestamp=int(clock()))
        if data_dir is not None:
            path = Path(data_dir)
            path.mkdir(parents=True, exist_ok=True)
            if (path / "genesis.json").exists():
                raise FileExistsError(f"a ledger already exists in {path}")
            (path / "genesis.json").write_bytes(canonical(genesis.to_dict()))
            (path / "nodes.json").write_bytes(canonical({k: p.to_dict() for k, p in node_keys.items()}))
        return cls(genesis, node_keys, data_dir=data_dir, clock=clock, batch_size=batch_size)

    @classmethod
    def open(cls, data_dir: str | Path, *, clock: Callable[[], float] = time.time) -> "LocalCluster":
        path = Path(data_dir)
        if not (path / "genesis.json").exists():
            raise NotFoundError(f"no ledger in {path}")
        genesis = Block.from_dict(json.loads((path / "genesis.json").read_bytes()))
        keys = {k: KeyPair.from_dict(v) for k, v in json.loads((path / "nodes.json").read_bytes()).items()}
        return cls(genesis, keys, data_dir=path, clock=clock)

    def _now(self) -> int:
        self._last_ms = max(int(self.clock() * 1000), self._last_ms + 1)
        return self._last_ms

    def _record(self, replica: Replica, block: Block, state: LedgerState, now: int) -> None:
        for tid in state.applied:
            self.outcomes.setdefault(tid, None)
        for tid, reason in state.rejections:
            self.outcomes.setdefault(tid, reason)

    def _deliver(self, src: str, out: Outbound, now: int) -> None:
        queue = deque((src, dest, msg) for dest, msg in out)
        while queue:
            sender, dest, msg = queue.popleft()
            targets = [r for r in self.ids if r != sender] if dest is None else [dest]
            for nid in targets:
                for d2, m2 in self.replicas[nid].on_message(msg, now):
                    queue.append((nid, d2, m2))

    def submit(self, txn: Transaction) -> str:
        if not self.reachable:
            raise LedgerUnavailable("embedded ledger is offline")
        now = self._now()
        nid = self.ids[self._gateway % len(self.ids)]
        self._gateway += 1
        self._deliver(nid, self.replicas[nid].on_client_txn(txn, now), now)
        return txn.txn_id

    def sync(self, max_rounds: int = 20) -> None:
        """Drive rounds until nothing is pending anywhere."""
        if not self.reachable:
            raise LedgerUnavailable("embedded ledger is offline")
        for _ in range(max_rounds):
            if not any(r.pending for r in self.replicas.values()):
                return
            now = self._now()
            for nid in self.ids:
                self._deliver(nid, self.replicas[nid].tick(now, flush=True), now)
        raise LedgerUnavailable("transactions did not commit")

    def commit(self, *txns: Transaction) -> dict[str, str | None]:
        """Submit, wait, and return ``{txn_id: None | rejection reason}``."""
        ids = [self.submit(t) for t in txns]
        self.sync()
        return {tid: self.receipt(tid) for tid in ids}

    def receipt(self, txn_id: str) -> str | None:
        if txn_id not in self.outcomes:
            raise NotFoundError(f"transaction {txn_id} not committed")
        return self.outcomes[txn_id]

    @property
    def view(self) -> LedgerView:
        if not self.reachable:
            raise LedgerUnavailable("embedded ledger is offline")
        return snapshot(self.replicas[self.ids[0]].state)

    @property
    def height(self) -> int:
        return self.replicas[self.ids[0]].height
