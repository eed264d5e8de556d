"""Provision, registration, verification and authorization workflows.

Agents exchange signed ``Envelope`` objects over an injected transport. Bodies
that carry attribute values or pairwise keys are sealed to the recipient.
Every agent owns one wallet and one microledger and handles one envelope at
a time.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Protocol

from .consensus import LocalCluster
from .credentials import (
    VIN_ATTRIBUTE,
    CredentialDefinition,
    Presentation,
    ProofRequest,
    Schema,
    VerifiableCredential,
    check_attribute_names,
    commit_attribute,
    def_gen,
    issue_credential,
    proof_gen,
    schema_gen,
    store_credential,
    verify_presentation,
    wallet_credentials,
)
from .crypto import (
    KeyPair,
    canonical,
    digest,
    new_nonce,
    open_sealed,
    random_bytes,
    seal,
    sign,
    verify,
)
from .errors import AuthenticationError, NotFoundError, Rejected, VdkmsError, Verdict
from .identity import (
    Did,
    PeerDid,
    create_identity,
    did_from_key,
    keypair_for,
    primary_did,
    register_did,
    resolve,
)
from .ledger import ZERO_HASH, LedgerView
from .replay import ReplayCache
from .txn import Transaction
from .wallet import Wallet

log = logging.getLogger(__name__)


class Ledger(Protocol):
    """What agents need from a ledger endpoint."""

    @property
    def view(self) -> LedgerView: ...

    def commit(self, *txns: Transaction) -> dict[str, str | None]: ...


class TransportTimeout(VdkmsError):
    """No endpoint answered at the given address."""


# -- envelopes ---------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    sender: str
    recipient: str
    nonce: bytes
    timestamp: int
    kind: str
    body: dict | None = None
    sealed: bytes | None = None
    signature: bytes = field(default=b"", repr=False)

    def header(self) -> bytes:
        """Bound as associated data when the body is sealed."""
        return canonical(
            {
                "sender": self.sender,
                "recipient": self.recipient,
                "nonce": self.nonce,
                "timestamp": self.timestamp,
                "kind": self.kind,
            }
        )

    @cached_property
    def signing_bytes(self) -> bytes:
        return canonical({"header": self.header(), "body": self.body, "sealed": self.sealed})

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "recipient": self.recipient,
            "nonce": self.nonce.hex(),
            "timestamp": self.timestamp,
            "kind": self.kind,
            "body": self.body,
            "sealed": None if self.sealed is None else self.sealed.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Envelope":
        return cls(
            d["sender"],
            d["recipient"],
            bytes.fromhex(d["nonce"]),
            int(d["timestamp"]),
            d["kind"],
            d.get("body"),
            None if d.get("sealed") is None else bytes.fromhex(d["sealed"]),
            bytes.fromhex(d["signature"]),
        )


def make_envelope(
    sender: Did | str,
    sender_key: KeyPair,
    recipient: Did | str,
    kind: str,
    body: dict,
    *,
    now: int,
    seal_to: bytes | None = None,
    rng: random.Random | None = None,
) -> Envelope:
    """Sign ``body``; when ``seal_to`` is a public key the body is encrypted to it."""
    env = Envelope(str(sender), str(recipient), new_nonce(rng), now, kind)
    if seal_to is not None:
        ct = seal(sender_key.secret_key, seal_to, canonical(body), env.header(), rng=rng)
        env = replace(env, sealed=ct)
    else:
        env = replace(env, body=body)
    return replace(env, signature=sign(sender_key.secret_key, env.signing_bytes))


def open_envelope(
    env: Envelope,
    sender_pk: bytes,
    *,
    now: int,
    replay_cache: ReplayCache,
    recipient_key: KeyPair | None = None,
) -> dict:
    """Authenticate, de-duplicate and (if sealed) decrypt an envelope."""
    reason = replay_cache.check((env.sender, env.nonce), env.timestamp, now)
    if reason is not None:
        raise Rejected(reason, f"envelope from {env.sender}")
    if not verify(sender_pk, env.signing_bytes, env.signature):
        raise Rejected("bad-signature", f"envelope from {env.sender}")
    if env.sealed is not None:
        if recipient_key is None:
            raise Rejected("decrypt", "no key to open sealed body")
        try:
            body = json.loads(open_sealed(recipient_key.secret_key, sender_pk, env.sealed, env.header()))
        except AuthenticationError:
            raise Rejected("decrypt", f"envelope from {env.sender}") from None
    elif env.body is not None:
        body = env.body
    else:
        raise Rejected("malformed", "envelope has no body")
    replay_cache.accept((env.sender, env.nonce), env.timestamp, now)
    return body


class InMemoryTransport:
    """Synchronous request/response between agents addressed by opaque strings.

    Every envelope that crosses the transport is also passed to each tap,
    which lets tests hand all traffic to eavesdroppers.
    """

    def __init__(self):
        self.endpoints: dict[str, Callable[[Envelope], Envelope | None]] = {}
        self.down: set[str] = set()
        self.taps: list[Callable[[Envelope], None]] = []

    def register(self, address: str, handler: Callable[[Envelope], Envelope | None]) -> None:
        self.endpoints[address] = handler

    def _tap(self, env: Envelope) -> None:
        for tap in self.taps:
            tap(env)

    def request(self, address: str, env: Envelope) -> Envelope | None:
        handler = self.endpoints.get(address)
        if handler is None or address in self.down:
            raise TransportTimeout(f"no answer from {address}")
        self._tap(env)
        reply = handler(env)
        if reply is not None:
            self._tap(reply)
        return reply


# -- microledger -------------------------------------------------------------


@dataclass(frozen=True)
class MicroledgerTxn:
    pair: tuple[str, str]
    created_at: int
    prev: bytes
    signer_key: bytes
    author_signature: bytes = field(default=b"", repr=False)

    def signing_bytes(self) -> bytes:
        return canonical(
            {"pair": list(self.pair), "created_at": self.created_at, "prev": self.prev, "signer_key": self.signer_key}
        )

    @property
    def digest(self) -> bytes:
        return digest(canonical({"body": self.signing_bytes(), "sig": self.author_signature}))

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "created_at": self.created_at,
            "prev": self.prev.hex(),
            "signer_key": self.signer_key.hex(),
            "author_signature": self.author_signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MicroledgerTxn":
        return cls(
            tuple(d["pair"]),
            int(d["created_at"]),
            bytes.fromhex(d["prev"]),
            bytes.fromhex(d["signer_key"]),
            bytes.fromhex(d["author_signature"]),
        )


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    index: int | None = None
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class Microledger:
    entries: list[MicroledgerTxn] = field(default_factory=list)

    @property
    def head(self) -> bytes:
        return self.entries[-1].digest if self.entries else ZERO_HASH

    def __len__(self) -> int:
        return len(self.entries)

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_list(cls, items: list[dict]) -> "Microledger":
        return cls([MicroledgerTxn.from_dict(d) for d in items])


def microledger_append(ml: Microledger, pair: tuple[Did | str, Did | str], key: KeyPair, *, now: int) -> Microledger:
    entry = MicroledgerTxn((str(pair[0]), str(pair[1])), now, ml.head, key.public_key)
    ml.entries.append(replace(entry, author_signature=sign(key.secret_key, entry.signing_bytes())))
    return ml


def microledger_verify(ml: Microledger) -> ChainCheck:
    """Walk the hash chain and signatures; report the first bad entry."""
    prev = ZERO_HASH
    for i, e in enumerate(ml.entries):
        if e.prev != prev:
            return ChainCheck(False, i, "chain-break")
        if not verify(e.signer_key, e.signing_bytes(), e.author_signature):
            return ChainCheck(False, i, "bad-signature")
        prev = e.digest
    return ChainCheck(True)


# -- session channels --------------------------------------------------------


@dataclass
class SessionChannel:
    local_peer: PeerDid
    remote_peer_did: str
    remote_peer_pk: bytes
    send_counter: int = 0
    recv_counter: int = 0
    replay: ReplayCache = field(default_factory=ReplayCache, repr=False)


def channel_send(
    channel: SessionChannel, payload: dict, *, now: int, rng: random.Random | None = None
) -> Envelope:
    channel.send_counter += 1
    body = {"counter": channel.send_counter, "payload": payload}
    return make_envelope(
        channel.local_peer.did,
        channel.local_peer.pairwise_keypair,
        channel.remote_peer_did,
        "channel",
        body,
        now=now,
        seal_to=channel.remote_peer_pk,
        rng=rng,
    )


def channel_recv(channel: SessionChannel, env: Envelope, *, now: int) -> dict:
    if env.sender != channel.remote_peer_did or env.recipient != str(channel.local_peer.did):
        raise Rejected("wrong-channel", env.sender)
    if env.sealed is None:
        raise Rejected("malformed", "channel messages must be sealed")
    body = open_envelope(
        env, channel.remote_peer_pk, now=now, replay_cache=channel.replay, recipient_key=channel.local_peer.pairwise_keypair
    )
    counter = body.get("counter")
    if not isinstance(counter, int) or counter <= channel.recv_counter:
        raise Rejected("counter-regression", f"{counter} <= {channel.recv_counter}")
    channel.recv_counter = counter
    return body["payload"]


# -- agents ------------------------------------------------------------------


class Agent:
    """Common plumbing: wallet identity, ledger access, envelope handling."""

    role = "agent"

    def __init__(
        self,
        wallet: Wallet,
        ledger: Ledger,
        transport: InMemoryTransport,
        *,
        clock: Callable[[], float] = time.time,
        rng: random.Random | None = None,
    ):
        self.wallet = wallet
        self.ledger = ledger
        self.transport = transport
        self.clock = clock
        self.rng = rng
        self.replay = ReplayCache()
        self.accepted: list[tuple[str, bytes]] = []
        self.microledger = Microledger.from_list(wallet.get("microledger", []))
        self.channels: dict[str, SessionChannel] = {}

    def now(self) -> int:
        return int(self.clock())

    @property
    def did(self) -> Did:
        return primary_did(self.wallet)

    @property
    def keypair(self) -> KeyPair:
        return keypair_for(self.wallet, self.did)

    @property
    def address(self) -> str:
        return str(self.did)

    def listen(self) -> None:
        self.transport.register(self.address, self.handle)

    def _public_key(self, did: str, *, allow_revoked: bool = False) -> bytes:
        doc = resolve(self.ledger.view, did)
        if doc.revoked and not allow_revoked:
            raise Rejected("revoked-sender", did)
        return doc.active_public_key

    def _open(self, env: Envelope, sender_pk: bytes | None = None) -> dict:
        if env.recipient != self.address:
            raise Rejected("wrong-recipient", env.recipient)
        pk = sender_pk if sender_pk is not None else self._public_key(env.sender)
        body = open_envelope(env, pk, now=self.now(), replay_cache=self.replay, recipient_key=self.keypair)
        self.accepted.append((env.sender, env.nonce))
        return body

    def _send(self, recipient: str, kind: str, body: dict, seal_to: bytes | None = None) -> Envelope:
        return make_envelope(self.did, self.keypair, recipient, kind, body, now=self.now(), seal_to=seal_to, rng=self.rng)

    def _error(self, recipient: str, reason: str) -> Envelope:
        return self._send(recipient, "error", {"reason": reason})

    def _reply_body(self, reply: Envelope | None, expected: str, sender_pk: bytes | None = None) -> dict:
        if reply is None:
            raise TransportTimeout("empty reply")
        body = self._open(reply, sender_pk)
        if reply.kind == "error":
            raise Rejected(body.get("reason", "error"))
        if reply.kind != expected:
            raise Rejected("unexpected-reply", reply.kind)
        return body

    def handle(self, env: Envelope) -> Envelope | None:
        handler = getattr(self, "on_" + env.kind.replace("-", "_"), None)
        if handler is None:
            return self._error(env.sender, "unsupported")
        try:
            return handler(env)
        except Rejected as exc:
            log.info("%s rejected %s from %s: %s", self.role, env.kind, env.sender, exc.reason)
            try:
                return self._error(env.sender, exc.reason)
            except VdkmsError:
                return None
        except NotFoundError:
            return self._error(env.sender, "unknown-sender")

    def _save_microledger(self) -> None:
        self.wallet.put("microledger", self.microledger.to_list())

    def _commit(self, *txns: Transaction) -> None:
        outcome = self.ledger.commit(*txns)
        for txn in txns:
            reason = outcome.get(txn.txn_id)
            if reason is not None:
                raise Rejected(reason, f"ledger refused {txn.kind.value}")


class Registrar(Agent):
    role = "registrar"

    @property
    def cred_def(self) -> CredentialDefinition:
        ref = self.wallet.get("cred_def_ref")
        if ref is None:
            raise Rejected("not-provisioned", "registrar has no credential definition")
        return self.ledger.view.cred_def(ref)

    def on_register_request(self, env: Envelope) -> Envelope:
        body = self._open(env)
        if body.get("did") != env.sender:
            raise Rejected("malformed", "request DID does not match sender")
        subject_pk = self._public_key(env.sender)
        attributes = body.get("attributes")
        if not isinstance(attributes, dict):
            raise Rejected("malformed", "attributes missing")
        vc, txn = issue_credential(
            self.wallet, self.cred_def, env.sender, subject_pk, attributes,
            view=self.ledger.view, timestamp=self.now(), rng=self.rng,
        )
        self._commit(txn)
        return self._send(env.sender, "register-response", {"credential": vc.to_dict()}, seal_to=subject_pk)


class Vehicle(Agent):
    role = "vehicle"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self._pending_peers: dict[str, PeerDid] = {}

    @property
    def credential(self) -> VerifiableCredential:
        creds = wallet_credentials(self.wallet)
        live = [c for c in creds if c.subject == self.address]
        if not live:
            raise Rejected("no-credential", self.address)
        return live[-1]

    def present(self, request: ProofRequest) -> Presentation:
        return proof_gen(self.wallet, self.credential, request)

    def on_proof_request(self, env: Envelope) -> Envelope:
        body = self._open(env)
        request = ProofRequest.from_dict(body["request"])
        if request.verifier != env.sender:
            raise Rejected("malformed", "request names a different verifier")
        pres = self.present(request)
        return self._send(env.sender, "presentation", {"presentation": pres.to_dict()}, seal_to=self._public_key(env.sender))

    def on_auth_request(self, env: Envelope) -> Envelope:
        body = self._open(env)
        request = ProofRequest.from_dict(body["request"])
        if request.verifier != env.sender:
            raise Rejected("malformed", "request names a different verifier")
        pres = self.present(request)
        # pairwise identity this vehicle will use towards the provider
        peer = PeerDid.generate(Did.parse(env.sender), rng=self.rng)
        self._pending_peers[env.sender] = peer
        out = {"presentation": pres.to_dict(), "peer_did": str(peer.did), "peer_pk": peer.pairwise_keypair.public_key.hex()}
        return self._send(env.sender, "auth-response", out, seal_to=self._public_key(env.sender))

    def on_auth_granted(self, env: Envelope) -> Envelope:
        body = self._open(env)
        local = self._pending_peers.get(env.sender)
        if local is None or body.get("for") != str(local.did):
            raise Rejected("unexpected-grant", env.sender)
        remote_did = body["peer_did"]
        remote_pk = bytes.fromhex(body["peer_pk"])
        if Did.parse(remote_did) != did_from_key(remote_pk, peer=True):
            raise Rejected("malformed", "pairwise DID does not match its key")
        del self._pending_peers[env.sender]
        microledger_append(self.microledger, (self.address, remote_did), local.pairwise_keypair, now=self.now())
        self._save_microledger()
        peers = dict(self.wallet.get("peers", {}))
        peers[str(local.did)] = local.to_dict()
        self.wallet.put("peers", peers)
        self.channels[remote_did] = SessionChannel(local, remote_did, remote_pk)
        return self._send(env.sender, "auth-ack", {"channel": remote_did})


class ServiceProvider(Agent):
    role = "sp"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.requests: dict[bytes, ProofRequest] = {}
        self.verify_cache = ReplayCache()

    def new_request(self, attributes=(VIN_ATTRIBUTE,)) -> ProofRequest:
        request = ProofRequest.create(self.did, attributes, now=self.now(), rng=self.rng)
        self.requests[request.nonce] = request
        return request

    def check(self, presentation: Presentation) -> Verdict:
        request = self.requests.get(presentation.challenge_nonce)
        if request is None:
            return Verdict.fail("unknown-challenge")
        return verify_presentation(self.ledger.view, presentation, request, now=self.now(), replay_cache=self.verify_cache)


# -- workflows -----------------------------------------------------------------


def provision_registrar(
    registrar: Registrar,
    schema_name: str = "VINCredential",
    schema_version: str = "1.0",
    attribute_names=("VIN", "make", "model", "owner"),
    *,
    vin_tag_key: bytes | None = None,
) -> tuple[Did, Schema, CredentialDefinition]:
    """Publish the registrar's schema and credential definition. Idempotent."""
    names = check_attribute_names(attribute_names)
    if VIN_ATTRIBUTE not in names:
        raise Rejected("missing-vin", "vehicle credential schema must include VIN")
    wallet = registrar.wallet
    if "did" not in wallet:
        create_identity(wallet, rng=registrar.rng)
    did = registrar.did
    if "vin_tag_key" not in wallet:
        wallet.put("vin_tag_key", (vin_tag_key or random_bytes(32, registrar.rng)).hex())
    view = registrar.ledger.view
    if not view.is_registrar(did):
        raise Rejected("permission", f"{did} is not a registrar on this ledger")
    txns = []
    try:
        view.did_document(str(did))
    except NotFoundError:
        txns.append(register_did(registrar.keypair, timestamp=registrar.now(), rng=registrar.rng))
    try:
        schema = view.schema(view.schema_ref(str(did), schema_name, schema_version))
    except NotFoundError:
        schema, st = schema_gen(wallet, schema_name, schema_version, names, timestamp=registrar.now(), rng=registrar.rng)
        txns.append(st)
    existing = [c for c in view.cred_defs_by(str(did)) if c.schema_ref == schema.ref]
    if existing:
        cdef = existing[0]
    else:
        cdef, dt = def_gen(wallet, schema, timestamp=registrar.now(), rng=registrar.rng)
        txns.append(dt)
    if txns:
        registrar._commit(*txns)
    wallet.put("cred_def_ref", cdef.ref)
    registrar.listen()
    return did, schema, cdef


def _provision_holder(agent: Agent) -> Did:
    if "did" not in agent.wallet:
        create_identity(agent.wallet, rng=agent.rng)
    did = agent.did
    try:
        agent.ledger.view.did_document(str(did))
    except NotFoundError:
        agent._commit(register_did(agent.keypair, timestamp=agent.now(), rng=agent.rng))
    agent.listen()
    return did


def provision_vehicle(vehicle: Vehicle) -> Did:
    """Create (or reuse) the vehicle's key pair and publish its DID."""
    return _provision_holder(vehicle)


def provision_sp(sp: ServiceProvider) -> Did:
    return _provision_holder(sp)


def register_vehicle(vehicle: Vehicle, registrar_address: str, attributes: dict) -> VerifiableCredential:
    """Ask a registrar to certify ``attributes``; store the credential on success."""
    registrar_pk = vehicle._public_key(registrar_address)
    req = vehicle._send(
        registrar_address, "register-request", {"did": vehicle.address, "attributes": dict(attributes)}, seal_to=registrar_pk
    )
    body = vehicle._reply_body(vehicle.transport.request(registrar_address, req), "register-response")
    vc = VerifiableCredential.from_dict(body["credential"])
    if vc.issuer != registrar_address or vc.subject != vehicle.address:
        raise Rejected("malformed", "credential names the wrong parties")
    for name, value in attributes.items():
        value_, salt = vc.claims.claims.get(name, (None, b""))
        if value_ != value or commit_attribute(name, value, salt) != vc.commitments[name]:
            raise Rejected("attribute-mismatch", name)
    if not verify(registrar_pk, vc.core.signing_bytes(), vc.core.issuer_signature):
        raise Rejected("issuer-signature")
    store_credential(vehicle.wallet, vc)
    return vc


def verify_credentials(vehicle: Vehicle, verifier: ServiceProvider, attributes=(VIN_ATTRIBUTE,)) -> Verdict:
    """Run one challenge/response round; the verifier's verdict is returned."""
    request = verifier.new_request(attributes)
    env = verifier._send(vehicle.address, "proof-request", {"request": request.to_dict()})
    try:
        # a revoked holder is reported by the presentation check, not the envelope layer
        pk = verifier._public_key(vehicle.address, allow_revoked=True)
        body = verifier._reply_body(verifier.transport.request(vehicle.address, env), "presentation", pk)
    except Rejected as exc:
        return Verdict.fail(exc.reason)
    return verifier.check(Presentation.from_dict(body["presentation"]))


def authorize(vehicle: Vehicle, sp: ServiceProvider) -> tuple[SessionChannel, SessionChannel]:
    """Verify the vehicle, then set up pairwise DIDs, microledger entries and a channel.

    Returns ``(vehicle_channel, provider_channel)``. Nothing is written to
    either microledger unless verification succeeds.
    """
    request = sp.new_request()
    env = sp._send(vehicle.address, "auth-request", {"request": request.to_dict()})
    pk = sp._public_key(vehicle.address, allow_revoked=True)
    body = sp._reply_body(sp.transport.request(vehicle.address, env), "auth-response", pk)
    verdict = sp.check(Presentation.from_dict(body["presentation"]))
    if not verdict:
        raise Rejected(verdict.reason, "verification failed")
    vehicle_peer_did = body["peer_did"]
    vehicle_peer_pk = bytes.fromhex(body["peer_pk"])
    if Did.parse(vehicle_peer_did) != did_from_key(vehicle_peer_pk, peer=True):
        raise Rejected("malformed", "pairwise DID does not match its key")

    # provider side
    sp_peer = PeerDid.generate(Did.parse(vehicle.address), rng=sp.rng)
    microledger_append(sp.microledger, (sp_peer.did, vehicle.address), sp_peer.pairwise_keypair, now=sp.now())
    sp._save_microledger()
    peers = dict(sp.wallet.get("peers", {}))
    peers[str(sp_peer.did)] = sp_peer.to_dict()
    sp.wallet.put("peers", peers)
    sp_channel = SessionChannel(sp_peer, vehicle_peer_did, vehicle_peer_pk)
    sp.channels[vehicle_peer_did] = sp_channel
    grant = sp._send(
        vehicle.address,
        "auth-granted",
        {"for": vehicle_peer_did, "peer_did": str(sp_peer.did), "peer_pk": sp_peer.pairwise_keypair.public_key.hex()},
        seal_to=sp._public_key(vehicle.address),
    )
    sp._reply_body(sp.transport.request(vehicle.address, grant), "auth-ack")
    return vehicle.channels[str(sp_peer.did)], sp_channel


# -- deployments ---------------------------------------------------------------


@dataclass
class Deployment:
    """A registrar, an embedded ledger and a transport wired together."""

    ledger: LocalCluster
    transport: InMemoryTransport
    registrar: Registrar
    clock: Callable[[], float]
    rng: random.Random | None = None
    wallet_log2_n: int = 14

    def _wallet(self) -> Wallet:
        return Wallet("vdkms", rng=self.rng, log2_n=self.wallet_log2_n)

    def vehicle(self) -> Vehicle:
        v = Vehicle(self._wallet(), self.ledger, self.transport, clock=self.clock, rng=self.rng)
        provision_vehicle(v)
        return v

    def provider(self) -> ServiceProvider:
        sp = ServiceProvider(self._wallet(), self.ledger, self.transport, clock=self.clock, rng=self.rng)
        provision_sp(sp)
        return sp


def deploy(
    *,
    nodes: int = 4,
    seed: int | None = None,
    clock: Callable[[], float] = time.time,
    wallet_log2_n: int = 14,
) -> Deployment:
    """Stand up a consortium with one registrar on an in-process ledger."""
    rng = random.Random(seed) if seed is not None else None
    reg_wallet = Wallet("vdkms", rng=rng, log2_n=wallet_log2_n)
    did, pair = create_identity(reg_wallet, rng=rng)
    ledger = LocalCluster.create([(did, pair.public_key)], n=nodes, seed=seed, clock=clock)
    transport = InMemoryTransport()
    registrar = Registrar(reg_wallet, ledger, transport, clock=clock, rng=rng)
    provision_registrar(registrar)
    return Deployment(ledger, transport, registrar, clock, rng, wallet_log2_n)
