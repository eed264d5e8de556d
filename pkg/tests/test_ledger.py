import random
from dataclasses import replace

import pytest

from conftest import VIN_KEY, World, make_wallet
from vdkms.credentials import def_gen, issue_credential, revoke_credential, schema_gen
from vdkms.crypto import canonical, keygen, sign
from vdkms.errors import NotFoundError, ValidationError
from vdkms.identity import did_from_key, register_did, revoke_did, rotate_key
from vdkms.ledger import (
    Block,
    BlockStore,
    ChainError,
    apply_block,
    build_block,
    replay,
    snapshot,
    validate_txn,
)
from vdkms.txn import Transaction, TxnKind


def _attrs(vin):
    return {"VIN": vin, "make": "M", "model": "X", "owner": "O"}


def _txn_for(world, kind, wallet, did, pair, target_did, target_pair):
    """Build one transaction of ``kind`` authored by ``wallet``'s identity."""
    t = world.chain.t
    if kind is TxnKind.DID_REG:
        return register_did(keygen(), timestamp=t)
    if kind is TxnKind.SCHEMA:
        return schema_gen(wallet, f"S{random.random()}", "1", ["VIN"], timestamp=t)[1]
    if kind is TxnKind.CRED_DEF:
        return def_gen(wallet, world.schema, timestamp=t)[1]
    if kind is TxnKind.CRED_REG:
        wallet.records["vin_tag_key"] = VIN_KEY.hex()
        return issue_credential(wallet, world.cdef, target_did, target_pair.public_key, _attrs("11111111111111111"), view=world.chain.view, timestamp=t)[1]
    if kind is TxnKind.CRED_REVOKE:
        return revoke_credential(wallet, world.live_root, timestamp=t)
    if kind is TxnKind.DID_REVOKE:
        return revoke_did(wallet, target_did, timestamp=t)
    if kind is TxnKind.ROTATE:
        return rotate_key(wallet, did, keygen(), timestamp=t)
    raise AssertionError(kind)


# (role, kind) -> expected rejection reason (None = accepted)
PERMISSIONS = {
    ("registrar", TxnKind.DID_REG): None,
    ("registrar", TxnKind.SCHEMA): None,
    ("registrar", TxnKind.CRED_DEF): "duplicate-cred-def",  # allowed; the definition already exists
    ("registrar", TxnKind.CRED_REG): None,
    ("registrar", TxnKind.CRED_REVOKE): None,
    ("registrar", TxnKind.DID_REVOKE): None,
    ("registrar", TxnKind.ROTATE): None,
    ("vehicle", TxnKind.DID_REG): None,
    ("vehicle", TxnKind.SCHEMA): "permission",
    ("vehicle", TxnKind.CRED_DEF): "permission",
    ("vehicle", TxnKind.CRED_REG): "permission",
    ("vehicle", TxnKind.CRED_REVOKE): "permission",
    ("vehicle", TxnKind.DID_REVOKE): "permission",
    ("vehicle", TxnKind.ROTATE): None,
}


@pytest.mark.parametrize("role,kind", sorted(PERMISSIONS, key=lambda k: (k[0], k[1].value)))
def test_permission_matrix(role, kind):
    world = World()
    target_did, target_pair, _ = world.vehicle()
    holder_did, holder_pair, _ = world.vehicle()
    vc, txn = issue_credential(
        world.reg, world.cdef, holder_did, holder_pair.public_key, _attrs("1HGCM82633A004352"), view=world.chain.view, timestamp=world.chain.t
    )
    assert world.chain.commit(txn) == {}
    world.live_root = vc.commitment_root
    if role == "registrar":
        wallet, did, pair = world.reg, world.reg_did, world.reg_pair
    else:
        did, pair, wallet = world.vehicle()
    txn = _txn_for(world, kind, wallet, did, pair, target_did, target_pair)
    rej = world.chain.commit(txn)
    assert rej.get(txn.txn_id) == PERMISSIONS[(role, kind)]


def test_rotate_requires_self_authorship(world):
    a, pa, wa = world.vehicle()
    b, _, _ = world.vehicle()
    txn = rotate_key(wa, a, keygen(), timestamp=world.chain.t)
    forged = Transaction(txn.kind, {**txn.payload, "did": str(b)}, txn.author, txn.nonce, txn.timestamp, b"")
    forged = replace(forged, author_signature=sign(pa.secret_key, forged.signing_bytes()))
    assert world.chain.commit(forged) == {forged.txn_id: "permission"}


def test_fresh_did_reg_ok_and_duplicate(world):
    pair = keygen()
    t1 = register_did(pair, timestamp=world.chain.t)
    t2 = register_did(pair, timestamp=world.chain.t)
    assert world.chain.commit(t1, t2) == {t2.txn_id: "duplicate-did"}


def test_replayed_txn_rejected(world):
    txn = register_did(keygen(), timestamp=world.chain.t)
    assert world.chain.commit(txn) == {}
    assert world.chain.commit(txn) == {txn.txn_id: "replay"}
    # replayed inside the same block
    t2 = rotate_key(world.reg, world.reg_did, keygen(), timestamp=world.chain.t)
    assert world.chain.commit(t2, t2) == {t2.txn_id: "replay"}


@pytest.mark.parametrize("skew,ok", [(0, True), (300, True), (-300, True), (301, False), (-301, False), (10_000, False)])
def test_timestamp_window(world, skew, ok):
    txn = register_did(keygen(), timestamp=world.chain.t + 1 + skew)
    rej = world.chain.commit(txn)
    assert (rej == {}) == ok
    if not ok:
        assert rej[txn.txn_id] == "bad-timestamp"


def test_bad_signature_rejected(world):
    txn = register_did(keygen(), timestamp=world.chain.t)
    bad = replace(txn, author_signature=bytes(64))
    assert validate_txn(world.chain.state, bad, world.chain.t).reason == "bad-signature"


def test_unknown_author(world):
    outsider = keygen()
    w = make_wallet(outsider)
    txn = rotate_key(w, did_from_key(outsider.public_key), keygen(), timestamp=world.chain.t)
    assert validate_txn(world.chain.state, txn, world.chain.t).reason == "unknown-author"


def test_empty_block_keeps_state_root(world):
    before = world.chain.state
    assert world.chain.commit() == {}
    after = world.chain.state
    assert after.state_root == before.state_root
    assert after.height == before.height + 1


def test_query_before_and_after_commit(world):
    schema, txn = schema_gen(world.reg, "Later", "2", ["VIN"], timestamp=world.chain.t)
    view = world.chain.view
    with pytest.raises(NotFoundError):
        view.schema(schema.ref)
    world.chain.commit(txn)
    assert world.chain.view.schema(schema.ref) == schema
    # earlier snapshot is stable
    with pytest.raises(NotFoundError):
        view.schema(schema.ref)


def _busy_world(seed):
    world = World(seed)
    rng = random.Random(seed)
    vehicles = [world.vehicle() for _ in range(8)]
    for i, (did, pair, wallet) in enumerate(vehicles[:5]):
        vin = "1HGCM82633A004352" if i == 0 else "11111111111111111" if i == 1 else None
        if vin:
            _, txn = issue_credential(world.reg, world.cdef, did, pair.public_key, _attrs(vin), view=world.chain.view, timestamp=world.chain.t, rng=rng)
            world.chain.commit(txn)
        world.chain.commit(rotate_key(wallet, did, keygen(rng=rng), timestamp=world.chain.t, rng=rng))
    world.chain.commit(revoke_did(world.reg, vehicles[7][0], timestamp=world.chain.t, rng=rng))
    return world, vehicles


def test_dual_replay_identical_root():
    world, _ = _busy_world(3)
    a = replay(world.chain.blocks)
    b = replay([Block.from_dict(blk.to_dict()) for blk in world.chain.blocks])
    assert a.state_root == b.state_root == world.chain.state.state_root
    for sa, sb in zip(world.chain.states, [replay(world.chain.blocks[: i + 1]) for i in range(len(world.chain.blocks))]):
        assert sa.state_root == sb.state_root


def test_duplicate_vin_in_one_block():
    world = World()
    (d1, p1, _), (d2, p2, _) = world.vehicle(), world.vehicle()
    view = world.chain.view
    _, t1 = issue_credential(world.reg, world.cdef, d1, p1.public_key, _attrs("1HGCM82633A004352"), view=view, timestamp=world.chain.t)
    _, t2 = issue_credential(world.reg, world.cdef, d2, p2.public_key, _attrs("1HGCM82633A004352"), view=view, timestamp=world.chain.t)
    assert world.chain.commit(t1, t2) == {t2.txn_id: "duplicate-vin"}
    assert world.chain.state.applied == (t1.txn_id,)


def test_hash_chain_immutability():
    world, _ = _busy_world(5)
    blocks = world.chain.blocks
    original = [b.digest for b in blocks]
    rng = random.Random(1)
    for _ in range(20):
        h = rng.randrange(1, len(blocks))
        if not blocks[h].txns:
            continue
        d = blocks[h].to_dict()
        i = rng.randrange(len(d["txns"]))
        d["txns"][i]["timestamp"] += 1
        tampered = Block.from_dict(d)
        assert tampered.digest != original[h]
        # successors no longer link to the tampered block
        if h + 1 < len(blocks):
            assert blocks[h + 1].prev_hash != tampered.digest
        with pytest.raises(ChainError):
            replay(blocks[:h] + [tampered] + blocks[h + 1 :])


def test_apply_block_linkage_errors(world):
    block, _ = build_block(world.chain.state, [], world.chain.t + 1)
    with pytest.raises(ChainError):
        apply_block(world.chain.state, replace(block, height=block.height + 1))
    with pytest.raises(ChainError):
        apply_block(world.chain.state, replace(block, prev_hash=bytes(32)))
    with pytest.raises(ChainError):
        apply_block(world.chain.state, replace(block, timestamp=world.chain.t - 1))
    with pytest.raises(ChainError):
        apply_block(world.chain.state, replace(block, state_root=bytes(32)))


def test_block_store_round_trip(tmp_path):
    world, _ = _busy_world(7)
    store = BlockStore(tmp_path / "chain.bin")
    for b in world.chain.blocks:
        store.append(b)
    loaded = store.load()
    assert loaded == world.chain.blocks
    assert replay(loaded).state_root == world.chain.state.state_root
    # a torn final write is ignored
    with open(store.path, "ab") as fh:
        fh.write(b"\x00\x00\x10\x00{")
    assert store.load() == world.chain.blocks


def test_random_queries_agree_across_replicas():
    world, vehicles = _busy_world(9)
    a = snapshot(replay(world.chain.blocks))
    b = snapshot(replay(world.chain.blocks))
    keys = [("did", str(d)) for d, _, _ in vehicles] + [("schema", world.schema.ref), ("cred-def", world.cdef.ref)]
    keys += [("credential", r) for r in a.live_credentials()] + [("registrars", ""), ("height", ""), ("state-root", "")]
    keys += [("did", str(did_from_key(bytes([i]) * 32))) for i in range(5)]
    rng = random.Random(0)

    def ask(view, kind, key):
        try:
            return canonical(view.query(kind, key))
        except NotFoundError:
            return b"not-found"

    for _ in range(100):
        kind, key = rng.choice(keys)
        assert ask(a, kind, key) == ask(b, kind, key)


def test_query_unknown_kind(world):
    with pytest.raises(ValidationError):
        world.chain.view.query("bogus")
