import random

import pytest

from vdkms.credentials import VEHICLE_ATTRIBUTES, def_gen, schema_gen
from vdkms.crypto import keygen
from vdkms.identity import bind_identity, did_from_key, register_did
from vdkms.ledger import apply_block, build_block, genesis_state, make_genesis, snapshot
from vdkms.wallet import Wallet

T0 = 1_700_000_000
VIN_KEY = bytes(range(32))


def make_wallet(pair, rng=None):
    w = Wallet("pw", rng=rng, log2_n=4)
    bind_identity(w, did_from_key(pair.public_key), pair)
    return w


class Chain:
    """A single-replica ledger driven directly by tests."""

    def __init__(self, registrars, nodes=None, t=T0):
        self.t = t
        nodes = nodes or {"n0": keygen(bytes(32)).public_key}
        self.blocks = [make_genesis([(did_from_key(p.public_key), p.public_key) for p in registrars], nodes, timestamp=t)]
        self.state = genesis_state(self.blocks[0])
        self.states = [self.state]

    def commit(self, *txns, dt=1):
        self.t += dt
        block, _ = build_block(self.state, txns, self.t)
        self.state = apply_block(self.state, block)
        self.blocks.append(block)
        self.states.append(self.state)
        return dict(self.state.rejections)

    @property
    def view(self):
        return snapshot(self.state)


class World:
    """Registrar with a committed VIN schema and definition, plus helpers."""

    def __init__(self, seed=0):
        self.rng = random.Random(seed)
        self.reg_pair = keygen(rng=self.rng)
        self.reg = make_wallet(self.reg_pair)
        self.reg.records["vin_tag_key"] = VIN_KEY.hex()
        self.reg_did = did_from_key(self.reg_pair.public_key)
        self.chain = Chain([self.reg_pair])
        self.schema, st = schema_gen(self.reg, "VINCredential", "1.0", VEHICLE_ATTRIBUTES, timestamp=self.chain.t, rng=self.rng)
        self.cdef, dt = def_gen(self.reg, self.schema, timestamp=self.chain.t, rng=self.rng)
        assert self.chain.commit(st, dt) == {}

    def vehicle(self):
        pair = keygen(rng=self.rng)
        wallet = make_wallet(pair)
        rej = self.chain.commit(register_did(pair, timestamp=self.chain.t, rng=self.rng))
        assert rej == {}
        return did_from_key(pair.public_key), pair, wallet


@pytest.fixture
def world():
    return World()


# acceptance criteria report: one line per criterion, shown after the run
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"AC{criterion:<2} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[2:4])):
            terminalreporter.write_line(line)
