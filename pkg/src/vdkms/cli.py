"""Command-line front end: agent workflows over an on-disk embedded ledger,
and the discrete-event simulator."""

from __future__ import annotations

import json
import os
import random
import sys
from pathlib import Path

import click

from .consensus import LocalCluster
from .credentials import Presentation, ProofRequest, VerifiableCredential, issue_credential, store_credential
from .crypto import verify
from .errors import NotFoundError, VdkmsError
from .identity import create_identity
from .protocols import (
    InMemoryTransport,
    Registrar,
    ServiceProvider,
    Vehicle,
    authorize,
    provision_registrar,
    provision_sp,
    provision_vehicle,
    register_vehicle,
    verify_credentials,
)
from .replay import ReplayCache
from .simnet import SimConfig, bucket_throughput, chains_consistent, export_csv, paper_interruption, run
from .wallet import Wallet

DEFAULT_LEDGER_DIR = ".vdkms-ledger"


class Context:
    def __init__(self, ledger: str, seed: int | None):
        self.ledger_arg = ledger
        self.seed = seed
        self.rng = random.Random(seed) if seed is not None else None
        self.transport = InMemoryTransport()
        self._ledger: LocalCluster | None = None

    @property
    def ledger_dir(self) -> Path:
        if self.ledger_arg == "embedded":
            return Path(os.environ.get("VDKMS_LEDGER_DIR", DEFAULT_LEDGER_DIR))
        if "://" in self.ledger_arg:
            raise click.UsageError("remote ledger endpoints are not supported; use 'embedded' or a directory")
        return Path(self.ledger_arg)

    def ledger(self) -> LocalCluster:
        if self._ledger is None:
            try:
                self._ledger = LocalCluster.open(self.ledger_dir)
            except NotFoundError:
                raise click.ClickException(f"no ledger at {self.ledger_dir}; run 'vdkms registrar init' first") from None
        return self._ledger


def _passphrase(var: str) -> str:
    value = os.environ.get(var)
    if value is None:
        raise click.UsageError(f"environment variable {var} is not set")
    return value


def _new_wallet(path: str, passphrase_env: str, rng) -> Wallet:
    if Path(path).exists():
        raise click.ClickException(f"{path} already exists")
    return Wallet(_passphrase(passphrase_env), path=path, rng=rng)


def _open_wallet(path: str, passphrase_env: str, rng) -> Wallet:
    try:
        return Wallet.open(path, _passphrase(passphrase_env), rng=rng)
    except FileNotFoundError:
        raise click.ClickException(f"no wallet at {path}") from None


def _agent(cls, ctx: Context, wallet: Wallet):
    agent = cls(wallet, ctx.ledger(), ctx.transport, rng=ctx.rng)
    agent.listen()
    return agent


def _attrs(pairs: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for item in pairs:
        name, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected NAME=VALUE, got {item!r}", param_hint="--attr")
        out[name] = value
    return out


def _emit(data, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)


wallet_opt = click.option("--wallet", "wallet_path", required=True, type=click.Path(dir_okay=False), help="Wallet file.")
pass_opt = click.option(
    "--passphrase-env", default="VDKMS_PASSPHRASE", show_default=True, help="Variable holding the wallet passphrase."
)


class _Group(click.Group):
    """Report library errors as one-line CLI failures."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except VdkmsError as exc:
            reason = getattr(exc, "reason", None)
            raise click.ClickException(f"{type(exc).__name__}: {reason or exc}") from exc


@click.group(cls=_Group)
@click.option("--ledger", default="embedded", show_default=True, help="'embedded' or a ledger directory.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Seed for reproducible keys and nonces.")
@click.pass_context
def main(click_ctx, ledger, seed):
    """Decentralized key management for vehicular networks."""
    click_ctx.obj = Context(ledger, seed)


# -- registrar ---------------------------------------------------------------


@main.group()
def registrar():
    """Consortium registrar commands."""


@registrar.command("init")
@wallet_opt
@pass_opt
@click.option("--nodes", default=4, show_default=True, help="Replica count when creating a new ledger.")
@click.pass_obj
def registrar_init(ctx: Context, wallet_path, passphrase_env, nodes):
    """Create a registrar wallet and publish its schema and credential definition.

    A new embedded ledger is created with this registrar as founding member
    when none exists yet.
    """
    wallet = _new_wallet(wallet_path, passphrase_env, ctx.rng)
    did, pair = create_identity(wallet, rng=ctx.rng)
    if not (ctx.ledger_dir / "genesis.json").exists():
        LocalCluster.create([(str(did), pair.public_key)], n=nodes, data_dir=ctx.ledger_dir)
    reg = Registrar(wallet, ctx.ledger(), ctx.transport, rng=ctx.rng)
    did, schema, cdef = provision_registrar(reg)
    _emit({"did": str(did), "schema": schema.ref, "cred_def": cdef.ref}, None)


@registrar.command("issue")
@wallet_opt
@pass_opt
@click.option("--subject", required=True, help="Vehicle DID.")
@click.option("--attr", "attrs", multiple=True, help="NAME=VALUE, repeatable.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the credential here instead of stdout.")
@click.pass_obj
def registrar_issue(ctx: Context, wallet_path, passphrase_env, subject, attrs, out):
    """Issue a credential directly to a registered vehicle DID."""
    reg = _agent(Registrar, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    view = ctx.ledger().view
    subject_pk = reg._public_key(subject)
    vc, txn = issue_credential(reg.wallet, reg.cred_def, subject, subject_pk, _attrs(attrs), view=view, timestamp=reg.now(), rng=ctx.rng)
    reg._commit(txn)
    _emit(vc.to_dict(), out)


# -- vehicle -------------------------------------------------------------------


@main.group()
def vehicle():
    """Vehicle commands."""


@vehicle.command("init")
@wallet_opt
@pass_opt
@click.pass_obj
def vehicle_init(ctx: Context, wallet_path, passphrase_env):
    """Create a vehicle wallet and register its DID on the ledger."""
    v = Vehicle(_new_wallet(wallet_path, passphrase_env, ctx.rng), ctx.ledger(), ctx.transport, rng=ctx.rng)
    click.echo(str(provision_vehicle(v)))


@vehicle.command("register")
@wallet_opt
@pass_opt
@click.option("--registrar-wallet", type=click.Path(dir_okay=False), help="Run the request against this registrar.")
@click.option("--registrar-passphrase-env", default="VDKMS_REGISTRAR_PASSPHRASE", show_default=True)
@click.option("--credential", "credential_file", type=click.Path(exists=True, dir_okay=False), help="Import an issued credential.")
@click.option("--attr", "attrs", multiple=True, help="NAME=VALUE, repeatable.")
@click.pass_obj
def vehicle_register(ctx: Context, wallet_path, passphrase_env, registrar_wallet, registrar_passphrase_env, credential_file, attrs):
    """Obtain a VIN credential, either by request or by importing one."""
    v = _agent(Vehicle, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    if credential_file:
        vc = VerifiableCredential.from_dict(json.loads(Path(credential_file).read_text()))
        if vc.subject != v.address:
            raise click.ClickException("credential was issued to a different DID")
        issuer_pk = v._public_key(vc.issuer)
        if not verify(issuer_pk, vc.core.signing_bytes(), vc.core.issuer_signature):
            raise click.ClickException("issuer signature does not verify")
        store_credential(v.wallet, vc)
    elif registrar_wallet:
        reg = _agent(Registrar, ctx, _open_wallet(registrar_wallet, registrar_passphrase_env, ctx.rng))
        vc = register_vehicle(v, reg.address, _attrs(attrs))
    else:
        raise click.UsageError("give --registrar-wallet or --credential")
    click.echo(vc.commitment_root.hex())


@vehicle.command("present")
@wallet_opt
@pass_opt
@click.option("--request", "request_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.pass_obj
def vehicle_present(ctx: Context, wallet_path, passphrase_env, request_file, out):
    """Answer a proof request from a file."""
    v = _agent(Vehicle, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    request = ProofRequest.from_dict(json.loads(Path(request_file).read_text()))
    _emit(v.present(request).to_dict(), out)


# -- service provider ----------------------------------------------------------


@main.group()
def sp():
    """Service provider commands."""


@sp.command("init")
@wallet_opt
@pass_opt
@click.pass_obj
def sp_init(ctx: Context, wallet_path, passphrase_env):
    """Create a provider wallet and register its DID."""
    p = ServiceProvider(_new_wallet(wallet_path, passphrase_env, ctx.rng), ctx.ledger(), ctx.transport, rng=ctx.rng)
    click.echo(str(provision_sp(p)))


@sp.command("request")
@wallet_opt
@pass_opt
@click.option("--attribute", "attributes", multiple=True, default=("VIN",), show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
@click.pass_obj
def sp_request(ctx: Context, wallet_path, passphrase_env, attributes, out):
    """Create a proof request and remember it in the wallet."""
    p = _agent(ServiceProvider, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    request = p.new_request(tuple(attributes))
    pending = dict(p.wallet.get("requests", {}))
    pending[request.nonce.hex()] = request.to_dict()
    p.wallet.put("requests", pending)
    _emit(request.to_dict(), out)


@sp.command("verify")
@wallet_opt
@pass_opt
@click.option("--presentation", "presentation_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--vehicle-wallet", type=click.Path(dir_okay=False), help="Run a live challenge against this vehicle.")
@click.option("--vehicle-passphrase-env", default="VDKMS_VEHICLE_PASSPHRASE", show_default=True)
@click.pass_obj
def sp_verify(ctx: Context, wallet_path, passphrase_env, presentation_file, vehicle_wallet, vehicle_passphrase_env):
    """Verify a presentation file, or challenge a vehicle wallet directly."""
    p = _agent(ServiceProvider, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    if presentation_file:
        pres = Presentation.from_dict(json.loads(Path(presentation_file).read_text()))
        pending = dict(p.wallet.get("requests", {}))
        entry = pending.pop(pres.challenge_nonce.hex(), None)
        if entry is None:
            verdict_ok, reason = False, "unknown-challenge"
        else:
            p.requests[pres.challenge_nonce] = ProofRequest.from_dict(entry)
            p.verify_cache = ReplayCache()
            verdict = p.check(pres)
            verdict_ok, reason = verdict.ok, verdict.reason
            # each request is answered once
            p.wallet.put("requests", pending)
    elif vehicle_wallet:
        v = _agent(Vehicle, ctx, _open_wallet(vehicle_wallet, vehicle_passphrase_env, ctx.rng))
        verdict = verify_credentials(v, p)
        verdict_ok, reason = verdict.ok, verdict.reason
    else:
        raise click.UsageError("give --presentation or --vehicle-wallet")
    click.echo("success" if verdict_ok else f"fail: {reason}")
    if not verdict_ok:
        sys.exit(1)


@sp.command("authorize")
@wallet_opt
@pass_opt
@click.option("--vehicle-wallet", required=True, type=click.Path(dir_okay=False))
@click.option("--vehicle-passphrase-env", default="VDKMS_VEHICLE_PASSPHRASE", show_default=True)
@click.pass_obj
def sp_authorize(ctx: Context, wallet_path, passphrase_env, vehicle_wallet, vehicle_passphrase_env):
    """Authorize a vehicle and record the pairwise DIDs in both microledgers."""
    p = _agent(ServiceProvider, ctx, _open_wallet(wallet_path, passphrase_env, ctx.rng))
    v = _agent(Vehicle, ctx, _open_wallet(vehicle_wallet, vehicle_passphrase_env, ctx.rng))
    vch, spch = authorize(v, p)
    _emit({"vehicle_peer_did": str(vch.local_peer.did), "provider_peer_did": str(spch.local_peer.did)}, None)


# -- ledger ----------------------------------------------------------------------


@main.group()
def ledger():
    """Ledger queries."""


@ledger.command("query")
@click.argument("kind")
@click.argument("key", required=False, default="")
@click.pass_obj
def ledger_query(ctx: Context, kind, key):
    """Look up KIND (did, schema, cred-def, credential, registrars, height, state-root) by KEY."""
    _emit(ctx.ledger().view.query(kind, key), None)


# -- simulator -------------------------------------------------------------------


@main.group()
def sim():
    """Discrete-event simulation."""


def _report(result, out: str | None) -> None:
    if out:
        export_csv(result.metrics, out)
    tally = result.tally()
    per_bucket = bucket_throughput(result.metrics)
    _emit(
        {
            "committed": tally["committed"],
            "rejected": tally["rejected"],
            "in_flight": tally["in-flight"],
            "chains_consistent": chains_consistent(result.chains),
            "heights": {nid: len(c) - 1 for nid, c in result.chains.items()},
            "throughput_per_bucket": per_bucket,
        },
        None,
    )


@sim.command("run")
@click.option("--config", "config_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def sim_run(ctx: Context, config_file, out):
    """Run a simulation described by a JSON SimConfig."""
    _report(run(SimConfig.load(config_file)), out)


@sim.command("scenario")
@click.argument("name", type=click.Choice(["paper-interruption"]))
@click.option("--nodes", default=7, show_default=True)
@click.option("--crash", type=click.IntRange(0), default=2, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
@click.pass_obj
def sim_scenario(ctx: Context, name, nodes, crash, out):
    """Run the 600 s interruption scenario with CRASH nodes down from 240 s to 360 s."""
    seed = 42 if ctx.seed is None else ctx.seed
    _report(run(paper_interruption(crash, nodes=nodes, seed=seed)), out)
