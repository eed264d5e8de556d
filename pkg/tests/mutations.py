"""Single-field mutations of a presentation, shared by unit and acceptance tests."""

from dataclasses import replace


def _flip(b: bytes, i: int = 0) -> bytes:
    out = bytearray(b)
    out[i % len(out)] ^= 0x01
    return bytes(out)


def _alter(s: str) -> str:
    c = s[0]
    return ("A" if c != "A" else "B") + s[1:]


def presentation_mutations(p, other_did: str):
    """Yield (field name, mutated presentation); each differs from ``p`` in one field."""
    core = p.credential
    for name, (value, salt) in p.revealed.items():
        yield f"revealed[{name}].value", replace(p, revealed={**p.revealed, name: (_alter(value), salt)})
        yield f"revealed[{name}].salt", replace(p, revealed={**p.revealed, name: (value, _flip(salt))})
    for name, c in p.hidden_commitments.items():
        yield f"hidden[{name}]", replace(p, hidden_commitments={**p.hidden_commitments, name: _flip(c)})
    yield "cred_def_ref", replace(p, credential=replace(core, cred_def_ref=_flip(bytes.fromhex(core.cred_def_ref)).hex()))
    yield "issuer", replace(p, credential=replace(core, issuer=other_did))
    yield "subject", replace(p, credential=replace(core, subject=other_did))
    yield "subject_public_key", replace(p, credential=replace(core, subject_public_key=_flip(core.subject_public_key)))
    yield "commitment_root", replace(p, credential=replace(core, commitment_root=_flip(core.commitment_root)))
    yield "issued_at", replace(p, credential=replace(core, issued_at=core.issued_at + 1))
    yield "issuer_signature", replace(p, credential=replace(core, issuer_signature=_flip(core.issuer_signature, 5)))
    yield "challenge_nonce", replace(p, challenge_nonce=_flip(p.challenge_nonce))
    yield "holder_signature", replace(p, holder_signature=_flip(p.holder_signature, 7))
