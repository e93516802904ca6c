"""Wire PDU for every protocol step, with a bit-exact binary frame.

Frame layout (big-endian):
    kind            1 byte
    sender          4 bytes
    receiver        4 bytes   (0xFFFFFFFF = broadcast)
    id count        1 byte
    ids             4 bytes each (cleartext identities)
    payload length  2 bytes
    payload         ciphertext or digest, depending on kind

The cleartext portion never carries key material or nonces; those ride inside
the encrypted payload. Per-kind plaintext layouts live in WIRE.md and in the
pack_*/unpack_* helpers below.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .crypto import KeyMaterial, Nonce

BROADCAST = 0xFFFFFFFF
_HDR = struct.Struct(">BIIB")
_LEN = struct.Struct(">H")
_ID = struct.Struct(">I")
_NONCE = struct.Struct(">Q")


class WireError(Exception):
    pass


class MessageKind(enum.IntEnum):
    AUTH_STEP1 = 1
    AUTH_STEP2 = 2
    AUTH_STEP3 = 3
    AGREE_STEP1 = 4
    AGREE_STEP2 = 5
    AGREE_STEP3 = 6
    JOIN_REQUEST = 7
    JOIN_STEP_A = 8
    JOIN_STEP_B = 9
    JOIN_STEP_C = 10
    GLOBAL_REKEY = 11
    LOCAL_REKEY_STEP1 = 12
    LOCAL_REKEY_STEP3 = 13
    MASTER_REKEY = 14


# Kinds whose payload is a cleartext digest rather than a ciphertext.
DIGEST_KINDS = frozenset({MessageKind.AGREE_STEP3, MessageKind.LOCAL_REKEY_STEP3})


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: int
    receiver: int           # node id or BROADCAST
    ids: tuple[int, ...]    # cleartext identity fields
    payload: bytes          # Ciphertext or Digest per kind

    def to_bytes(self) -> bytes:
        if len(self.ids) > 255:
            raise WireError("too many cleartext ids")
        if len(self.payload) > 0xFFFF:
            raise WireError("payload exceeds 65535 bytes")
        out = _HDR.pack(self.kind, self.sender, self.receiver, len(self.ids))
        for i in self.ids:
            out += _ID.pack(i)
        return out + _LEN.pack(len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ProtocolMessage":
        if len(raw) < _HDR.size + _LEN.size:
            raise WireError("truncated frame")
        kind_b, sender, receiver, nids = _HDR.unpack_from(raw, 0)
        try:
            kind = MessageKind(kind_b)
        except ValueError as e:
            raise WireError(f"unknown message kind {kind_b}") from e
        off = _HDR.size
        if len(raw) < off + 4 * nids + _LEN.size:
            raise WireError("truncated id list")
        ids = tuple(_ID.unpack_from(raw, off + 4 * k)[0] for k in range(nids))
        off += 4 * nids
        (plen,) = _LEN.unpack_from(raw, off)
        off += _LEN.size
        if len(raw) != off + plen:
            raise WireError("frame length mismatch")
        return cls(kind=kind, sender=sender, receiver=receiver, ids=ids, payload=raw[off:])


# ---------------------------------------------------------------------------
# Plaintext layouts carried inside the encrypted payload.  Key-material fields
# take the scenario key width; the caller passes it for unpacking.
# ---------------------------------------------------------------------------

def pack_auth_step1(id_d: int, id_a: int, nonce_d: Nonce) -> bytes:
    return _ID.pack(id_d) + _ID.pack(id_a) + _NONCE.pack(nonce_d.value)


def unpack_auth_step1(pt: bytes) -> tuple[int, int, int]:
    if len(pt) != 16:
        raise WireError("bad auth step1 plaintext")
    return (*struct.unpack(">II", pt[:8]), _NONCE.unpack(pt[8:])[0])


def pack_auth_step2(id_a: int, id_d: int, echoed: int, nonce_a: Nonce) -> bytes:
    return _ID.pack(id_a) + _ID.pack(id_d) + _NONCE.pack(echoed) + _NONCE.pack(nonce_a.value)


def unpack_auth_step2(pt: bytes) -> tuple[int, int, int, int]:
    if len(pt) != 24:
        raise WireError("bad auth step2 plaintext")
    a, d = struct.unpack(">II", pt[:8])
    echoed, nv = struct.unpack(">QQ", pt[8:])
    return a, d, echoed, nv


def pack_auth_step3(id_a: int, id_d: int, echoed: int,
                    k_up: KeyMaterial, share: KeyMaterial) -> bytes:
    # Carries the sender's intermediate key and its bare share; the share is
    # what lets the root assemble the level-1 local keys.
    return (_ID.pack(id_a) + _ID.pack(id_d) + _NONCE.pack(echoed)
            + k_up.data + share.data)


def unpack_auth_step3(pt: bytes, key_bytes: int) -> tuple[int, int, int, KeyMaterial, KeyMaterial]:
    if len(pt) != 16 + 2 * key_bytes:
        raise WireError("bad auth step3 plaintext")
    a, d = struct.unpack(">II", pt[:8])
    (echoed,) = _NONCE.unpack(pt[8:16])
    k_up = KeyMaterial(pt[16 : 16 + key_bytes])
    share = KeyMaterial(pt[16 + key_bytes :])
    return a, d, echoed, k_up, share


def pack_agree_step1(id_root: int, z: KeyMaterial, nonce: Nonce) -> bytes:
    return _ID.pack(id_root) + z.data + _NONCE.pack(nonce.value)


def unpack_agree_step1(pt: bytes, key_bytes: int) -> tuple[int, KeyMaterial, int]:
    if len(pt) != 12 + key_bytes:
        raise WireError("bad agree step1 plaintext")
    (rid,) = _ID.unpack(pt[:4])
    z = KeyMaterial(pt[4 : 4 + key_bytes])
    (nv,) = _NONCE.unpack(pt[4 + key_bytes :])
    return rid, z, nv


def pack_agree_step2(id_ch: int, share: KeyMaterial, echoed: int, nonce_ch: Nonce) -> bytes:
    return _ID.pack(id_ch) + share.data + _NONCE.pack(echoed) + _NONCE.pack(nonce_ch.value)


def unpack_agree_step2(pt: bytes, key_bytes: int) -> tuple[int, KeyMaterial, int, int]:
    if len(pt) != 20 + key_bytes:
        raise WireError("bad agree step2 plaintext")
    (cid,) = _ID.unpack(pt[:4])
    share = KeyMaterial(pt[4 : 4 + key_bytes])
    echoed, nv = struct.unpack(">QQ", pt[4 + key_bytes :])
    return cid, share, echoed, nv


def confirm_digest_input(id_target: int, nonce_succ: int, key: KeyMaterial) -> bytes:
    """Byte layout hashed for session/rekey confirmations: id, nonce+1, key."""
    return _ID.pack(id_target) + _NONCE.pack(nonce_succ) + key.data


def pack_rekey(id_sender: int, share: KeyMaterial, nonce: Nonce) -> bytes:
    """Shared layout for GLOBAL_REKEY, LOCAL_REKEY_STEP1 and MASTER_REKEY."""
    return _ID.pack(id_sender) + share.data + _NONCE.pack(nonce.value)


def unpack_rekey(pt: bytes, key_bytes: int) -> tuple[int, KeyMaterial, int]:
    if len(pt) != 12 + key_bytes:
        raise WireError("bad rekey plaintext")
    (sid,) = _ID.unpack(pt[:4])
    share = KeyMaterial(pt[4 : 4 + key_bytes])
    (nv,) = _NONCE.unpack(pt[4 + key_bytes :])
    return sid, share, nv
