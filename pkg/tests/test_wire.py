import pytest

from manetsec.crypto import KeyMaterial, Nonce
from manetsec.wire import (
    BROADCAST,
    MessageKind,
    ProtocolMessage,
    WireError,
    confirm_digest_input,
    pack_agree_step1,
    pack_agree_step2,
    pack_auth_step1,
    pack_auth_step2,
    pack_auth_step3,
    pack_rekey,
    unpack_agree_step1,
    unpack_agree_step2,
    unpack_auth_step1,
    unpack_auth_step2,
    unpack_auth_step3,
    unpack_rekey,
)

KB = 16  # 128-bit scenario width


class TestFrameConformance:
    def test_digest_frame_hex(self):
        msg = ProtocolMessage(MessageKind.AGREE_STEP3, sender=7, receiver=5,
                              ids=(7, 5), payload=bytes.fromhex("a3" * 32))
        assert msg.to_bytes().hex() == (
            "0600000007000000050200000007000000050020" + "a3" * 32)

    def test_join_request_frame_hex(self):
        msg = ProtocolMessage(MessageKind.JOIN_REQUEST, sender=19, receiver=BROADCAST,
                              ids=(19,), payload=b"")
        assert msg.to_bytes().hex() == "0700000013ffffffff01000000130000"

    def test_round_trip_all_kinds(self, rng):
        for kind in MessageKind:
            payload = bytes(rng.getrandbits(8) for _ in range(rng.randrange(0, 100)))
            m = ProtocolMessage(kind, rng.randrange(2**32), rng.randrange(2**32),
                                tuple(rng.randrange(2**32) for _ in range(rng.randrange(4))),
                                payload)
            assert ProtocolMessage.from_bytes(m.to_bytes()) == m

    def test_broadcast_round_trip(self):
        m = ProtocolMessage(MessageKind.AGREE_STEP1, 1, BROADCAST, (1,), b"ct")
        back = ProtocolMessage.from_bytes(m.to_bytes())
        assert back.receiver == BROADCAST

    def test_truncated_frames_rejected(self):
        m = ProtocolMessage(MessageKind.AUTH_STEP1, 1, 2, (1, 2), b"payload")
        raw = m.to_bytes()
        for cut in (0, 3, 9, len(raw) - 1):
            with pytest.raises(WireError):
                ProtocolMessage.from_bytes(raw[:cut])

    def test_trailing_garbage_rejected(self):
        raw = ProtocolMessage(MessageKind.AUTH_STEP1, 1, 2, (), b"x").to_bytes()
        with pytest.raises(WireError):
            ProtocolMessage.from_bytes(raw + b"!")

    def test_unknown_kind_rejected(self):
        raw = ProtocolMessage(MessageKind.AUTH_STEP1, 1, 2, (), b"").to_bytes()
        with pytest.raises(WireError):
            ProtocolMessage.from_bytes(b"\xee" + raw[1:])

    def test_oversize_payload_rejected(self):
        with pytest.raises(WireError):
            ProtocolMessage(MessageKind.AUTH_STEP1, 1, 2, (), b"z" * 70_000).to_bytes()


class TestPayloadLayouts:
    def test_auth_step1_hex(self):
        pt = pack_auth_step1(9, 2, Nonce(0x0102030405060708, 9))
        assert pt.hex() == "00000009000000020102030405060708"
        assert unpack_auth_step1(pt) == (9, 2, 0x0102030405060708)

    def test_auth_step2(self):
        pt = pack_auth_step2(2, 9, 0x11, Nonce(0x22, 2))
        assert unpack_auth_step2(pt) == (2, 9, 0x11, 0x22)

    def test_auth_step3_carries_fold_and_share(self, rng):
        k, s = KeyMaterial.random(rng), KeyMaterial.random(rng)
        pt = pack_auth_step3(2, 9, 0x33, k, s)
        assert unpack_auth_step3(pt, KB) == (2, 9, 0x33, k, s)

    def test_agree_step1_hex(self):
        z = KeyMaterial(bytes.fromhex("00112233445566778899aabbccddeeff"))
        pt = pack_agree_step1(1, z, Nonce(0x1122334455667788, 1))
        assert pt.hex() == ("00000001"
                            "00112233445566778899aabbccddeeff"
                            "1122334455667788")
        assert unpack_agree_step1(pt, KB) == (1, z, 0x1122334455667788)

    def test_agree_step2(self, rng):
        s = KeyMaterial.random(rng)
        pt = pack_agree_step2(5, s, 7, Nonce(8, 5))
        assert unpack_agree_step2(pt, KB) == (5, s, 7, 8)

    def test_rekey_layout(self, rng):
        s = KeyMaterial.random(rng)
        pt = pack_rekey(3, s, Nonce(44, 3))
        assert unpack_rekey(pt, KB) == (3, s, 44)

    def test_confirm_digest_input_layout(self):
        k = KeyMaterial(bytes(range(16)))
        blob = confirm_digest_input(5, 0x99, k)
        assert blob == bytes.fromhex("00000005") + (0x99).to_bytes(8, "big") + k.data

    def test_wrong_width_unpacks_fail(self, rng):
        pt = pack_agree_step1(1, KeyMaterial.random(rng, 128), Nonce(1, 1))
        with pytest.raises(WireError):
            unpack_agree_step1(pt, 32)
