"""Per-node key agreement state machines and the group orchestration layer.

The flow mirrors the tree structure: every child authenticates to its parent
with a three-step encrypted nonce exchange and hands up an intermediate key
(its share XORed with its children's intermediates), the root folds them into
the subkey z, and the checker turns z into the group key GK = z xor S_Ch,
collecting a confirmation digest from every member. Joins refresh exactly the
key path of the new member; leaves re-layer the tree, rotate the master key
with fresh root entropy carried over per-edge keys, and refresh the affected
paths; periodic rekeys ratchet GK and the local keys by XOR.

Nodes never raise on bad input: undecryptable, replayed or out-of-phase
messages are dropped and counted, which is what the replay/tamper harnesses
assert against. Orchestration-level failures (timeouts, checker mismatch)
abort the epoch and roll every node back to its pre-epoch state.
"""

from __future__ import annotations

import copy
import hashlib
import random
import struct
from collections import deque
from dataclasses import dataclass, field

from .crypto import CipherSuite, IntegrityFailure, KeyMaterial, NonceSource, xor_combine
from .keytree import (
    Graph,
    KeyTree,
    NodeId,
    TreeError,
    Unreachable,
    attach_member,
    build_tree,
    detach_member,
    key_path,
    select_checker,
)
from . import wire
from .wire import BROADCAST, MessageKind, ProtocolMessage

__all__ = [
    "GroupSession",
    "ProtocolNode",
    "NodeState",
    "SessionKeys",
    "Transport",
    "ProtocolAbort",
    "InitiationTimeout",
    "CheckerVerificationFailure",
    "RekeyFailure",
    "UnsupportedLeave",
]


class ProtocolAbort(Exception):
    """Epoch-level failure; the session restores its pre-epoch state."""


class InitiationTimeout(ProtocolAbort):
    def __init__(self, edges):
        super().__init__(f"initiation incomplete on edges: {sorted(edges)}")
        self.edges = edges


class CheckerVerificationFailure(ProtocolAbort):
    def __init__(self, nodes):
        super().__init__(f"checker rejected confirmations from: {sorted(nodes)}")
        self.nodes = nodes


class RekeyFailure(ProtocolAbort):
    pass


class UnsupportedLeave(Exception):
    """Root departure dissolves the group; it is not a leave event."""


ROLE_ROOT = "root"
ROLE_CHECKER = "checker"
ROLE_MEMBER = "member"

@dataclass
class SessionKeys:
    """Result of a successful epoch: the group key and the root's local keys."""

    gk: KeyMaterial
    local_keys: dict[NodeId, KeyMaterial]
    epoch: int


@dataclass
class NodeState:
    """Everything a node knows; diagnostics live on the ProtocolNode instead."""

    my_id: NodeId
    master_key: KeyMaterial
    role: str = ROLE_MEMBER
    share: KeyMaterial | None = None            # S_i (S_Ch for the checker)
    intermediate: KeyMaterial | None = None     # K_i' last sent up
    subkey: KeyMaterial | None = None           # z
    session_key: KeyMaterial | None = None      # K == GK
    local_keys: dict[NodeId, KeyMaterial] = field(default_factory=dict)
    edge_keys: dict[NodeId, KeyMaterial] = field(default_factory=dict)
    # cached per child: (intermediate key, bare share) from its last step 3
    children_received: dict[NodeId, tuple[KeyMaterial, KeyMaterial]] = field(default_factory=dict)
    pending_nonces: dict[str, int] = field(default_factory=dict)
    seen_nonces: dict[NodeId, set[int]] = field(default_factory=dict)
    epoch: int = 0
    # tree context, maintained by the orchestrator
    parent_id: NodeId | None = None
    children: tuple[NodeId, ...] = ()
    root_id: NodeId = 0
    checker_id: NodeId | None = None
    # per-epoch exchange bookkeeping
    exchange_active: bool = False
    exchange_family: str = "auth"
    parent_channel_ready: bool = False
    pending_children: set[NodeId] = field(default_factory=set)
    pending_membership: tuple[int, bytes] | None = None
    expected_confirm: bytes | None = None
    confirmations: set[NodeId] = field(default_factory=set)
    confirm_failures: set[NodeId] = field(default_factory=set)
    rekey_tentative: KeyMaterial | None = None
    local_rekey_peer: dict[NodeId, tuple[int, KeyMaterial]] = field(default_factory=dict)

    def fingerprint(self) -> str:
        """Stable digest of key-relevant state, for byte-equality assertions."""
        h = hashlib.sha256()

        def put(tag, value):
            h.update(tag.encode())
            h.update(repr(value).encode())

        put("id", self.my_id)
        put("master", self.master_key.data)
        put("role", self.role)
        for name in ("share", "intermediate", "subkey", "session_key", "rekey_tentative"):
            v = getattr(self, name)
            put(name, None if v is None else v.data)
        put("local", sorted((k, v.data) for k, v in self.local_keys.items()))
        put("edge", sorted((k, v.data) for k, v in self.edge_keys.items()))
        put("childrecv", sorted((k, a.data, b.data) for k, (a, b) in self.children_received.items()))
        put("pending", sorted(self.pending_nonces.items()))
        put("seen", sorted((k, tuple(sorted(v))) for k, v in self.seen_nonces.items()))
        put("epoch", self.epoch)
        put("tree", (self.parent_id, self.children, self.root_id, self.checker_id))
        put("xchg", (self.exchange_active, self.exchange_family, self.parent_channel_ready,
                     tuple(sorted(self.pending_children))))
        put("memb", self.pending_membership)
        put("confirm", (self.expected_confirm, tuple(sorted(self.confirmations)),
                        tuple(sorted(self.confirm_failures))))
        put("lrk", sorted((k, (n, km.data)) for k, (n, km) in self.local_rekey_peer.items()))
        return h.hexdigest()


class ProtocolNode:
    """Single-owner actor wrapping a NodeState; step() is the only mutator."""

    def __init__(self, node_id: NodeId, suite: CipherSuite, master_key: KeyMaterial,
                 rng: random.Random, unsafe_skip_nonce_checks: bool = False):
        self.suite = suite
        self.rng = rng
        self.state = NodeState(my_id=node_id, master_key=master_key)
        self.nonces = NonceSource(node_id, rng)
        self.counters: dict[str, int] = {
            "integrity_failures": 0, "nonce_mismatch": 0, "unexpected": 0, "join_requests": 0,
        }
        # Test-only negative control: disables replay defenses.
        self.unsafe_skip_nonce_checks = unsafe_skip_nonce_checks

    # -- orchestrator-facing helpers ----------------------------------------

    @property
    def node_id(self) -> NodeId:
        return self.state.my_id

    def configure(self, parent: NodeId | None, children, root_id: NodeId,
                  checker_id: NodeId, role: str) -> None:
        st = self.state
        st.parent_id = parent
        st.children = tuple(sorted(children))
        st.root_id = root_id
        st.checker_id = checker_id
        st.role = role
        # drop caches for nodes that are no longer children
        st.children_received = {c: v for c, v in st.children_received.items() if c in st.children}
        # a member re-layered away from level 1 (or drafted as checker)
        # loses its pairwise local key
        if parent != root_id or role == ROLE_CHECKER:
            st.local_keys.pop(st.my_id, None)

    def refresh_share(self) -> None:
        self.state.share = self.suite.new_key(self.rng)

    def rotate_master_join(self, epoch_new: int, ids: list[NodeId]) -> None:
        self.state.master_key = derive_master_key(self.suite, self.state.master_key, epoch_new, ids)

    def arm_leave_rekey(self, epoch_new: int, ids: list[NodeId]) -> None:
        self.state.pending_membership = (epoch_new, _ids_blob(ids))

    def begin_exchange(self, family: str, expected_children: set[NodeId]) -> list[ProtocolMessage]:
        """Start this node's part of a (re)initiation: wait for the given
        children, then authenticate upward carrying the folded intermediate."""
        st = self.state
        st.exchange_family = family
        st.pending_children = set(expected_children)
        st.parent_channel_ready = False
        if st.role == ROLE_ROOT:
            st.exchange_active = False  # the root only ever receives
            self._maybe_finish_root()
            return []
        st.exchange_active = True
        step1 = MessageKind.AUTH_STEP1 if family == "auth" else MessageKind.JOIN_STEP_A
        nonce = self.nonces.fresh()
        st.pending_nonces["up_echo"] = nonce.value
        pt = wire.pack_auth_step1(st.my_id, st.parent_id, nonce)
        return [ProtocolMessage(step1, st.my_id, st.parent_id, (st.my_id, st.parent_id),
                                self.suite.encrypt(st.master_key, pt, self.rng))]

    def begin_agreement(self) -> list[ProtocolMessage]:
        st = self.state
        assert st.role == ROLE_ROOT and st.subkey is not None
        nonce = self.nonces.fresh()
        st.pending_nonces["agree_root"] = nonce.value
        pt = wire.pack_agree_step1(st.my_id, st.subkey, nonce)
        return [ProtocolMessage(MessageKind.AGREE_STEP1, st.my_id, BROADCAST, (st.my_id,),
                                self.suite.encrypt(st.master_key, pt, self.rng))]

    def begin_global_rekey(self) -> list[ProtocolMessage]:
        st = self.state
        assert st.role == ROLE_CHECKER and st.session_key is not None
        fresh = self.suite.new_key(self.rng)
        nonce = self.nonces.fresh()
        st.pending_nonces["rekey_ch"] = nonce.value
        gk_new = st.session_key ^ fresh
        st.rekey_tentative = gk_new
        st.expected_confirm = self.suite.digest(
            wire.confirm_digest_input(st.my_id, nonce.value + 1, gk_new))
        st.confirmations = set()
        st.confirm_failures = set()
        pt = wire.pack_rekey(st.my_id, fresh, nonce)
        return [ProtocolMessage(MessageKind.GLOBAL_REKEY, st.my_id, BROADCAST, (st.my_id,),
                                self.suite.encrypt(st.session_key, pt, self.rng))]

    def begin_local_rekey(self) -> list[ProtocolMessage]:
        st = self.state
        lk_old = st.local_keys.get(st.my_id)
        assert lk_old is not None, "no local key established with the root"
        fresh = self.suite.new_key(self.rng)
        nonce = self.nonces.fresh()
        lk_new = lk_old ^ fresh
        st.local_rekey_peer[st.root_id] = (nonce.value, lk_new)
        pt = wire.pack_rekey(st.my_id, fresh, nonce)
        msg1 = ProtocolMessage(MessageKind.LOCAL_REKEY_STEP1, st.my_id, st.root_id,
                               (st.my_id,), self.suite.encrypt(lk_old, pt, self.rng))
        digest = self.suite.digest(wire.confirm_digest_input(st.my_id, nonce.value + 1, lk_new))
        msg3 = ProtocolMessage(MessageKind.LOCAL_REKEY_STEP3, st.my_id, st.root_id,
                               (st.my_id,), digest)
        # the member commits its side now; the root confirms or the epoch aborts
        st.local_keys[st.my_id] = lk_new
        return [msg1, msg3]

    def begin_master_rekey(self, salt: KeyMaterial, epoch_new: int,
                           ids: list[NodeId], extra_receivers=()) -> list[ProtocolMessage]:
        """Root only: rotate with fresh entropy and pass it down the tree."""
        st = self.state
        assert st.role == ROLE_ROOT
        st.master_key = derive_master_key(self.suite, st.master_key, epoch_new, ids, salt.data)
        st.pending_membership = None
        return self._forward_master_rekey(salt, list(st.children) + list(extra_receivers))

    def join_request(self) -> list[ProtocolMessage]:
        return [ProtocolMessage(MessageKind.JOIN_REQUEST, self.state.my_id, BROADCAST,
                                (self.state.my_id,), b"")]

    def confirm_status(self, expected: set[NodeId]) -> set[NodeId]:
        """Members whose confirmation is missing or failed (checker view)."""
        st = self.state
        return (expected - st.confirmations) | st.confirm_failures

    # -- message handling ------------------------------------------------------

    def step(self, msg: ProtocolMessage, now: float = 0.0) -> list[ProtocolMessage]:
        st = self.state
        if msg.receiver not in (st.my_id, BROADCAST) or msg.sender == st.my_id:
            return []
        handler = {
            MessageKind.AUTH_STEP1: self._on_step1,
            MessageKind.JOIN_STEP_A: self._on_step1,
            MessageKind.AUTH_STEP2: self._on_step2,
            MessageKind.JOIN_STEP_B: self._on_step2,
            MessageKind.AUTH_STEP3: self._on_step3,
            MessageKind.JOIN_STEP_C: self._on_step3,
            MessageKind.AGREE_STEP1: self._on_agree1,
            MessageKind.AGREE_STEP2: self._on_agree2,
            MessageKind.AGREE_STEP3: self._on_confirm,
            MessageKind.JOIN_REQUEST: self._on_join_request,
            MessageKind.GLOBAL_REKEY: self._on_global_rekey,
            MessageKind.LOCAL_REKEY_STEP1: self._on_local_rekey1,
            MessageKind.LOCAL_REKEY_STEP3: self._on_local_rekey3,
            MessageKind.MASTER_REKEY: self._on_master_rekey,
        }.get(msg.kind)
        if handler is None:
            return self._drop("unexpected")
        return handler(msg)

    def _drop(self, counter: str) -> list[ProtocolMessage]:
        self.counters[counter] += 1
        return []

    def _decrypt(self, key: KeyMaterial, payload: bytes) -> bytes | None:
        try:
            return self.suite.decrypt(key, payload)
        except IntegrityFailure:
            return None

    def _nonce_fresh(self, peer: NodeId, value: int) -> bool:
        """Record-and-check replay defense for peer-issued nonces."""
        if self.unsafe_skip_nonce_checks:
            return True
        seen = self.state.seen_nonces.setdefault(peer, set())
        if value in seen:
            return False
        seen.add(value)
        return True

    def _edge_key(self, id_d: NodeId, id_a: NodeId, nonce_d: int, nonce_a: int) -> KeyMaterial:
        return self.suite.derive_key(b"edge", self.state.master_key.data,
                                     struct.pack(">IIQQ", id_d, id_a, nonce_d, nonce_a))

    # step 1: descendant opened an exchange towards us (we are the ascendant)
    def _on_step1(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        pt = self._decrypt(st.master_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            id_d, id_a, nonce_d = wire.unpack_auth_step1(pt)
        except wire.WireError:
            return self._drop("integrity_failures")
        if id_a != st.my_id or id_d != msg.sender or msg.ids != (id_d, id_a):
            return self._drop("unexpected")
        if not self._nonce_fresh(id_d, nonce_d):
            return self._drop("nonce_mismatch")
        nonce_a = self.nonces.fresh()
        st.pending_nonces[f"down_echo:{id_d}"] = nonce_a.value
        st.pending_nonces[f"down_seen:{id_d}"] = nonce_d
        step2 = MessageKind.AUTH_STEP2 if msg.kind == MessageKind.AUTH_STEP1 else MessageKind.JOIN_STEP_B
        pt2 = wire.pack_auth_step2(st.my_id, id_d, nonce_d + 1, nonce_a)
        return [ProtocolMessage(step2, st.my_id, id_d, (st.my_id, id_d),
                                self.suite.encrypt(st.master_key, pt2, self.rng))]

    # step 2: our ascendant answered; prove freshness and send the fold up
    # once every awaited child has reported
    def _on_step2(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        pt = self._decrypt(st.master_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            id_a, id_d, echoed, nonce_a = wire.unpack_auth_step2(pt)
        except wire.WireError:
            return self._drop("integrity_failures")
        if id_d != st.my_id or id_a != msg.sender or msg.sender != st.parent_id:
            return self._drop("unexpected")
        my_nonce = st.pending_nonces.get("up_echo")
        if my_nonce is None or echoed != my_nonce + 1:
            return self._drop("nonce_mismatch")
        if not self._nonce_fresh(id_a, nonce_a):
            return self._drop("nonce_mismatch")
        del st.pending_nonces["up_echo"]
        st.edge_keys[id_a] = self._edge_key(st.my_id, id_a, my_nonce, nonce_a)
        st.pending_nonces["up_final"] = nonce_a
        st.parent_channel_ready = True
        return self._maybe_send_step3()

    def _maybe_send_step3(self) -> list[ProtocolMessage]:
        st = self.state
        if not (st.exchange_active and st.parent_channel_ready and not st.pending_children):
            return []
        if st.role == ROLE_CHECKER:
            # the checker's exchange only authenticates and keys the root edge
            k_up = share = self.suite.zero_key()
        else:
            # children outside this round fold in from cache; a hole can only
            # occur on edge-keying pre-passes whose values the next round
            # overwrites anyway, so it folds as zero instead of crashing
            zero = self.suite.zero_key()
            parts = [st.share] + [st.children_received.get(c, (zero, zero))[0]
                                  for c in st.children]
            k_up = xor_combine(parts)
            st.intermediate = k_up
            share = st.share
        nonce_a = st.pending_nonces.pop("up_final")
        st.exchange_active = False
        st.parent_channel_ready = False
        step3 = MessageKind.AUTH_STEP3 if st.exchange_family == "auth" else MessageKind.JOIN_STEP_C
        pt = wire.pack_auth_step3(st.parent_id, st.my_id, nonce_a + 1, k_up, share)
        return [ProtocolMessage(step3, st.my_id, st.parent_id, (st.parent_id, st.my_id),
                                self.suite.encrypt(st.master_key, pt, self.rng))]

    # step 3: a descendant handed up its intermediate key
    def _on_step3(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        pt = self._decrypt(st.master_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            id_a, id_d, echoed, k_up, share = wire.unpack_auth_step3(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if id_a != st.my_id or id_d != msg.sender:
            return self._drop("unexpected")
        expected = st.pending_nonces.get(f"down_echo:{id_d}")
        if expected is None or echoed != expected + 1:
            return self._drop("nonce_mismatch")
        nonce_d = st.pending_nonces.pop(f"down_seen:{id_d}")
        del st.pending_nonces[f"down_echo:{id_d}"]
        st.edge_keys[id_d] = self._edge_key(id_d, st.my_id, nonce_d, expected)
        if id_d == st.checker_id:
            return []  # root<->checker exchange carries no key contribution
        if id_d not in st.children:
            return self._drop("unexpected")
        st.children_received[id_d] = (k_up, share)
        st.pending_children.discard(id_d)
        if st.role == ROLE_ROOT:
            self._maybe_finish_root()
            return []
        return self._maybe_send_step3()

    def _maybe_finish_root(self) -> None:
        """Fold the subtree intermediates into z and refresh the local keys."""
        st = self.state
        if st.pending_children or st.role != ROLE_ROOT:
            return
        if any(c not in st.children_received for c in st.children):
            return
        parts = [st.share] + [st.children_received[c][0] for c in st.children]
        st.subkey = xor_combine(parts)
        st.local_keys = {c: st.subkey ^ st.children_received[c][1] for c in st.children}

    # agreement step 1: root broadcast the subkey
    def _on_agree1(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        pt = self._decrypt(st.master_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            rid, z, nonce_root = wire.unpack_agree_step1(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if rid != msg.sender or rid != st.root_id:
            return self._drop("unexpected")
        if not self._nonce_fresh(rid, nonce_root):
            return self._drop("nonce_mismatch")
        st.subkey = z
        st.pending_nonces["agree_root"] = nonce_root
        if st.parent_id == st.root_id and st.role == ROLE_MEMBER and st.share is not None:
            st.local_keys[st.my_id] = z ^ st.share
        if st.role == ROLE_CHECKER:
            self.refresh_share()
            st.session_key = z ^ st.share
            nonce_ch = self.nonces.fresh()
            st.pending_nonces["rekey_ch"] = nonce_ch.value
            st.expected_confirm = self.suite.digest(
                wire.confirm_digest_input(st.my_id, nonce_ch.value + 1, st.session_key))
            st.confirmations = set()
            st.confirm_failures = set()
            pt2 = wire.pack_agree_step2(st.my_id, st.share, nonce_root + 1, nonce_ch)
            return [ProtocolMessage(MessageKind.AGREE_STEP2, st.my_id, BROADCAST, (st.my_id,),
                                    self.suite.encrypt(st.master_key, pt2, self.rng))]
        return []

    # agreement step 2: checker broadcast its share; compute K and confirm
    def _on_agree2(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        pt = self._decrypt(st.master_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            cid, share_ch, echoed, nonce_ch = wire.unpack_agree_step2(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if cid != msg.sender or cid != st.checker_id or st.subkey is None:
            return self._drop("unexpected")
        root_nonce = st.pending_nonces.get("agree_root")
        if root_nonce is None or echoed != root_nonce + 1:
            return self._drop("nonce_mismatch")
        if not self._nonce_fresh(cid, nonce_ch):
            return self._drop("nonce_mismatch")
        st.session_key = st.subkey ^ share_ch
        digest = self.suite.digest(
            wire.confirm_digest_input(cid, nonce_ch + 1, st.session_key))
        return [ProtocolMessage(MessageKind.AGREE_STEP3, st.my_id, cid, (st.my_id, cid), digest)]

    # confirmation digests flow to the checker for both agreement and rekey
    def _on_confirm(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        if st.role != ROLE_CHECKER or st.expected_confirm is None:
            return self._drop("unexpected")
        if msg.ids != (msg.sender, st.my_id):
            return self._drop("unexpected")
        if _digest_eq(msg.payload, st.expected_confirm):
            st.confirmations.add(msg.sender)
        else:
            st.confirm_failures.add(msg.sender)
        return []

    def _on_join_request(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        self.counters["join_requests"] += 1
        return []

    def _on_global_rekey(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        if st.session_key is None or st.role == ROLE_CHECKER:
            return self._drop("unexpected")
        pt = self._decrypt(st.session_key, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            cid, fresh, nonce_ch = wire.unpack_rekey(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if cid != msg.sender or cid != st.checker_id:
            return self._drop("unexpected")
        if not self._nonce_fresh(cid, nonce_ch):
            return self._drop("nonce_mismatch")
        st.session_key = st.session_key ^ fresh
        digest = self.suite.digest(
            wire.confirm_digest_input(cid, nonce_ch + 1, st.session_key))
        return [ProtocolMessage(MessageKind.AGREE_STEP3, st.my_id, cid, (st.my_id, cid), digest)]

    def _on_local_rekey1(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        if st.role != ROLE_ROOT:
            return self._drop("unexpected")
        lk_old = st.local_keys.get(msg.sender)
        if lk_old is None:
            return self._drop("unexpected")
        pt = self._decrypt(lk_old, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            jid, fresh, nonce_j = wire.unpack_rekey(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if jid != msg.sender:
            return self._drop("unexpected")
        if not self._nonce_fresh(jid, nonce_j):
            return self._drop("nonce_mismatch")
        st.local_rekey_peer[jid] = (nonce_j, lk_old ^ fresh)
        return []

    def _on_local_rekey3(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        if st.role != ROLE_ROOT or msg.sender not in st.local_rekey_peer:
            return self._drop("unexpected")
        nonce_j, lk_new = st.local_rekey_peer[msg.sender]
        want = self.suite.digest(wire.confirm_digest_input(msg.sender, nonce_j + 1, lk_new))
        if not _digest_eq(msg.payload, want):
            return self._drop("integrity_failures")
        del st.local_rekey_peer[msg.sender]
        st.local_keys[msg.sender] = lk_new
        return []

    def _on_master_rekey(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        st = self.state
        if st.pending_membership is None:
            return self._drop("unexpected")
        ek = st.edge_keys.get(msg.sender)
        if ek is None:
            return self._drop("unexpected")
        pt = self._decrypt(ek, msg.payload)
        if pt is None:
            return self._drop("integrity_failures")
        try:
            sid, salt, nonce = wire.unpack_rekey(pt, self.suite.key_bits // 8)
        except wire.WireError:
            return self._drop("integrity_failures")
        if sid != msg.sender:
            return self._drop("unexpected")
        if not self._nonce_fresh(sid, nonce):
            return self._drop("nonce_mismatch")
        epoch_new, ids_blob = st.pending_membership
        st.master_key = _derive_master_raw(self.suite, st.master_key, epoch_new, ids_blob, salt.data)
        st.pending_membership = None
        return self._forward_master_rekey(salt, st.children)

    def _forward_master_rekey(self, salt: KeyMaterial, receivers) -> list[ProtocolMessage]:
        st = self.state
        out = []
        for child in receivers:
            ek = st.edge_keys.get(child)
            if ek is None:
                continue  # unreachable edge: the orchestrator keys edges first
            nonce = self.nonces.fresh()
            pt = wire.pack_rekey(st.my_id, salt, nonce)
            out.append(ProtocolMessage(MessageKind.MASTER_REKEY, st.my_id, child,
                                       (st.my_id, child), self.suite.encrypt(ek, pt, self.rng)))
        return out


def _digest_eq(a: bytes, b: bytes) -> bool:
    import hmac as _h
    return _h.compare_digest(a, b)


def _ids_blob(ids: list[NodeId]) -> bytes:
    return b"".join(struct.pack(">I", i) for i in sorted(ids))


def _derive_master_raw(suite: CipherSuite, old: KeyMaterial, epoch: int,
                       ids_blob: bytes, salt: bytes) -> KeyMaterial:
    return suite.derive_key(b"master", old.data, struct.pack(">Q", epoch), ids_blob, salt)


def derive_master_key(suite: CipherSuite, old: KeyMaterial, epoch: int,
                      ids: list[NodeId], salt: bytes = b"") -> KeyMaterial:
    """Hash-chain master key update over the membership roster.

    Joins use the deterministic chain (the joiner is provisioned out of band);
    leaves must pass fresh root entropy as salt, carried to the remaining
    members over per-edge keys the departed member never saw.
    """
    return _derive_master_raw(suite, old, epoch, _ids_blob(ids), salt)


class Transport:
    """Lossless same-tick delivery with full wire capture.

    Keeps the global transcript (what a radio eavesdropper standing everywhere
    would hear), per-receiver delivery logs and the broadcast-only log used to
    build adversary oracle inputs. `latency` is a fixed per-message delivery
    delay; a session drops deliveries whose latency exceeds its edge timeout.
    Subclasses override mutate()/should_drop() for fault injection, or
    deliver() for radio semantics.
    """

    latency: float = 0.0

    def __init__(self):
        self.transcript = bytearray()
        self.messages: list[ProtocolMessage] = []
        self.delivered: dict[int, list[ProtocolMessage]] = {}
        self.broadcasts: list[ProtocolMessage] = []
        self.clock = 0.0

    def mutate(self, raw: bytes, msg: ProtocolMessage) -> bytes:
        return raw

    def should_drop(self, msg: ProtocolMessage) -> bool:
        return False

    def targets(self, msg: ProtocolMessage, members: set[int]) -> list[int]:
        if msg.receiver == BROADCAST:
            return sorted(m for m in members if m != msg.sender)
        return [msg.receiver] if msg.receiver in members else []

    def peek_targets(self, msg: ProtocolMessage, members: set[int]) -> list[int]:
        """Like targets() but with no side effects (no capture, no logs)."""
        return self.targets(msg, members)

    def deliver(self, msg: ProtocolMessage, members: set[int]) -> list[tuple[int, ProtocolMessage]]:
        raw = msg.to_bytes()
        self.transcript += raw
        self.messages.append(msg)
        if msg.receiver == BROADCAST:
            self.broadcasts.append(msg)
        if self.should_drop(msg):
            return []
        mutated = self.mutate(raw, msg)
        if mutated is not raw:
            try:
                msg = ProtocolMessage.from_bytes(mutated)
            except wire.WireError:
                return []
        out = []
        for t in self.targets(msg, members):
            self.delivered.setdefault(t, []).append(msg)
            out.append((t, msg))
        return out


class GroupSession:
    """Drives the node state machines through whole protocol epochs.

    Owns the tree, the connectivity graph snapshot, one ProtocolNode per group
    member (checker included) and a Transport. Each public operation either
    commits a new epoch (returning SessionKeys) or raises a ProtocolAbort
    after restoring every node to its pre-epoch state.
    """

    def __init__(self, graph: Graph, root: NodeId, members: set[NodeId], suite: CipherSuite,
                 seed: int, checker: NodeId | None = None, transport: Transport | None = None,
                 master_key: KeyMaterial | None = None, unsafe_skip_nonce_checks: bool = False,
                 edge_timeout: float = 5.0):
        self.suite = suite
        self.edge_timeout = edge_timeout
        self.seed = seed
        self.graph = {n: set(nbs) for n, nbs in graph.items()}
        self.root = root
        self.members = set(members)
        self.transport = transport if transport is not None else Transport()
        self.rng = random.Random(_sub_seed(seed, "session"))
        self.master_key = master_key if master_key is not None else suite.new_key(self.rng)
        self.checker = checker if checker is not None else select_checker(
            root, self.graph, self.rng, self.members)
        self.tree = build_tree(root, self.members, self.graph, self.checker)
        self.unsafe_skip_nonce_checks = unsafe_skip_nonce_checks
        self.nodes: dict[NodeId, ProtocolNode] = {}
        for m in sorted(self.members):
            self.nodes[m] = self._new_node(m, self.master_key)
        self._configure_all()
        self.epoch = 0
        self.keys: SessionKeys | None = None
        self.clock = 0.0

    # -- plumbing -------------------------------------------------------------

    def _new_node(self, node_id: NodeId, master: KeyMaterial) -> ProtocolNode:
        rng = random.Random(_sub_seed(self.seed, f"node:{node_id}"))
        return ProtocolNode(node_id, self.suite, master, rng,
                            unsafe_skip_nonce_checks=self.unsafe_skip_nonce_checks)

    def _configure_all(self) -> None:
        for nid, node in self.nodes.items():
            if nid == self.checker:
                node.configure(self.root, (), self.root, self.checker, ROLE_CHECKER)
            else:
                role = ROLE_ROOT if nid == self.root else ROLE_MEMBER
                node.configure(self.tree.parent.get(nid), self.tree.children.get(nid, ()),
                               self.root, self.checker, role)

    def _pump(self, initial: list[ProtocolMessage]) -> None:
        queue = deque(initial)
        late = self.transport.latency > self.edge_timeout
        while queue:
            msg = queue.popleft()
            self.transport.clock = self.clock
            deliveries = self.transport.deliver(msg, self.members)
            if late:
                continue  # nobody waits past the edge timeout; epoch will abort
            for rcv, delivered in deliveries:
                node = self.nodes.get(rcv)
                if node is not None:
                    queue.extend(node.step(delivered, self.clock + self.transport.latency))

    def _snapshot(self):
        return (copy.deepcopy({n: p.state for n, p in self.nodes.items()}),
                self.master_key, self.epoch, self.keys, copy.deepcopy(self.tree),
                self.checker, set(self.members),
                {n: set(v) for n, v in self.graph.items()})

    def _restore(self, snap) -> None:
        states, master, epoch, keys, tree, checker, members, graph = snap
        self.graph = graph
        self.members = members
        self.checker = checker
        self.tree = tree
        self.master_key = master
        self.epoch = epoch
        self.keys = keys
        for nid in list(self.nodes):
            if nid not in states:
                del self.nodes[nid]
        for nid, st in states.items():
            if nid in self.nodes:
                # anti-replay memory survives the rollback: nonces seen during
                # the aborted epoch must stay burned
                seen_now = self.nodes[nid].state.seen_nonces
                self.nodes[nid].state = st
                for peer, values in seen_now.items():
                    st.seen_nonces.setdefault(peer, set()).update(values)

    def _commit(self) -> SessionKeys:
        self.epoch += 1
        for node in self.nodes.values():
            node.state.epoch = self.epoch
        # close the checker's confirmation window so stale confirmation
        # replays can never poison a later epoch's verification
        ch = self.nodes[self.checker].state
        ch.expected_confirm = None
        ch.confirmations = set()
        ch.confirm_failures = set()
        root = self.nodes[self.root]
        self.keys = SessionKeys(gk=root.state.session_key,
                                local_keys=dict(root.state.local_keys),
                                epoch=self.epoch)
        return self.keys

    # -- oracle-facing views ---------------------------------------------------

    def share_ledger(self) -> dict[NodeId, KeyMaterial]:
        """Current contributory shares of every party, checker included."""
        out = {}
        for nid, node in self.nodes.items():
            if node.state.share is not None:
                out[nid] = node.state.share
        return out

    def gk_oracle(self) -> KeyMaterial:
        """Independent XOR fold of the share ledger; must equal the GK."""
        return xor_combine(list(self.share_ledger().values()))

    def current_secrets(self) -> set[bytes]:
        """Every key-material value currently live anywhere in the group."""
        out: set[bytes] = {self.master_key.data}
        for node in self.nodes.values():
            st = node.state
            for v in (st.share, st.intermediate, st.subkey, st.session_key):
                if v is not None:
                    out.add(v.data)
            out.update(v.data for v in st.local_keys.values())
            out.update(v.data for v in st.edge_keys.values())
        return out

    # -- protocol phases -------------------------------------------------------

    def run_key_initiation(self, shares: dict[NodeId, KeyMaterial] | None = None,
                           ) -> tuple[KeyMaterial, dict[NodeId, KeyMaterial]]:
        """Bottom-up auth on every tree edge; the root folds z and local keys.

        Member shares are drawn fresh unless an explicit share map is given
        (tests inject known values through it).
        """
        for m in sorted(self.members):
            if m != self.checker:
                if shares is not None:
                    self.nodes[m].state.share = shares[m]
                else:
                    self.nodes[m].refresh_share()
        msgs: list[ProtocolMessage] = []
        for m in sorted(self.members):
            node = self.nodes[m]
            if m == self.root:
                node.begin_exchange("auth", set(self.tree.children[m]))
            elif m == self.checker:
                msgs.extend(node.begin_exchange("auth", set()))
            else:
                msgs.extend(node.begin_exchange("auth", set(self.tree.children[m])))
        self._pump(msgs)
        root = self.nodes[self.root]
        if root.state.subkey is None:
            missing = {c for c in self.tree.children[self.root]
                       if c not in root.state.children_received}
            raise InitiationTimeout(missing or {self.root})
        return root.state.subkey, dict(root.state.local_keys)

    def run_session_agreement(self) -> KeyMaterial:
        """Root broadcasts z, checker answers with its share, all confirm."""
        self._pump(self.nodes[self.root].begin_agreement())
        checker = self.nodes[self.checker]
        expected = self.members - {self.checker}
        bad = checker.confirm_status(expected)
        if bad:
            raise CheckerVerificationFailure(bad)
        gk = checker.state.session_key
        if gk is None:
            raise CheckerVerificationFailure({self.checker})
        return gk

    def establish(self) -> SessionKeys:
        """First full epoch: key initiation then session agreement."""
        snap = self._snapshot()
        try:
            self.run_key_initiation()
            self.run_session_agreement()
            return self._commit()
        except ProtocolAbort:
            self._restore(snap)
            raise

    def _require_established(self) -> None:
        if self.keys is None:
            raise RekeyFailure("no established epoch; run establish() first")

    # -- membership events ------------------------------------------------------

    def member_join(self, joiner: NodeId, edges: set[NodeId]) -> SessionKeys:
        """Admit a node: rotate the master key, refresh its key path, re-agree."""
        if joiner in self.members:
            raise ValueError(f"node {joiner} is already a member")
        self._require_established()
        snap = self._snapshot()
        try:
            self.graph.setdefault(joiner, set())
            for e in edges:
                if e in self.graph:
                    self.graph[joiner].add(e)
                    self.graph[e].add(joiner)
            new_members = self.members | {joiner}
            ids = sorted(new_members)
            epoch_new = self.epoch + 1

            joiner_node = self._new_node(joiner, self.master_key)  # placeholder master
            self.nodes[joiner] = joiner_node
            self.members = new_members
            self._pump(joiner_node.join_request())

            # accept-all policy: everyone rolls the master chain forward, the
            # joiner is provisioned with the new key out of band
            for nid, node in self.nodes.items():
                if nid != joiner:
                    node.rotate_master_join(epoch_new, ids)
            self.master_key = derive_master_key(self.suite, self.master_key, epoch_new, ids)
            joiner_node.state.master_key = self.master_key

            self.tree = attach_member(self.tree, joiner, self.graph)
            self._configure_all()

            path = set(key_path(self.tree, joiner))
            self._run_path_refresh(fresh=path, reporters=path, family="join")
            self.run_session_agreement()
            return self._commit()
        except (ProtocolAbort, TreeError):
            self._restore(snap)
            raise

    def member_leave(self, leaver: NodeId) -> SessionKeys:
        """Expel a node: re-layer, rotate the master key with fresh entropy
        spread over per-edge keys, refresh affected paths, re-agree."""
        if leaver not in self.members:
            raise ValueError(f"node {leaver} is not a member")
        if leaver == self.root:
            raise UnsupportedLeave("the protocol initiator cannot leave")
        self._require_established()
        snap = self._snapshot()
        try:
            old_children = {n: tuple(c) for n, c in self.tree.children.items()}
            old_parent = dict(self.tree.parent)
            graph2 = {n: set(nbs) - {leaver} for n, nbs in self.graph.items() if n != leaver}

            if leaver == self.checker:
                # replace the checker with another one-hop neighbor of the
                # root and pull that member out of the tree body
                new_checker = select_checker(self.root, graph2, self.rng,
                                             self.members - {leaver})
                former_children = set(self.tree.children.get(new_checker, ()))
                remaining = self.members - {leaver}
                try:
                    new_tree = build_tree(self.root, remaining, graph2, new_checker)
                    dropped = set()
                except Unreachable as e:
                    dropped = e.nodes
                    new_tree = build_tree(self.root, remaining - dropped, graph2, new_checker)
                affected = {self.root} | set(key_path(self.tree, new_checker)[1:])
                affected |= {c for c in former_children if c in new_tree}
                self.tree = new_tree
                self.checker = new_checker
                self.nodes[new_checker].state.share = None
            else:
                det = detach_member(self.tree, leaver, graph2)
                self.tree = det.tree
                affected = set(det.affected)
                dropped = det.dropped

            self.graph = graph2
            del self.nodes[leaver]
            for d in dropped:
                self.nodes.pop(d, None)
            self.members = self.members - {leaver} - dropped
            ids = sorted(self.members)
            epoch_new = self.epoch + 1
            self._configure_all()

            # key any tree edge that appeared in the re-layering
            fresh_edges = [(c, p) for c, p in self.tree.parent.items()
                           if self.nodes[c].state.edge_keys.get(p) is None]
            msgs = []
            for child, parent in fresh_edges:
                msgs.extend(self.nodes[child].begin_exchange("auth", set()))
            self._pump(msgs)
            for child, parent in fresh_edges:
                if self.nodes[child].state.edge_keys.get(parent) is None:
                    raise InitiationTimeout({child})

            # fresh entropy rides the edge keys so the leaver cannot follow the chain
            salt = self.suite.new_key(self.rng)
            for nid, node in self.nodes.items():
                if nid != self.root:
                    node.arm_leave_rekey(epoch_new, ids)
            root = self.nodes[self.root]
            self._pump(root.begin_master_rekey(salt, epoch_new, ids,
                                               extra_receivers=(self.checker,)))
            stale = [nid for nid, node in self.nodes.items()
                     if node.state.pending_membership is not None]
            if stale:
                raise RekeyFailure(f"master rekey did not reach: {sorted(stale)}")
            self.master_key = root.state.master_key

            # every node that moved, lost a child or must hide material the
            # leaver saw re-reports its fold; only `affected` draw new shares
            reporters = set(affected)
            for n in self.tree.members():
                if old_children.get(n, ()) != tuple(self.tree.children.get(n, ())):
                    reporters.add(n)
                if old_parent.get(n) != self.tree.parent.get(n):
                    reporters.add(n)
            self._run_path_refresh(fresh=affected, reporters=reporters, family="join")
            self.run_session_agreement()
            return self._commit()
        except (ProtocolAbort, TreeError):
            self._restore(snap)
            raise

    def _run_path_refresh(self, fresh: set[NodeId], reporters: set[NodeId], family: str) -> None:
        """Refresh shares for `fresh`, re-fold every path touching `reporters`."""
        self._configure_all()
        fresh = {n for n in fresh if n in self.tree}
        reporters = {n for n in reporters if n in self.tree} | fresh
        involved: set[NodeId] = set()
        for n in reporters:
            involved.update(key_path(self.tree, n))
        for n in fresh:
            self.nodes[n].refresh_share()
        msgs: list[ProtocolMessage] = []
        for n in sorted(involved, key=lambda x: -self.tree.level[x]):
            expected = {c for c in self.tree.children.get(n, ()) if c in involved}
            msgs.extend(self.nodes[n].begin_exchange(family, expected))
        self._pump(msgs)
        root = self.nodes[self.root]
        missing = {c for c in root.state.children if c not in root.state.children_received}
        if root.state.pending_children or missing or root.state.subkey is None:
            raise InitiationTimeout(set(root.state.pending_children) | missing)

    # -- periodic rekeys ---------------------------------------------------------

    def periodic_global_rekey(self) -> SessionKeys:
        """Checker-driven GK ratchet: GK_new = GK_old xor fresh share."""
        if self.keys is None:
            raise RekeyFailure("no established session key to update")
        snap = self._snapshot()
        try:
            checker = self.nodes[self.checker]
            self._pump(checker.begin_global_rekey())
            expected = self.members - {self.checker}
            bad = checker.confirm_status(expected)
            if bad:
                raise RekeyFailure(f"global rekey unconfirmed by {sorted(bad)}")
            gk_new = checker.state.rekey_tentative
            checker.state.session_key = gk_new
            # absorb the ratchet into the checker's ledger entry so the XOR
            # oracle over shares keeps matching the live GK
            checker.state.share = checker.state.share ^ (gk_new ^ self.keys.gk)
            checker.state.rekey_tentative = None
            return self._commit()
        except ProtocolAbort:
            self._restore(snap)
            raise

    def periodic_local_rekey(self, member: NodeId) -> KeyMaterial:
        """Level-1 member ratchets its local key with the root: LK xor S''."""
        node = self.nodes.get(member)
        root = self.nodes[self.root]
        if member not in self.tree.children.get(self.root, ()):
            raise RekeyFailure(f"node {member} is not a level-1 member")
        if node is None or node.state.local_keys.get(member) is None:
            raise RekeyFailure(f"node {member} holds no local key with the root")
        snap = self._snapshot()
        try:
            self._pump(node.begin_local_rekey())
            lk_member = node.state.local_keys[member]
            lk_root = root.state.local_keys.get(member)
            if member in root.state.local_rekey_peer or lk_root is None or \
                    lk_root.data != lk_member.data:
                raise RekeyFailure(f"local rekey with {member} failed verification")
            self._commit()
            return lk_member
        except ProtocolAbort:
            self._restore(snap)
            raise


def _sub_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
