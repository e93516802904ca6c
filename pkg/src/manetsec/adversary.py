"""Adversary harness: eavesdropping, replay and membership-secrecy oracles.

The oracles are deliberately strong best-effort attackers. A departed or
joining member keeps every key it legitimately held, tries the public
master-key chain formula, decrypts whatever any of its keys open in the
transcript slice it is entitled to, and combines recovered subkeys and
checker shares into group-key candidates. The security goals hold exactly
when those candidate sets miss the real keys.

Visibility model (documented in SECURITY.md): a member sees messages
delivered to it plus broadcasts; after leaving it keeps hearing broadcast
traffic but not unicast exchanges between other parties.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crypto import CipherSuite, IntegrityFailure, KeyMaterial
from .protocol import GroupSession, derive_master_key
from .wire import MessageKind, ProtocolMessage
from . import wire

__all__ = [
    "NodeKnowledge",
    "capture_knowledge",
    "candidate_group_keys",
    "scan_for_secrets",
    "replay_once",
]


@dataclass
class NodeKnowledge:
    """Everything one party holds at capture time."""

    node_id: int
    keys: list[KeyMaterial] = field(default_factory=list)   # decryption-capable
    secrets: set[bytes] = field(default_factory=set)         # raw key values
    delivered: list[ProtocolMessage] = field(default_factory=list)
    epoch: int = 0


def capture_knowledge(session: GroupSession, node_id: int) -> NodeKnowledge:
    """Snapshot a member's key state and its delivered-message log."""
    node = session.nodes[node_id]
    st = node.state
    keys: list[KeyMaterial] = [st.master_key]
    for v in (st.session_key, st.subkey, st.share, st.intermediate):
        if v is not None:
            keys.append(v)
    keys.extend(st.local_keys.values())
    keys.extend(st.edge_keys.values())
    keys.extend(k for k, _ in st.children_received.values())
    keys.extend(s for _, s in st.children_received.values())
    know = NodeKnowledge(
        node_id=node_id,
        keys=keys,
        secrets={k.data for k in keys},
        delivered=list(session.transport.delivered.get(node_id, ())),
        epoch=session.epoch,
    )
    return know


def candidate_group_keys(suite: CipherSuite, keys: list[KeyMaterial],
                         messages: list[ProtocolMessage]) -> set[bytes]:
    """All group keys derivable from `keys` plus the given transcript slice.

    Decrypts every ciphertext under every key, pairs recovered subkeys with
    recovered checker shares, and follows XOR ratchets whose carrier it can
    open. Digest payloads contribute nothing (preimage resistance assumed).
    """
    kb = suite.key_bits // 8
    candidates: set[bytes] = set()
    subkeys: list[KeyMaterial] = [k for k in keys]
    pool = list(dict.fromkeys(k.data for k in keys))  # dedup, keep order

    def try_open(payload: bytes):
        for kd in pool:
            try:
                return KeyMaterial(kd), suite.decrypt(KeyMaterial(kd), payload)
            except IntegrityFailure:
                continue
        return None, None

    for msg in messages:
        if msg.kind in wire.DIGEST_KINDS or msg.kind == MessageKind.JOIN_REQUEST:
            continue
        key, pt = try_open(msg.payload)
        if pt is None:
            continue
        try:
            if msg.kind == MessageKind.AGREE_STEP1:
                _, z, _ = wire.unpack_agree_step1(pt, kb)
                subkeys.append(z)
                candidates.add(z.data)
            elif msg.kind == MessageKind.AGREE_STEP2:
                _, share, _, _ = wire.unpack_agree_step2(pt, kb)
                for z in subkeys:
                    candidates.add((z ^ share).data)
            elif msg.kind in (MessageKind.GLOBAL_REKEY, MessageKind.LOCAL_REKEY_STEP1,
                              MessageKind.MASTER_REKEY):
                _, fresh, _ = wire.unpack_rekey(pt, kb)
                # the carrier key itself ratchets: new = old xor fresh
                candidates.add((key ^ fresh).data)
                subkeys.append(fresh)
            elif msg.kind in (MessageKind.AUTH_STEP3, MessageKind.JOIN_STEP_C):
                _, _, _, k_up, share = wire.unpack_auth_step3(pt, kb)
                subkeys.extend((k_up, share))
        except wire.WireError:
            continue
    # opportunistic pairwise XOR of everything recovered, the strongest
    # algebra available to a passive holder of partial material
    raw = list(dict.fromkeys(k.data for k in subkeys))
    if len(raw) <= 64:
        for i in range(len(raw)):
            for j in range(i + 1, len(raw)):
                candidates.add(bytes(a ^ b for a, b in zip(raw[i], raw[j])))
    candidates.update(raw)
    return candidates


def leaver_master_chain_guesses(suite: CipherSuite, know: NodeKnowledge,
                                epoch_after: int, roster_after: list[int]) -> list[KeyMaterial]:
    """The attack the leave design must defeat: replay the public hash-chain
    master-key update with every key the leaver holds."""
    return [derive_master_key(suite, k, epoch_after, roster_after) for k in know.keys]


def forward_secrecy_candidates(suite: CipherSuite, know: NodeKnowledge,
                               post_broadcasts: list[ProtocolMessage],
                               epoch_after: int, roster_after: list[int]) -> set[bytes]:
    """Group keys a leaver can reach from its history plus later broadcasts."""
    keys = list(know.keys)
    keys.extend(leaver_master_chain_guesses(suite, know, epoch_after, roster_after))
    return candidate_group_keys(suite, keys, know.delivered + post_broadcasts)


def backward_secrecy_candidates(suite: CipherSuite, know: NodeKnowledge,
                                pre_broadcasts: list[ProtocolMessage]) -> set[bytes]:
    """Group keys a joiner can reach from its state plus earlier broadcasts."""
    return candidate_group_keys(suite, list(know.keys), pre_broadcasts + know.delivered)


def scan_for_secrets(transcript: bytes, secrets: set[bytes], width: int = 16) -> int:
    """Count byte-aligned occurrences of any secret in the raw wire bytes."""
    if not secrets:
        return 0
    widths = {len(s) for s in secrets}
    assert widths == {width}, "secret scan expects uniform key width"
    t = bytes(transcript)
    hits = 0
    for i in range(len(t) - width + 1):
        if t[i : i + width] in secrets:
            hits += 1
    return hits


def replay_once(session: GroupSession, rng: random.Random) -> bool:
    """Re-inject one previously sent message; True if any key state changed."""
    msgs = session.transport.messages
    if not msgs:
        return False
    msg = msgs[rng.randrange(len(msgs))]
    targets = session.transport.peek_targets(msg, session.members)
    victims = [t for t in targets if t in session.nodes]
    if not victims:
        return False
    before = {v: session.nodes[v].state.fingerprint() for v in victims}
    for v in victims:
        session.nodes[v].step(msg)  # discard any output: state is the question
    after = {v: session.nodes[v].state.fingerprint() for v in victims}
    return before != after


# -- whole-suite driver ----------------------------------------------------------

@dataclass
class SecuritySuiteReport:
    epochs: int = 0
    transcript_bytes: int = 0
    transcript_hits: int = 0
    replay_trials: int = 0
    replay_failures: int = 0
    leaver_trials: int = 0
    leaver_breaks: int = 0
    joiner_trials: int = 0
    joiner_breaks: int = 0
    elapsed: float = 0.0

    def verdicts(self) -> dict[str, bool]:
        return {
            "key_secrecy": self.transcript_hits == 0,
            "replay_resistance": self.replay_failures == 0,
            "forward_secrecy": self.leaver_breaks == 0,
            "backward_secrecy": self.joiner_breaks == 0,
        }

    def all_passed(self) -> bool:
        return all(self.verdicts().values())


def run_security_suite(seed: int, suite: CipherSuite | None = None, cycles: int = 1000,
                       replay_trials: int = 100, weaken_nonce_check: bool = False,
                       ) -> SecuritySuiteReport:
    """Exercise the four security goals on a churning 8-node group.

    Every cycle expels one member (forward-secrecy oracle against the keys
    agreed right after) and admits a replacement (backward-secrecy oracle
    against every key agreed before). The raw wire transcript is scanned for
    every secret that was ever live, and previously delivered messages are
    re-injected to confirm no node state moves.
    """
    import time as _time

    t0 = _time.monotonic()
    suite = suite or CipherSuite()
    rng = random.Random(seed)
    base = 8
    graph: dict[int, set[int]] = {i: set() for i in range(base)}
    ring = [(i, (i + 1) % base) for i in range(base)]
    chords = [(0, 2), (0, 4), (1, 5), (3, 7), (2, 6)]
    for a, b in ring + chords:
        graph[a].add(b)
        graph[b].add(a)

    session = GroupSession(graph, root=0, members=set(range(base)), suite=suite,
                           seed=seed, unsafe_skip_nonce_checks=weaken_nonce_check)
    report = SecuritySuiteReport()
    session.establish()
    report.epochs = 1
    all_secrets: set[bytes] = set(session.current_secrets())
    historical_gks: list[bytes] = [session.keys.gk.data]
    next_id = base

    for _ in range(cycles):
        candidates = sorted(session.members - {session.root})
        victim = candidates[rng.randrange(len(candidates))]
        former_edges = set(session.graph[victim])
        know = capture_knowledge(session, victim)
        mark = len(session.transport.broadcasts)
        keys_after = session.member_leave(victim)
        report.epochs += 1
        all_secrets |= session.current_secrets()

        post = session.transport.broadcasts[mark:]
        cands = forward_secrecy_candidates(suite, know, post, session.epoch,
                                           sorted(session.members))
        report.leaver_trials += 1
        if keys_after.gk.data in cands or keys_after.gk.data in know.secrets:
            report.leaver_breaks += 1

        pre = session.transport.broadcasts[-30:]
        joiner = next_id
        next_id += 1
        edges = {e for e in former_edges if e in session.members}
        session.member_join(joiner, edges)
        report.epochs += 1
        all_secrets |= session.current_secrets()
        historical_gks.append(session.keys.gk.data)

        know_j = capture_knowledge(session, joiner)
        cands_j = backward_secrecy_candidates(suite, know_j, pre)
        report.joiner_trials += 1
        if any(g in cands_j or g in know_j.secrets for g in historical_gks[:-1]):
            report.joiner_breaks += 1

    transcript = bytes(session.transport.transcript)
    report.transcript_bytes = len(transcript)
    report.transcript_hits = scan_for_secrets(transcript, all_secrets, suite.key_bits // 8)

    replay_rng = random.Random(seed ^ 0x5EED1E55)
    for _ in range(replay_trials):
        report.replay_trials += 1
        if replay_once(session, replay_rng):
            report.replay_failures += 1
    # targeted probe: re-inject the latest fresh-keyed exchange opener, the
    # replay a weakened build always mishandles
    for msg in reversed(session.transport.messages):
        if msg.kind in (MessageKind.AUTH_STEP1, MessageKind.JOIN_STEP_A) \
                and msg.receiver in session.nodes:
            node = session.nodes[msg.receiver]
            before = node.state.fingerprint()
            node.step(msg)
            report.replay_trials += 1
            if node.state.fingerprint() != before:
                report.replay_failures += 1
            break
    report.elapsed = _time.monotonic() - t0
    return report
