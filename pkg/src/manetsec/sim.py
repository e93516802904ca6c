"""Deterministic simulated MANET: placement, random-waypoint mobility,
range-based radio delivery with adversary hooks, a parametric traffic-feature
stream for packet-dropping attackers, and whole-scenario orchestration.

The radio layer replaces none of the protocol logic: group key epochs run
through the same node state machines, only message delivery goes through
range checks, flooding for broadcasts, eavesdropper capture and replayer
re-injection. Feature vectors come from a parametric generator (baseline
distributions, with per-feature shifts when a source's route crosses an
active dropper) instead of a full TCP/routing stack; effect sizes are
configuration, not claims.

Everything is driven by one scenario seed: same config and seed, same bytes
out.
"""

from __future__ import annotations

import hashlib
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .crypto import CipherSuite, NonceSource
from .keytree import Graph, NodeId, TreeError
from .protocol import GroupSession, ProtocolAbort, Transport
from . import adversary as adv
from . import esom
from . import response as resp
from .wire import BROADCAST, ProtocolMessage

DROPPER = "dropper"
EAVESDROPPER = "eavesdropper"
REPLAYER = "replayer"


class ScenarioError(Exception):
    """Configuration problem; message carries file/line context when known."""


@dataclass
class MobilityConfig:
    speed_min: float = 0.0
    speed_max: float = 10.0
    pause_time: float = 0.0

    def validate(self):
        if not 0 <= self.speed_min <= self.speed_max:
            raise ScenarioError("need 0 <= speed_min <= speed_max")
        if self.pause_time < 0:
            raise ScenarioError("pause_time must be non-negative")


@dataclass
class TrafficConfig:
    generators: int = 20
    destinations: int = 10
    mean_payload: float = 512.0
    attack_start: float = 50.0
    attack_end: float = 200.0
    sample_interval: float = 1.0
    effect_size: float = 4.0

    def validate(self, duration: float):
        if self.generators < 1 or self.destinations < 1:
            raise ScenarioError("traffic needs at least one generator and destination")
        if not 0 <= self.attack_start <= self.attack_end <= duration:
            raise ScenarioError("attack window must fit inside the run duration")
        if self.sample_interval <= 0:
            raise ScenarioError("sample_interval must be positive")


@dataclass
class AdversaryRole:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ScheduleEvent:
    time: float
    kind: str          # "join" | "leave" | "global_rekey" | "local_rekey"
    node: NodeId | None = None


@dataclass
class ScenarioConfig:
    node_count: int = 50
    area_width: float = 1800.0
    area_height: float = 1000.0
    range_m: float = 250.0
    duration: float = 200.0
    root: NodeId = 0
    key_bits: int = 128
    cipher: str = "aesgcm"
    hash_name: str = "sha256"
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    droppers: tuple[NodeId, ...] = ()
    eavesdroppers: tuple[NodeId, ...] = ()
    replayers: tuple[NodeId, ...] = ()
    replay_at: tuple[float, ...] = ()
    som: esom.SomConfig = field(default_factory=lambda: esom.SomConfig(rows=12, cols=16, epochs=10))
    coverage_window: int = 30
    latency: float = 0.0            # fixed delivery delay, seconds
    protocol_timeout: float = 5.0   # per-edge exchange patience, seconds
    schedule: tuple[ScheduleEvent, ...] = ()
    pause_times: tuple[float, ...] = ()      # sweep; empty = single mobility.pause_time
    dropper_counts: tuple[int, ...] = ()     # sweep; empty = the explicit droppers list
    seed: int | None = None

    def validate(self):
        if self.node_count < 2:
            raise ScenarioError("need at least two nodes")
        if self.area_width <= 0 or self.area_height <= 0 or self.range_m <= 0:
            raise ScenarioError("area and range must be positive")
        if not 0 <= self.root < self.node_count:
            raise ScenarioError("root must be one of the initial node ids")
        try:
            CipherSuite(self.cipher, self.hash_name, self.key_bits)
        except ValueError as e:
            raise ScenarioError(str(e)) from None
        self.mobility.validate()
        self.traffic.validate(self.duration)
        self.som.validate()
        for group in (self.droppers, self.eavesdroppers, self.replayers):
            for n in group:
                if not 0 <= n < self.node_count:
                    raise ScenarioError(f"adversary id {n} outside the initial roster")
        for ev in self.schedule:
            if not 0 <= ev.time <= self.duration:
                raise ScenarioError(f"schedule event at {ev.time} outside the run")
        for c in self.dropper_counts:
            if c > self.node_count - 2:
                raise ScenarioError("dropper sweep count exceeds usable nodes")


@dataclass
class World:
    """Mutable simulation state; advance with mobility_step."""

    ids: list[NodeId]
    positions: np.ndarray          # (n, 2) meters
    waypoints: np.ndarray          # (n, 2)
    speeds: np.ndarray             # (n,) m/s
    pause_until: np.ndarray        # (n,) seconds
    area: tuple[float, float]
    range_m: float
    mobility: MobilityConfig
    rng: np.random.Generator
    adversaries: dict[NodeId, AdversaryRole] = field(default_factory=dict)
    time: float = 0.0

    def index(self, node: NodeId) -> int:
        return self.ids.index(node)

    def add_node(self, node: NodeId, position: np.ndarray) -> None:
        self.ids.append(node)
        self.positions = np.vstack([self.positions, position[None, :]])
        self.waypoints = np.vstack([self.waypoints, position[None, :]])
        self.speeds = np.append(self.speeds, 0.0)
        self.pause_until = np.append(self.pause_until, self.time + self.mobility.pause_time)


def init_world(config: ScenarioConfig, seed: int) -> World:
    """Uniform random placement; every node starts in its initial pause."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    n = config.node_count
    pos = np.column_stack([
        rng.uniform(0.0, config.area_width, size=n),
        rng.uniform(0.0, config.area_height, size=n),
    ])
    world = World(
        ids=list(range(n)),
        positions=pos,
        waypoints=pos.copy(),
        speeds=np.zeros(n),
        pause_until=np.full(n, config.mobility.pause_time, dtype=float),
        area=(config.area_width, config.area_height),
        range_m=config.range_m,
        mobility=config.mobility,
        rng=rng,
    )
    for d in config.droppers:
        world.adversaries[d] = AdversaryRole(DROPPER)
    for e in config.eavesdroppers:
        world.adversaries[e] = AdversaryRole(EAVESDROPPER)
    for r in config.replayers:
        world.adversaries[r] = AdversaryRole(REPLAYER, {"at": list(config.replay_at)})
    return world


def mobility_step(world: World, dt: float) -> World:
    """Random waypoint: head to the target, pause on arrival, pick anew."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = world.mobility
    w, h = world.area
    for i in range(len(world.ids)):
        if world.time < world.pause_until[i]:
            continue
        to_go = world.waypoints[i] - world.positions[i]
        dist = math.hypot(*to_go)
        step = world.speeds[i] * dt
        if dist <= step or dist == 0.0:
            world.positions[i] = world.waypoints[i]
            world.pause_until[i] = world.time + m.pause_time
            world.waypoints[i] = (world.rng.uniform(0.0, w), world.rng.uniform(0.0, h))
            world.speeds[i] = world.rng.uniform(m.speed_min, m.speed_max)
        else:
            world.positions[i] += to_go * (step / dist)
    world.time += dt
    return world


def connectivity(world: World) -> Graph:
    """Undirected in-range adjacency; the 250 m boundary itself connects."""
    pos = world.positions
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    within = d2 <= world.range_m * world.range_m
    graph: Graph = {nid: set() for nid in world.ids}
    ii, jj = np.nonzero(within)
    for a, b in zip(ii, jj):
        if a != b:
            graph[world.ids[a]].add(world.ids[b])
    return graph


class RadioTransport(Transport):
    """Range-checked delivery over the live world.

    Each radio transmission reaches exactly the nodes within range of the
    transmitter. Unicasts to a distant receiver are relayed along the
    shortest in-range path (the ad hoc routing layer such networks run),
    broadcasts flood hop-by-hop through the connected component. Adversaries
    listen per hop: eavesdroppers record every message some transmitting hop
    put in their range, replayers store what they hear for later
    re-injection. Droppers run the protocol faithfully, so control messages
    are never dropped here.
    """

    def __init__(self, world: World):
        super().__init__()
        self.world = world
        self.captured: dict[NodeId, list[ProtocolMessage]] = {}
        self.undelivered = 0

    def _component(self, start: NodeId, graph: Graph) -> set[NodeId]:
        seen = {start}
        frontier = deque([start])
        while frontier:
            n = frontier.popleft()
            for nb in graph.get(n, ()):
                if nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        return seen

    def _capture(self, hearers, msg: ProtocolMessage) -> None:
        for nid, role in self.world.adversaries.items():
            if role.kind in (EAVESDROPPER, REPLAYER) and nid in hearers:
                self.captured.setdefault(nid, []).append(msg)

    def targets(self, msg: ProtocolMessage, members: set[int]) -> list[int]:
        out, hearers, reachable = self._resolve(msg, members)
        self._capture(hearers, msg)
        if not reachable:
            self.undelivered += 1
        return out

    def peek_targets(self, msg: ProtocolMessage, members: set[int]) -> list[int]:
        return self._resolve(msg, members)[0]

    def _resolve(self, msg: ProtocolMessage, members: set[int]):
        graph = connectivity(self.world)
        if msg.receiver == BROADCAST:
            component = self._component(msg.sender, graph) if msg.sender in graph else set()
            return (sorted(m for m in members if m != msg.sender and m in component),
                    component, True)
        route = (shortest_route(graph, msg.sender, msg.receiver)
                 if msg.sender in graph and msg.receiver in graph else None)
        if route is None or msg.receiver not in members:
            return [], set(graph.get(msg.sender, ())) | {msg.sender}, False
        hearers: set[NodeId] = set()
        for hop in route[:-1]:  # every forwarding hop transmits once
            hearers.add(hop)
            hearers.update(graph.get(hop, ()))
        return [msg.receiver], hearers, True


# -- parametric feature stream -------------------------------------------------

_BASELINES = {
    "nav": (0.30, 0.05),
    "tx_rate": (40.0, 5.0),
    "rx_rate": (38.0, 5.0),
    "rts_retx_rate": (0.05, 0.015),
    "data_retx_rate": (0.05, 0.015),
    "active_neighbors": (0.0, 0.5),   # mean comes from the live degree
    "forwarding_nodes": (0.0, 0.5),   # mean comes from the live route length
}


def shortest_route(graph: Graph, src: NodeId, dst: NodeId) -> list[NodeId] | None:
    """Lowest-ID BFS route; None when the destination is unreachable."""
    if src == dst:
        return [src]
    prev: dict[NodeId, NodeId] = {src: src}
    frontier = deque([src])
    while frontier:
        n = frontier.popleft()
        for nb in sorted(graph.get(n, ())):
            if nb not in prev:
                prev[nb] = n
                if nb == dst:
                    path = [dst]
                    while path[-1] != src:
                        path.append(prev[path[-1]])
                    return path[::-1]
                frontier.append(nb)
    return None


def traffic_pairs(members: list[NodeId], traffic: TrafficConfig) -> list[tuple[NodeId, NodeId]]:
    """Deterministic source/destination assignment from the sorted roster."""
    members = sorted(members)
    sources = members[: min(traffic.generators, len(members))]
    dests = members[-min(traffic.destinations, len(members)):]
    return [(s, dests[i % len(dests)]) for i, s in enumerate(sources)]


def generate_features(world: World, graph: Graph, traffic: TrafficConfig,
                      pairs: list[tuple[NodeId, NodeId]], rng: np.random.Generator,
                      ) -> dict[NodeId, tuple[np.ndarray, bool]]:
    """One interval of per-source samples plus ground truth.

    A source is under attack when the clock is inside the attack window and
    some intermediate hop of its current route is a dropper; then rx_rate and
    forwarding count shift down and the data retransmission rate shifts up by
    effect_size standard deviations.
    """
    t = world.time
    in_window = traffic.attack_start <= t < traffic.attack_end
    payload_scale = traffic.mean_payload / 512.0
    out: dict[NodeId, tuple[np.ndarray, bool]] = {}
    for src, dst in pairs:
        route = shortest_route(graph, src, dst)
        hops = len(route) - 1 if route else 0
        intermediates = route[1:-1] if route else []
        attacked = bool(in_window and any(
            world.adversaries.get(h, AdversaryRole("")).kind == DROPPER
            for h in intermediates))
        draw = {name: rng.normal(mu, sd) for name, (mu, sd) in _BASELINES.items()}
        vec = np.array([
            max(draw["nav"] * payload_scale, 0.0),
            max(draw["tx_rate"], 0.0),
            max(draw["rx_rate"], 0.0),
            min(max(draw["rts_retx_rate"], 0.0), 1.0),
            min(max(draw["data_retx_rate"], 0.0), 1.0),
            max(len(graph.get(src, ())) + draw["active_neighbors"], 0.0),
            max(hops + draw["forwarding_nodes"], 0.0),
        ])
        if attacked:
            eff = traffic.effect_size
            vec[2] = max(vec[2] - eff * _BASELINES["rx_rate"][1], 0.0)
            vec[4] = min(max(vec[4] + eff * _BASELINES["data_retx_rate"][1], 0.0), 1.0)
            vec[6] = max(vec[6] - eff * _BASELINES["forwarding_nodes"][1], 0.0)
        out[src] = (vec, attacked)
    return out


# -- scenario orchestration -----------------------------------------------------

@dataclass
class MetricsReport:
    columns: tuple[str, ...]
    rows: list[dict]
    events: list[tuple[float, str, object, object, str]]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = []
            for c in self.columns:
                v = row.get(c)
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(f"{v:.6g}")
                else:
                    cells.append(str(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def trace_text(self) -> str:
        return resp.format_events(self.events)


_COLUMNS = (
    "pause_time", "dropper_count", "members", "unreachable",
    "epochs_attempted", "epochs_succeeded", "epochs_aborted",
    "train_samples", "test_samples",
    "detection_rate", "false_alarm_rate", "unclassified_fraction",
    "alarms", "quarantined_nodes", "tamper_events",
    "eavesdrop_secret_hits", "replay_state_changes", "undelivered_unicasts",
)


def run_scenario(config: ScenarioConfig, seed: int | None = None) -> MetricsReport:
    """Execute every sweep cell of the scenario; one metrics row per cell."""
    config.validate()
    if seed is None:
        seed = config.seed
    if seed is None:
        raise ScenarioError("a seed is required for a reproducible run")
    pause_values = config.pause_times or (config.mobility.pause_time,)
    dropper_values = config.dropper_counts or (None,)
    rows, events = [], []
    for pause in pause_values:
        for dcount in dropper_values:
            cell_cfg = replace(config, mobility=replace(config.mobility, pause_time=pause))
            if dcount is not None:
                usable = [n for n in range(config.node_count) if n != config.root]
                cell_cfg = replace(cell_cfg, droppers=tuple(usable[:dcount]))
            cell_seed = _cell_seed(seed, pause, dcount)
            row, ev = _run_cell(cell_cfg, cell_seed)
            row["pause_time"] = pause
            row["dropper_count"] = len(cell_cfg.droppers)
            rows.append(row)
            events.extend(ev)
    return MetricsReport(columns=_COLUMNS, rows=rows, events=events)


def _cell_seed(seed: int, pause: float, dcount) -> int:
    tag = f"{seed}/{pause}/{dcount}".encode()
    return int.from_bytes(hashlib.sha256(tag).digest()[:8], "big")


def _member_subgraph(graph: Graph, members: set[NodeId]) -> Graph:
    return {n: (graph.get(n, set()) & members) for n in members}


def _run_cell(config: ScenarioConfig, seed: int):
    world = init_world(config, seed)
    suite = CipherSuite(config.cipher, config.hash_name, config.key_bits)
    feat_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
    events: list[tuple[float, str, object, object, str]] = []
    row: dict = {c: None for c in _COLUMNS}

    graph = connectivity(world)
    component = _reachable(config.root, graph)
    members = set(world.ids) & component
    unreachable = set(world.ids) - members
    transport = RadioTransport(world)
    transport.latency = config.latency

    # the checker sits outside the tree, so members that can only reach the
    # root through it would fall out of the group; the run picks the
    # least-partitioning one-hop neighbor (the root may reselect checkers)
    session = None
    if len(members) > 1:
        checker, stranded = _least_partitioning_checker(config.root, graph, members)
        unreachable |= stranded
        members -= stranded
        session = GroupSession(_member_subgraph(graph, members), config.root, members,
                               suite, seed, transport=transport, checker=checker,
                               edge_timeout=config.protocol_timeout)
    else:
        members = set()
        events.append((0.0, "epoch_abort", "establish", None,
                       "root is isolated; no group can form"))
    for n in sorted(unreachable):
        events.append((0.0, "out_of_group", n, None, "no tree path to the root"))
    epochs_attempted = epochs_succeeded = epochs_aborted = 0
    secrets: set[bytes] = set()

    def attempt(label, fn):
        nonlocal epochs_attempted, epochs_succeeded, epochs_aborted
        epochs_attempted += 1
        try:
            fn()
            epochs_succeeded += 1
            secrets.update(session.current_secrets())
            events.append((world.time, label, session.epoch, None, "epoch committed"))
            return True
        except (ProtocolAbort, TreeError) as e:
            epochs_aborted += 1
            events.append((world.time, "epoch_abort", label, None, str(e)))
            return False

    if session is not None:
        attempt("establish", session.establish)
        events.append((0.0, "tree_built", session.root, session.checker,
                       f"height={session.tree.height} members={len(session.tree.members())}"))
    else:
        epochs_attempted += 1
        epochs_aborted += 1

    schedule = sorted(config.schedule, key=lambda e: (e.time, e.kind, e.node or -1))
    due = deque(schedule)
    replay_due = deque(sorted(config.replay_at))
    replay_changes = 0
    samples: list[tuple[NodeId, np.ndarray, bool]] = []

    t = 0.0
    while t < config.duration:
        graph = connectivity(world)
        while due and due[0].time <= t:
            ev = due.popleft()
            if session is not None:
                _apply_schedule_event(ev, session, world, graph, config, events, attempt)
                graph = connectivity(world)
        while replay_due and replay_due[0] <= t:
            replay_due.popleft()
            if session is not None:
                replay_changes += _replayers_fire(session, world, transport, events)
        active = sorted(session.members) if session is not None else sorted(world.ids)
        pairs = traffic_pairs(active, config.traffic)
        for src, (vec, attacked) in generate_features(
                world, graph, config.traffic, pairs, feat_rng).items():
            samples.append((src, vec, attacked))
        mobility_step(world, config.traffic.sample_interval)
        t = world.time

    # detector: stratified even/odd split so both halves see both phases
    row.update(_detect_and_respond(config, suite, session, world, samples, events, seed))

    # adversary verdicts; unscheduled replayers dump their whole capture at
    # the end of the run
    if session is not None and not config.replay_at:
        replay_changes += _replayers_fire(session, world, transport, events)
    eaves_hits = 0
    width = suite.key_bits // 8
    for nid, role in world.adversaries.items():
        if role.kind == EAVESDROPPER:
            blob = b"".join(m.to_bytes() for m in transport.captured.get(nid, []))
            eaves_hits += adv.scan_for_secrets(blob, secrets, width) if secrets else 0

    row.update({
        "members": len(session.members) if session is not None else 0,
        "unreachable": len(unreachable),
        "epochs_attempted": epochs_attempted,
        "epochs_succeeded": epochs_succeeded,
        "epochs_aborted": epochs_aborted,
        "eavesdrop_secret_hits": eaves_hits,
        "replay_state_changes": replay_changes,
        "undelivered_unicasts": transport.undelivered,
    })
    return row, events


def _least_partitioning_checker(root: NodeId, graph: Graph,
                                members: set[NodeId]) -> tuple[NodeId, set[NodeId]]:
    """Checker candidate whose tree exclusion strands the fewest members."""
    candidates = sorted(n for n in graph.get(root, ()) if n in members)
    if not candidates:
        raise ScenarioError(f"root {root} has no one-hop neighbor to act as checker")
    best: tuple[int, NodeId, set[NodeId]] | None = None
    for cand in candidates:
        body = members - {cand}
        sub = {n: (graph.get(n, set()) & body) for n in body}
        stranded = body - _reachable(root, sub)
        if best is None or (len(stranded), cand) < (best[0], best[1]):
            best = (len(stranded), cand, stranded)
    return best[1], best[2]


def _replayers_fire(session: GroupSession, world: World, transport: "RadioTransport",
                    events) -> int:
    """Re-inject everything each replayer has captured so far.

    A replay is the same node processing the same message twice, so only
    nodes that received the original count (late first delivery of a lost
    message is a different, self-healing event). Returns the number of
    re-injections that moved any key state; a sound protocol yields zero.
    """
    changes = 0
    got_it = {m: {id(x) for x in msgs} for m, msgs in transport.delivered.items()}
    for nid, role in world.adversaries.items():
        if role.kind != REPLAYER:
            continue
        # snapshot first: re-sending makes the transport capture again
        stored = list(transport.captured.get(nid, ()))
        for msg in stored:
            victims = [m for m in transport.peek_targets(msg, session.members)
                       if m in session.nodes and id(msg) in got_it.get(m, ())]
            before = {m: session.nodes[m].state.fingerprint() for m in victims}
            for m in victims:
                session.nodes[m].step(msg)
            after = {m: session.nodes[m].state.fingerprint() for m in victims}
            if before != after:
                changes += 1
        if stored:
            events.append((world.time, "replay_burst", nid, None,
                           f"re-injected {len(stored)} captured messages"))
    return changes


def _reachable(root: NodeId, graph: Graph) -> set[NodeId]:
    seen = {root}
    frontier = deque([root])
    while frontier:
        n = frontier.popleft()
        for nb in graph.get(n, ()):
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return seen


def _apply_schedule_event(ev: ScheduleEvent, session: GroupSession, world: World,
                          graph: Graph, config: ScenarioConfig, events, attempt) -> None:
    if ev.kind == "join":
        nid = ev.node
        if nid is None or nid in session.members:
            events.append((world.time, "epoch_abort", "join", nid, "bad join target"))
            return
        # spawn the newcomer beside the lowest-id member so it lands in range
        anchor = min(session.members)
        base = world.positions[world.index(anchor)]
        offset = world.rng.uniform(-world.range_m / 4, world.range_m / 4, size=2)
        newpos = np.clip(base + offset, (0, 0), world.area)
        world.add_node(nid, newpos)
        g = connectivity(world)
        edges = g.get(nid, set()) & session.members
        session.graph = _member_subgraph(g, session.members | {nid})
        if attempt("join", lambda: session.member_join(nid, edges)):
            events.append((world.time, "join", nid, None, f"edges={sorted(edges)}"))
    elif ev.kind == "leave":
        nid = ev.node
        if nid is None or nid not in session.members or nid == session.root:
            events.append((world.time, "epoch_abort", "leave", nid, "bad leave target"))
            return
        session.graph = _member_subgraph(graph, session.members)
        if attempt("leave", lambda: session.member_leave(nid)):
            idx = world.index(nid)
            world.ids.pop(idx)
            world.positions = np.delete(world.positions, idx, axis=0)
            world.waypoints = np.delete(world.waypoints, idx, axis=0)
            world.speeds = np.delete(world.speeds, idx)
            world.pause_until = np.delete(world.pause_until, idx)
            world.adversaries.pop(nid, None)
            events.append((world.time, "leave", nid, None, "member departed"))
    elif ev.kind == "global_rekey":
        attempt("global_rekey", session.periodic_global_rekey)
    elif ev.kind == "local_rekey":
        lvl1 = list(session.tree.children.get(session.root, ()))
        if lvl1:
            target = ev.node if ev.node in lvl1 else lvl1[0]
            attempt("local_rekey", lambda: session.periodic_local_rekey(target))


def _detect_and_respond(config: ScenarioConfig, suite: CipherSuite, session: GroupSession,
                        world: World, samples, events, seed: int) -> dict:
    out: dict = {}
    if len(samples) < 4:
        return out
    data = np.array([v for _, v, _ in samples])
    labels = np.array([1 if a else 0 for _, _, a in samples], dtype=int)
    nodes_of = [n for n, _, _ in samples]
    # stratified even/odd split per class keeps both halves representative
    train_idx, test_idx = [], []
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        train_idx.extend(cls_idx[0::2])
        test_idx.extend(cls_idx[1::2])
    train_idx, test_idx = sorted(train_idx), sorted(test_idx)
    out["train_samples"] = len(train_idx)
    out["test_samples"] = len(test_idx)

    som_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50D]))
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("ignore")
        model = esom.fit_detector(data[train_idx], labels[train_idx], config.som, som_rng)
    normalized = esom.apply_normalization(model.stats, data[test_idx])
    results = esom.classify_batch(model.grid, model.labeling, normalized)
    verdicts = [c.verdict for c in results]
    truth = [esom.VERDICT_ATTACK if labels[i] else esom.VERDICT_NORMAL for i in test_idx]
    report = esom.evaluate(verdicts, truth)
    out["detection_rate"] = report.detection_rate
    out["false_alarm_rate"] = report.false_alarm_rate
    out["unclassified_fraction"] = report.unclassified_fraction

    if session is None:
        out["alarms"] = 0
        out["quarantined_nodes"] = 0
        out["tamper_events"] = 0
        return out

    # per-node coverage over the last classified samples feeds the response path
    per_node: dict[NodeId, list[str]] = {}
    for i, verdict in zip(test_idx, verdicts):
        if verdict != esom.VERDICT_UNCLASSIFIED:
            per_node.setdefault(nodes_of[i], []).append(verdict)
    model_bytes = model.to_bytes()
    maps: dict[NodeId, resp.SecurityMap] = {}
    for nid, vs in per_node.items():
        window = vs[-config.coverage_window:]
        if len(window) >= config.coverage_window and nid in session.members:
            attacks = sum(v == esom.VERDICT_ATTACK for v in window)
            maps[nid] = resp.SecurityMap(owner=nid, attack_count=attacks,
                                         window=len(window), epoch=session.epoch,
                                         model_bytes=model_bytes)

    alarms = 0
    quarantined: set[NodeId] = set()
    tampers = 0
    graph = _member_subgraph(connectivity(world), session.members)
    if session.keys is not None:
        # authenticated map exchange on the root's one-hop group; pairs that
        # drifted out of radio reach lose their messages
        lks = session.keys.local_keys
        root = session.root

        def radio(step, sender, receiver, payload, digest):
            a, b = world.index(sender), world.index(receiver)
            d2 = float(((world.positions[a] - world.positions[b]) ** 2).sum())
            if d2 > world.range_m ** 2:
                return None
            return payload, digest

        if root in maps and lks:
            nonces = NonceSource(root, random.Random(seed ^ 0xA1A))
            res = resp.distribute_local_maps(suite, root, set(lks), lks,
                                             maps, nonces, now=world.time,
                                             channel=radio)
            tampers += len(res.tampered)
            events.extend(res.events)
        tables = {n: resp.RoutingTable(owner=n) for n in session.members}
        for t in tables.values():
            t.rebuild(graph)
        for nid, smap in sorted(maps.items()):
            try:
                triggered = resp.check_global_trigger(smap, min_window=config.coverage_window)
            except resp.InsufficientWindow:
                continue
            if triggered:
                nonces = NonceSource(nid, random.Random(seed ^ nid))
                res = resp.global_alarm(suite, smap, session.keys.gk, tables, graph,
                                        nonces, now=world.time,
                                        min_window=config.coverage_window)
                alarms += 1
                quarantined.add(nid)
                events.extend(res.events)
    out["alarms"] = alarms
    out["quarantined_nodes"] = len(quarantined)
    out["tamper_events"] = tampers
    return out


# -- scenario config files -------------------------------------------------------
# Plain key = value lines, # comments. Lists are comma-separated; membership
# events are time:node pairs. See README for the full key table.

_LIST_KEYS = {
    "pause_times", "dropper_counts", "droppers", "eavesdroppers", "replayers",
    "replay_at", "global_rekey_at", "local_rekey_at", "join_at", "leave_at",
}


def parse_scenario(path) -> ScenarioConfig:
    """Parse a scenario file; errors carry the offending line number."""
    raw: dict[str, tuple[int, str]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ScenarioError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            if key in raw and key not in _LIST_KEYS:
                raise ScenarioError(f"{path}:{lineno}: duplicate key {key!r}")
            if key in raw:
                raw[key] = (lineno, raw[key][1] + "," + value)
            else:
                raw[key] = (lineno, value)
    return _build_config(path, raw)


def _build_config(path, raw: dict[str, tuple[int, str]]) -> ScenarioConfig:
    cfg = ScenarioConfig()
    mob = MobilityConfig()
    traffic = TrafficConfig()
    som = esom.SomConfig(rows=12, cols=16, epochs=10)
    schedule: list[ScheduleEvent] = []

    def bad(key, msg):
        lineno = raw[key][0]
        raise ScenarioError(f"{path}:{lineno}: {msg}")

    def take(key, conv):
        lineno, value = raw.pop(key)
        try:
            return conv(value)
        except (ValueError, TypeError):
            raise ScenarioError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None

    def floats(value):
        return tuple(float(x) for x in value.split(",") if x.strip())

    def ints(value):
        return tuple(int(x) for x in value.split(",") if x.strip())

    def timed_nodes(value):
        out = []
        for item in value.split(","):
            item = item.strip()
            if not item:
                continue
            t, _, n = item.partition(":")
            out.append((float(t), int(n)))
        return tuple(out)

    simple = {
        "node_count": ("node_count", int), "area_width": ("area_width", float),
        "area_height": ("area_height", float), "range": ("range_m", float),
        "duration": ("duration", float), "root": ("root", int),
        "key_bits": ("key_bits", int), "cipher": ("cipher", str), "hash": ("hash_name", str),
        "seed": ("seed", int),
    }
    for key, (attr, conv) in simple.items():
        if key in raw:
            setattr(cfg, attr, take(key, conv))
    for key, (attr, conv) in {
        "speed_min": ("speed_min", float), "speed_max": ("speed_max", float),
        "pause_time": ("pause_time", float),
    }.items():
        if key in raw:
            setattr(mob, attr, take(key, conv))
    for key, (attr, conv) in {
        "generators": ("generators", int), "destinations": ("destinations", int),
        "mean_payload": ("mean_payload", float), "attack_start": ("attack_start", float),
        "attack_end": ("attack_end", float), "sample_interval": ("sample_interval", float),
        "effect_size": ("effect_size", float),
    }.items():
        if key in raw:
            setattr(traffic, attr, take(key, conv))
    for key, (attr, conv) in {
        "som_rows": ("rows", int), "som_cols": ("cols", int), "som_epochs": ("epochs", int),
        "hill_quantile": ("hill_quantile", float),
    }.items():
        if key in raw:
            setattr(som, attr, take(key, conv))
    if "coverage_window" in raw:
        cfg.coverage_window = take("coverage_window", int)
    if "latency" in raw:
        cfg.latency = take("latency", float)
    if "protocol_timeout" in raw:
        cfg.protocol_timeout = take("protocol_timeout", float)
    for key, field_name in (("pause_times", "pause_times"), ("replay_at", "replay_at")):
        if key in raw:
            setattr(cfg, field_name, take(key, floats))
    for key, field_name in (("droppers", "droppers"), ("eavesdroppers", "eavesdroppers"),
                            ("replayers", "replayers"), ("dropper_counts", "dropper_counts")):
        if key in raw:
            setattr(cfg, field_name, take(key, ints))
    if "join_at" in raw:
        schedule.extend(ScheduleEvent(t, "join", n) for t, n in take("join_at", timed_nodes))
    if "leave_at" in raw:
        schedule.extend(ScheduleEvent(t, "leave", n) for t, n in take("leave_at", timed_nodes))
    if "global_rekey_at" in raw:
        schedule.extend(ScheduleEvent(t, "global_rekey") for t in take("global_rekey_at", floats))
    if "local_rekey_at" in raw:
        schedule.extend(ScheduleEvent(t, "local_rekey") for t in take("local_rekey_at", floats))
    if raw:
        key = next(iter(raw))
        bad(key, f"unknown key {key!r}")
    cfg.mobility = mob
    cfg.traffic = traffic
    cfg.som = som
    cfg.schedule = tuple(schedule)
    try:
        cfg.validate()
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from None
    return cfg
