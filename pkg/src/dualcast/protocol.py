"""Per-server state machine for dual-digraph atomic broadcast.

Handlers mutate a ``Server`` and return the effects they produced: sends,
deliveries, removals, transitions and the like. Nothing here touches time
or the network; the simulator interprets the effects.
"""

from collections import deque
from dataclasses import dataclass, field, replace

from . import membership
from .fd import FailureNotification, FdState, should_suppress
from .overlay import (CIRCULANT, DigraphSpec, build_overlay, parse_family, remove_servers,
                      vertex_connectivity)

UNRELIABLE = "U"
FIRST = "F"
RELIABLE = "R"

BCAST = "BCAST"
RBCAST = "RBCAST"
FAIL = "FAIL"
PROBE = "PROBE"
RECONF = "RECONF"

TRANSITIONS = ("uu", "rf", "ur", "fr", "rr", "sk")
FAIL_TRANSITIONS = ("ur", "fr", "rr")

HEADER_BYTES = 32


class IllegalTransition(ValueError):
    pass


ConfigError = membership.ConfigError


@dataclass(frozen=True, order=True)
class Label:
    epoch: int
    round: int
    kind: str

    @property
    def reliable(self):
        return self.kind == RELIABLE

    def __str__(self):
        return "%s(%d,%d)" % (self.kind, self.epoch, self.round)

    def astuple(self):
        return (self.epoch, self.round, self.kind)


INITIAL_LABEL = Label(1, 0, RELIABLE)


def apply_transition(label, name):
    e, r, k = label.epoch, label.round, label.kind
    if name == "uu" and k in (UNRELIABLE, FIRST):
        return Label(e, r + 1, UNRELIABLE)
    if name == "ur" and k == UNRELIABLE:
        return Label(e + 1, r - 1, RELIABLE)
    if name == "fr" and k == FIRST:
        return Label(e + 1, r, RELIABLE)
    if k == RELIABLE:
        if name == "rf":
            return Label(e, r + 1, FIRST)
        if name == "rr":
            return Label(e + 1, r + 1, RELIABLE)
        if name == "sk":
            return Label(e, r + 1, RELIABLE)
    raise IllegalTransition("cannot apply %s to %s" % (name, label))


@dataclass(frozen=True)
class Message:
    source: int
    epoch: int
    round: int
    reliable: bool
    payload: bytes = field(default=b"", compare=False)
    size: int = field(default=0, compare=False)
    # sender had already staged the next reliable overlay
    ready: bool = field(default=False, compare=False)

    @property
    def key(self):
        return (self.source, self.epoch, self.round, self.reliable)

    def wire_size(self):
        return HEADER_BYTES + max(self.size, len(self.payload))


@dataclass(frozen=True)
class Probe:
    direction: str  # "fwd" or "bwd"
    origin: int
    epoch: int
    round: int


@dataclass(frozen=True)
class ReconfNotice:
    origin: int
    eon: int
    spec: str


@dataclass(frozen=True)
class Envelope:
    kind: str
    item: object
    eon: int = 1

    def wire_size(self):
        if self.kind in (BCAST, RBCAST):
            return self.item.wire_size()
        return HEADER_BYTES


# effects

@dataclass(frozen=True)
class Send:
    envelope: Envelope
    to: tuple


@dataclass(frozen=True)
class Deliver:
    round: int
    epoch: int
    reliable: bool
    messages: tuple


@dataclass(frozen=True)
class Remove:
    servers: tuple


@dataclass(frozen=True)
class Transition:
    before: Label
    after: Label
    name: str


@dataclass(frozen=True)
class SelfTerminate:
    reason: str


@dataclass(frozen=True)
class StartTimer:
    delay: int
    tag: tuple


@dataclass(frozen=True)
class Violation:
    text: str


@dataclass(frozen=True)
class Note:
    event: str
    info: tuple = ()


class TrackingDigraph:
    """Who might still hold the message of ``root``; empty once tracking is over."""

    __slots__ = ("root", "adj")

    def __init__(self, root):
        self.root = root
        self.adj = {root: set()}

    def __bool__(self):
        return bool(self.adj)

    def __contains__(self, v):
        return v in self.adj

    @property
    def vertices(self):
        return set(self.adj)

    def edges(self):
        return {(u, v) for u, s in self.adj.items() for v in s}

    def reset(self):
        self.adj = {self.root: set()}

    def clear(self):
        self.adj = {}

    def prune(self):
        if self.root not in self.adj:
            self.adj = {}
            return
        seen = {self.root}
        stack = [self.root]
        while stack:
            for v in self.adj[stack.pop()]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        for v in [v for v in self.adj if v not in seen]:
            del self.adj[v]
        for s in self.adj.values():
            s.intersection_update(seen)


def update_tracking_digraph(g, f_old, f_new, gr, observer=None):
    """Fold the notifications ``f_new`` into ``g`` given the already known ``f_old``.

    ``observer`` (if set) is called with the vertex set after each
    notification has been applied but before the final emptiness check.
    """
    known = set(f_old)
    targets = {t for t, _ in known}
    for j, k in f_new:
        known.add((j, k))
        targets.add(j)
        if j not in g.adj:
            continue
        if not g.adj[j]:
            # j may have relayed the message before failing
            queue = deque((j, p) for p in gr.successors(j) if p != k)
            while queue:
                pp, p = queue.popleft()
                if p not in g.adj:
                    g.adj[p] = set()
                    if p in targets:
                        queue.extend((p, s) for s in gr.successors(p) if (p, s) not in known)
                g.adj[pp].add(p)
        elif k in g.adj[j]:
            g.adj[j].discard(k)
            g.prune()
        if observer is not None:
            observer(frozenset(g.adj))
        if g.adj and all(v in targets for v in g.adj):
            g.clear()
    return g


def deterministic_delivery_order(messages):
    return sorted(messages, key=lambda m: (m.source, m.epoch, m.round))


@dataclass
class ServerConfig:
    f: int = 1
    uniform: bool = False
    partition: bool = False
    partition_timeout: int = 50_000_000
    reliable_only: bool = False
    rounds: int = 10
    payload_size: int = 0
    strict_rerun: bool = True

    @property
    def lookahead(self):
        return 2 if self.uniform else 1


class Server:
    def __init__(self, sid, gu, gr, config, fd_config=None, allow_exceeds=False):
        if sid not in gr or sid not in gu:
            raise ConfigError("server %d missing from the overlays" % sid)
        self.id = sid
        self.gu = gu
        self.gr = gr
        self.config = config
        self.fd_config = fd_config
        self.allow_exceeds = allow_exceeds
        self.now = 0
        self.label = INITIAL_LABEL
        self.M = {}
        self.M_prev = {}
        self.M_next = {}
        self.next_tag = None
        self.F = set()
        self.tracking = {p: TrackingDigraph(p) for p in gr.vertices}
        self.open_tracks = set(gr.vertices)
        self.delivered = []
        self.committed_round = 0
        self.released_round = 0
        self.pending = deque()
        self.witnesses = {}
        self.own_payloads = {}
        self.broadcast_rounds = set()
        self.command = None
        self.terminated = False
        self.observer = None
        # partition gate
        self.gated = None
        self.probes = {}
        self.probes_seen = set()
        self.held = []
        # eons
        self.eon_state = membership.EonState(1, gr)
        self.armed = None
        self.reconf_sent = False
        self.eon_postponed = []
        self.replay = deque()
        self.fd = FdState(sid, gr.predecessors(sid), gr.successors(sid), fd_config) if fd_config else None
        self.fd_next = None
        self.out = []

    # -- bookkeeping -------------------------------------------------------

    @property
    def eon(self):
        return self.eon_state.eon

    def _emit(self, effect):
        self.out.append(effect)

    def _take(self):
        out, self.out = self.out, []
        return out

    def _transition(self, name):
        before = self.label
        self.label = apply_transition(before, name)
        self._emit(Transition(before, self.label, name))
        if self.label.reliable:
            self._entered_reliable()
            if self.config.partition:
                # a server cut off from the majority cannot finish this round
                key = (self.label.epoch, self.label.round)
                self._emit(StartTimer(self.config.partition_timeout, ("partition",) + key))

    def _send(self, kind, item, to):
        if to:
            self._emit(Send(Envelope(kind, item, self.eon), tuple(to)))

    def _violation(self, text):
        self._emit(Violation("%s at %s" % (text, self.label)))

    # -- own messages ------------------------------------------------------

    def _payload(self, r):
        p = self.own_payloads.get(r)
        if p is None:
            p = b"%d:%d" % (self.id, r) if r <= self.config.rounds else b""
            if self.command is not None:
                p += self.command
                self.command = None
            self.own_payloads[r] = p
        return p

    def own_message(self):
        e, r = self.label.epoch, self.label.round
        payload = self._payload(r)
        size = self.config.payload_size if r <= self.config.rounds else 0
        ready = self.label.reliable and self.eon_state.in_transitional_round
        return Message(self.id, e, r, self.label.reliable, payload, size, ready)

    def _eager(self):
        return self.label.reliable or self.label.round <= self.config.rounds + self.config.lookahead

    def a_broadcast_own(self):
        if self.id in self.M:
            return False
        m = self.own_message()
        if m.round not in self.broadcast_rounds:
            self.broadcast_rounds.add(m.round)
            self._emit(Note("broadcast", (m.round, m.payload)))
        if self.label.reliable:
            self._rbroadcast(m)
        else:
            self._broadcast(m)
        return True

    def _broadcast(self, m):
        if m.source not in self.M:
            self._send(BCAST, m, self.gu.relay_targets(self.id, m.source))
        self.M[m.source] = m

    def _rbroadcast(self, m):
        if m.source not in self.M:
            self._send(RBCAST, m, self.gr.relay_targets(self.id, m.source))
        self.M[m.source] = m
        g = self.tracking.get(m.source)
        if g is not None:
            g.clear()
        self.open_tracks.discard(m.source)

    def _settle(self):
        """Main-loop step: broadcast eagerly and complete rounds until nothing changes."""
        while not self.terminated and self.gated is None:
            progressed = False
            if self._eager() and self.id not in self.M:
                progressed = self.a_broadcast_own()
            if self.try_to_complete():
                progressed = True
            if not progressed:
                break

    # -- start -------------------------------------------------------------

    def start(self):
        kappa = vertex_connectivity(self.gr)
        if self.config.f >= kappa and not self.allow_exceeds:
            raise ConfigError("f=%d must be below the reliable connectivity %d" % (self.config.f, kappa))
        if self.config.uniform:
            membership.check_uniform_config(len(self.gr), self.config.f)
        if self.config.reliable_only:
            self._transition("rr")
            self._reset_tracking()
        else:
            self._transition("rf")
        self._settle()
        return self._take()

    # -- receive -----------------------------------------------------------

    def receive(self, sender, env):
        """Entry point for one protocol envelope from ``sender``."""
        if self.terminated:
            return []
        self._dispatch(sender, env)
        while self.replay and not self.terminated and self.gated is None:
            s, e = self.replay.popleft()
            self._dispatch(s, e)
        return self._take()

    def _dispatch(self, sender, env):
        if env.eon < self.eon:
            return
        if env.eon > self.eon:
            self.eon_postponed.append((sender, env))
            return
        if should_suppress(self.fd, sender, env.kind == FAIL):
            return
        if env.kind == PROBE:
            self._handle_probe(sender, env.item)
            return
        if self.gated is not None:
            self.held.append((sender, env))
            return
        if env.kind == BCAST:
            self.handle_unreliable_msg(env.item)
        elif env.kind == RBCAST:
            self.handle_reliable_msg(env.item)
        elif env.kind == FAIL:
            self.handle_failure_notification(env.item)
        elif env.kind == RECONF:
            self.handle_reconf_notice(sender, env.item)
        self._settle()

    def local_notification(self, fn):
        """A notification raised by this server's own detector."""
        if self.terminated:
            return []
        self._dispatch(self.id, Envelope(FAIL, fn, fn.eon))
        while self.replay and not self.terminated and self.gated is None:
            s, e = self.replay.popleft()
            self._dispatch(s, e)
        return self._take()

    # -- handlers ----------------------------------------------------------

    def _witness(self, m):
        if self.config.uniform:
            self.witnesses.setdefault((m.epoch, m.round), set()).add(m.source)
            if self.pending:
                self._release_ready()

    def handle_unreliable_msg(self, m):
        self._witness(m)
        e, r = self.label.epoch, self.label.round
        if m.epoch < e or m.round < r:
            return
        if m.epoch > e:
            self._violation("unreliable message from epoch %d" % m.epoch)
            return
        if m.round > r:
            if m.round != r + 1:
                self._violation("unreliable message from round %d" % m.round)
                return
            if self.next_tag is None or self.next_tag[0] == e:
                self.M_next[m.source] = m
                self.next_tag = (e, m.round, False)
            return
        if self.label.reliable:
            self._violation("unreliable message for the current reliable state")
            return
        self._broadcast(m)
        self.a_broadcast_own()
        self.try_to_complete()

    def handle_reliable_msg(self, m):
        e, r = self.label.epoch, self.label.round
        if m.epoch < e or m.round < r:
            return
        if not self.label.reliable:
            self._violation("reliable message (%d,%d) in an unreliable state" % (m.epoch, m.round))
            return
        if m.epoch > e:
            if m.epoch != e + 1 or m.round != r + 1:
                self._violation("reliable message from (%d,%d)" % (m.epoch, m.round))
                return
            tag = (m.epoch, m.round, True)
            if self.next_tag == tag and m.source in self.M_next:
                return
            self._send(RBCAST, m, self.gr.relay_targets(self.id, m.source))
            if self.next_tag is not None and self.next_tag[0] == e:
                self.M_next.clear()
            self.M_next[m.source] = m
            self.next_tag = tag
            return
        if m.round > r + 1:
            self._violation("reliable message from round %d" % m.round)
            return
        if m.round == r + 1:
            self._skip()
        self._rbroadcast(m)
        self.a_broadcast_own()
        self.try_to_complete()

    def _skip(self):
        if not self.M_prev:
            self._violation("skip with no pending unreliable round")
        else:
            epoch = next(iter(self.M_prev.values())).epoch
            self._commit(self.M_prev, epoch, self.label.round, False)
        self.M_prev = {}
        self.M = {}
        self.M_next = {}
        self.next_tag = None
        self._reset_tracking()
        self._transition("sk")

    def _reset_tracking(self):
        self.tracking = {p: TrackingDigraph(p) for p in self.gr.vertices}
        self.open_tracks = set(self.gr.vertices)
        if self.F:
            order = sorted(self.F)
            for p, g in self.tracking.items():
                update_tracking_digraph(g, (), order, self.gr)
                if not g:
                    self.open_tracks.discard(p)

    def handle_failure_notification(self, fn):
        j, k = fn.target, fn.owner
        if j not in self.gr or k not in self.gr:
            return
        if (j, k) in self.F:
            return
        if not self.gr.has_edge(j, k):
            self._violation("notification (%d,%d) off the reliable digraph" % (j, k))
            return
        self._send(FAIL, fn, self.gr.relay_targets(self.id, k))
        if not self.label.reliable:
            self._rollback()
        observer = self.observer
        for p, g in self.tracking.items():
            if g:
                update_tracking_digraph(g, self.F, [(j, k)], self.gr,
                                        observer=(lambda vs, p=p: observer(p, vs)) if observer else None)
                if not g:
                    self.open_tracks.discard(p)
        self.F.add((j, k))
        self.try_to_complete()

    def _rollback(self):
        self.M = {}
        self.M_next = {}
        self.next_tag = None
        self._transition("ur" if self.label.kind == UNRELIABLE else "fr")

    def _announce_reconf(self):
        """Flood the pending reconfiguration over the reliable overlay, once per eon.

        Like a failure notification it travels ahead of any reliable message
        on every channel, so receivers leave unreliable mode before they see
        reliable traffic from the next epoch.
        """
        if self.reconf_sent:
            return
        self.reconf_sent = True
        self._send(RECONF, ReconfNotice(self.id, self.eon, self.armed), self.gr.successors(self.id))

    def handle_reconf_notice(self, sender, notice):
        if self.reconf_sent or notice.eon != self.eon:
            return
        self.reconf_sent = True
        self._send(RECONF, notice, [v for v in self.gr.successors(self.id)
                                    if v != sender and v != notice.origin])
        if not self.label.reliable:
            self._rollback()

    # -- completion --------------------------------------------------------

    def try_to_complete(self):
        if self.terminated or self.gated is not None:
            return False
        if not self.label.reliable:
            return self._complete_unreliable()
        if self.open_tracks:
            return False
        if self.config.partition and not self._partition_ready():
            return False
        return self._complete_reliable()

    def _complete_unreliable(self):
        if len(self.M) != len(self.gu):
            return False
        prev = self.M_prev
        e, r = self.label.epoch, self.label.round
        self._transition("uu")
        if prev:
            self._commit(prev, e, r - 1, False)
            if self.terminated:
                return False
        if self.armed is not None:
            # the reconfiguration needs a reliable round; rerun this one reliably
            self.M_prev = self.M
            self._announce_reconf()
            self._rollback()
            return True
        for m in self.M_next.values():
            self._send(BCAST, m, self.gu.relay_targets(self.id, m.source))
        self.M_prev = self.M
        self.M = self.M_next
        self.M_next = {}
        self.next_tag = None
        if self.M:
            self.a_broadcast_own()
        return True

    def _complete_reliable(self):
        e, r = self.label.epoch, self.label.round
        self._commit(self.M, e, r, True)
        if self.terminated:
            return False
        removed = tuple(v for v in self.gr.vertices if v not in self.M)
        if removed:
            self._emit(Remove(removed))
            gone = set(removed)
            self.gu = remove_servers(self.gu, gone)
            self.gr = remove_servers(self.gr, gone)
            self.eon_state.current_gr = self.gr
            self.F = {(x, y) for x, y in self.F if x not in gone and y not in gone}
            if self.fd is not None:
                self.fd.forget(gone)
            if self.fd_next is not None:
                self.fd_next.forget(gone)
            if self.id in gone:
                self._terminate("removed by round agreement")
                return False
        self.M_prev = {}
        if self.eon_state.in_transitional_round and all(m.ready for m in self.M.values()):
            self._finish_eon()
        self._reset_tracking_plain()
        if self.armed is not None:
            self._announce_reconf()
        if not self.F and not self.config.reliable_only and self.armed is None:
            if self.next_tag is not None and self.next_tag[2]:
                self._violation("postponed reliable messages at a no-fail transition")
                self.M_next = {}
            self._transition("rf")
            for m in self.M_next.values():
                self._send(BCAST, m, self.gu.relay_targets(self.id, m.source))
            self.M = self.M_next
        else:
            self._transition("rr")
            if self.next_tag is not None and self.next_tag[0] == self.label.epoch - 1:
                self.M = {}
            else:
                self.M = {s: m for s, m in self.M_next.items() if s in self.gr}
                for s in self.M:
                    self.tracking[s].clear()
                    self.open_tracks.discard(s)
            if self.F:
                order = sorted(self.F)
                for p, g in self.tracking.items():
                    if g:
                        update_tracking_digraph(g, (), order, self.gr)
                        if not g:
                            self.open_tracks.discard(p)
        self.M_next = {}
        self.next_tag = None
        if self.M:
            self.a_broadcast_own()
        self._release_held()
        return True

    def _reset_tracking_plain(self):
        self.tracking = {p: TrackingDigraph(p) for p in self.gr.vertices}
        self.open_tracks = set(self.gr.vertices)

    # -- delivery ----------------------------------------------------------

    def _commit(self, msgs, epoch, rnd, reliable):
        if rnd != self.committed_round + 1:
            self._violation("round %d committed after %d" % (rnd, self.committed_round))
        self.committed_round = max(self.committed_round, rnd)
        ordered = tuple(deterministic_delivery_order(msgs.values()))
        for m in ordered:
            spec = membership.decode_reconfig(m.payload)
            if spec is not None and self.armed is None and not self.eon_state.in_transitional_round:
                self.armed = spec
        entry = (rnd, epoch, reliable, ordered)
        if self.config.uniform and not reliable:
            self.pending.append(entry)
            self._release_ready()
        else:
            while self.pending and not self.terminated:
                self._release(self.pending.popleft())
            if not self.terminated:
                self._release(entry)

    def _release(self, entry):
        rnd, epoch, reliable, ordered = entry
        self.delivered.append(entry)
        self.released_round = rnd
        for k in [k for k in self.own_payloads if k <= rnd]:
            del self.own_payloads[k]
        self._emit(Deliver(rnd, epoch, reliable, ordered))

    def _release_ready(self):
        last = -1
        f = self.config.f
        for i, (rnd, epoch, _, _) in enumerate(self.pending):
            if membership.uniform_gate(self.witnesses.get((epoch, rnd + 2), ()), f, self.id):
                last = i
        for _ in range(last + 1):
            if self.terminated:
                return
            self._release(self.pending.popleft())
        floor = self.pending[0][0] + 2 if self.pending else self.committed_round + 1
        for key in [k for k in self.witnesses if k[1] < floor]:
            del self.witnesses[key]

    # -- termination and timers -------------------------------------------

    def _terminate(self, reason):
        self.terminated = True
        self._emit(SelfTerminate(reason))

    def on_timer(self, tag):
        if self.terminated:
            return []
        here = (self.label.epoch, self.label.round)
        if tag[0] == "partition" and self.label.reliable and here == tag[1:]:
            self._terminate("no majority partition for round %d" % tag[2])
        return self._take()

    # -- partition gate ----------------------------------------------------

    def _probe_record(self, key):
        rec = self.probes.get(key)
        if rec is None:
            rec = self.probes[key] = membership.PartitionProbe(key)
        return rec

    def _partition_ready(self):
        key = (self.label.epoch, self.label.round)
        rec = self._probe_record(key)
        if rec.started_at is None:
            rec.started_at = self.now
            rec.forward_acks.add(self.id)
            rec.backward_acks.add(self.id)
            self._relay_probe(Probe("fwd", self.id, *key), None)
            self._relay_probe(Probe("bwd", self.id, *key), None)
            self.probes_seen.add(("fwd", self.id) + key)
            self.probes_seen.add(("bwd", self.id) + key)
        if membership.partition_gate(rec, len(self.gr)):
            self.gated = None
            for old in [k for k in self.probes if k < key]:
                del self.probes[old]
            return True
        self.gated = key
        return False

    def _relay_probe(self, probe, sender):
        if probe.direction == "fwd":
            to = [s for s in self.gr.successors(self.id) if s != probe.origin and s != sender]
        else:
            suspected = self.fd.suspected if self.fd is not None else ()
            to = [p for p in self.gr.predecessors(self.id)
                  if p != probe.origin and p != sender and p not in suspected]
        self._send(PROBE, probe, to)

    def _handle_probe(self, sender, probe):
        if self.id not in self.gr:
            return
        key = (probe.direction, probe.origin, probe.epoch, probe.round)
        if key in self.probes_seen:
            return
        self.probes_seen.add(key)
        rec = self._probe_record((probe.epoch, probe.round))
        (rec.forward_acks if probe.direction == "fwd" else rec.backward_acks).add(probe.origin)
        self._relay_probe(probe, sender)
        if self.gated == (probe.epoch, probe.round) and membership.partition_gate(rec, len(self.gr)):
            self.gated = None
            self.try_to_complete()
            self._settle()

    def _release_held(self):
        if self.held:
            self.replay.extend(self.held)
            self.held = []

    # -- eons --------------------------------------------------------------

    def inject_command(self, spec_text):
        self.command = membership.encode_reconfig(spec_text)

    def _next_overlay(self):
        spec = parse_family(self.armed, len(self.gr))
        if spec.family == CIRCULANT:
            spec = replace(spec, d=min(spec.d, len(self.gr) - 1))
        return build_overlay(spec, self.gr.vertices)

    def _entered_reliable(self):
        if self.armed is None or self.eon_state.in_transitional_round:
            return
        nxt = self._next_overlay()
        membership.begin_eon_transition(self, nxt)
        self._emit(Note("eon_enter", (self.eon + 1, self.label.epoch, self.label.round)))
        if self.fd_config is not None:
            self.fd_next = FdState(self.id, nxt.predecessors(self.id), nxt.successors(self.id),
                                   self.fd_config, now=self.now, eon=self.eon + 1)

    def _finish_eon(self):
        # staged copies can differ if removals happened meanwhile; rebuild
        # over the agreed survivors so every server flips to the same digraph
        final = self._next_overlay()
        staged = self.eon_state.next_gr
        self.eon_state.next_gr = final
        self.gr = membership.finish_eon_transition(self, ())
        self.armed = None
        self.reconf_sent = False
        self.F = set()
        if self.fd_config is not None:
            if self.fd_next is None or final != staged:
                self.fd_next = FdState(self.id, final.predecessors(self.id), final.successors(self.id),
                                       self.fd_config, now=self.now, eon=self.eon)
            self.fd = self.fd_next
            self.fd_next = None
        self._emit(Note("eon_begin", (self.eon, self.label.epoch, self.label.round)))
        postponed = [(s, e) for s, e in self.eon_postponed if e.eon == self.eon]
        self.eon_postponed = [(s, e) for s, e in self.eon_postponed if e.eon > self.eon]
        self.replay.extend(postponed)

    # -- detector glue -----------------------------------------------------

    def detector_output(self, items):
        """Turn detector tick output into effects; heartbeats are returned untouched."""
        beats = []
        for it in items:
            if isinstance(it, FailureNotification):
                self._emit(Note("suspect", (it.target, it.eon)))
                if it.eon == self.eon:
                    self._dispatch(self.id, Envelope(FAIL, it, it.eon))
                elif it.eon > self.eon:
                    self.eon_postponed.append((self.id, Envelope(FAIL, it, it.eon)))
            else:
                beats.append(it)
        while self.replay and not self.terminated and self.gated is None:
            s, e = self.replay.popleft()
            self._dispatch(s, e)
        return beats, self._take()


def _as_digraph(spec_or_graph, n):
    if isinstance(spec_or_graph, DigraphSpec):
        return build_overlay(spec_or_graph)
    if isinstance(spec_or_graph, str):
        return build_overlay(parse_family(spec_or_graph, n))
    return spec_or_graph


def init_server(sid, n, specs, f, flags=None, fd_config=None):
    """Build a server in its first unreliable state (or first reliable one for the baseline)."""
    gu = _as_digraph(specs[0], n)
    gr = _as_digraph(specs[1], n)
    flags = dict(flags or {})
    allow = flags.pop("exceeds_f", False)
    config = ServerConfig(f=f, **flags)
    s = Server(sid, gu, gr, config, fd_config, allow_exceeds=allow)
    s.boot_effects = s.start()
    return s


def _run(state, fn, *args):
    state.out = []
    fn(*args)
    state._settle()
    return state._take()


def a_broadcast_own(state):
    return _run(state, state.a_broadcast_own)


def handle_unreliable_msg(state, msg):
    return _run(state, state.handle_unreliable_msg, msg)


def handle_reliable_msg(state, msg):
    return _run(state, state.handle_reliable_msg, msg)


def handle_failure_notification(state, fn):
    return _run(state, state.handle_failure_notification, fn)


def try_to_complete(state):
    state.out = []
    state.try_to_complete()
    return state._take()
