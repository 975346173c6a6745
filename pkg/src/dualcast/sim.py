"""Discrete-event simulation of a group of servers.

Time is kept in integer nanoseconds. Every protocol channel is FIFO and
lossless while its receiver is alive. A sender has one NIC, so the copies
of a multicast leave back to back. Heartbeats use separate channels that
skip the NIC queue.
"""

import hashlib
import heapq
import io
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields, replace

from .fd import EVENTUAL, PERFECT, FdConfig, fd_tick
from .overlay import InvalidSpec, build_overlay, parse_family, vertex_connectivity
from .protocol import (BCAST, FAIL, PROBE, RBCAST, RECONF, ConfigError, Deliver, Label, Note,
                       Remove, SelfTerminate, Send, Server, ServerConfig, StartTimer,
                       Transition, Violation)

US = 1_000
MS = 1_000_000

# event kinds
_DELIVER, _TICK, _BEAT, _CRASH, _TIMER, _EON, _RELEASE = range(7)


class ScenarioError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(msg if line is None else "line %d: %s" % (line, msg))
        self.line = line


class TimeBoundExceeded(RuntimeError):
    def __init__(self, trace):
        super().__init__("time bound of %d us exceeded" % (trace.meta.get("time_limit_us", 0)))
        self.trace = trace


class AlreadyCrashed(RuntimeError):
    pass


@dataclass
class Scenario:
    n: int = 4
    f: int = None
    reliable: str = None
    unreliable: str = "binomial"
    hb_us: int = 1000
    to_us: int = 10000
    mode: str = PERFECT
    uniform: bool = False
    partition: bool = False
    partition_to_us: int = 50000
    rounds: int = 10
    payload: int = 8
    seed: int = 1
    latency: str = "sdc"
    jitter_us: int = 0
    time_limit_us: int = 10_000_000
    fails: list = field(default_factory=list)
    spikes: list = field(default_factory=list)
    eons: list = field(default_factory=list)
    send_crashes: list = field(default_factory=list)
    deliver_crashes: list = field(default_factory=list)
    exceeds_f: bool = False
    reliable_only: bool = False
    detail: str = "full"
    sdc_hop_us: float = 50.0
    nic_gbps: float = 1.0
    mdc_dcs: int = 3
    mdc_intra_us: float = 50.0
    mdc_inter_lo_us: float = 2500.0
    mdc_inter_hi_us: float = 8900.0

    def reliable_spec(self):
        text = self.reliable or "circulant:%d" % min(3, self.n - 1)
        return parse_family(text, self.n)

    def unreliable_spec(self):
        return parse_family(self.unreliable, self.n)

    def failure_count(self):
        return len(self.fails) + len(self.send_crashes) + len(self.deliver_crashes)

    def resolved(self):
        """Fill in defaults that depend on the overlay and check the budget."""
        try:
            gr_spec = self.reliable_spec().validate()
            gu_spec = self.unreliable_spec().validate()
        except InvalidSpec as exc:
            raise ScenarioError(str(exc))
        if gu_spec.family not in ("ring", "binomial"):
            raise ScenarioError("unreliable digraph must be ring or binomial")
        kappa = vertex_connectivity(build_overlay(gr_spec))
        f = kappa - 1 if self.f is None else self.f
        if f < 0:
            raise ScenarioError("reliable digraph is not strongly connected")
        if f >= kappa and not self.exceeds_f:
            raise ScenarioError("f=%d needs reliable connectivity above f (got %d)" % (f, kappa))
        if self.failure_count() > f and not self.exceeds_f:
            raise ScenarioError("%d failures scheduled but f=%d; mark exceeds_f=1 to allow"
                                % (self.failure_count(), f))
        if self.uniform and self.n <= 2 * f:
            raise ScenarioError("uniform delivery needs n > 2f")
        if self.mode not in (PERFECT, EVENTUAL):
            raise ScenarioError("mode must be perfect or ep")
        if self.latency not in ("sdc", "mdc"):
            raise ScenarioError("latency must be sdc or mdc")
        if self.detail not in ("full", "lite"):
            raise ScenarioError("detail must be full or lite")
        try:
            FdConfig(self.hb_us * US, self.to_us * US, self.mode).validate()
        except ValueError as exc:
            raise ScenarioError(str(exc))
        for t, spec in self.eons:
            try:
                new_kappa = vertex_connectivity(build_overlay(parse_family(spec, self.n).validate()))
            except InvalidSpec as exc:
                raise ScenarioError("eon directive: %s" % exc)
            if new_kappa <= f and not self.exceeds_f:
                raise ScenarioError("eon directive %r has connectivity %d, not above f=%d"
                                    % (spec, new_kappa, f))
        for t, s in self.fails:
            if not 0 <= s < self.n:
                raise ScenarioError("fail target %d out of range" % s)
        return replace(self, f=f)

    def to_text(self):
        lines = []
        scalars = {
            "n": self.n, "f": self.f, "reliable": self.reliable, "unreliable": self.unreliable,
            "fd.hb_us": self.hb_us, "fd.to_us": self.to_us, "mode": self.mode,
            "uniform": int(self.uniform), "partition": int(self.partition),
            "partition.to_us": self.partition_to_us, "rounds": self.rounds,
            "payload": self.payload, "seed": self.seed, "latency": self.latency,
            "jitter_us": self.jitter_us, "time_limit_us": self.time_limit_us,
            "exceeds_f": int(self.exceeds_f), "reliable_only": int(self.reliable_only),
            "detail": self.detail,
        }
        for k, v in scalars.items():
            if v is not None:
                lines.append("%s=%s" % (k, v))
        lines += ["fail=%d:%d" % x for x in self.fails]
        lines += ["spike=%d:%d:%d:%d" % x for x in self.spikes]
        lines += ["eon=%d:%s" % x for x in self.eons]
        lines += ["send_crash=%d:%d:%s" % (s, r, "/".join(map(str, t))) for s, r, t in self.send_crashes]
        lines += ["deliver_crash=%d:%d" % x for x in self.deliver_crashes]
        return "\n".join(lines) + "\n"


def _flag(v):
    if v not in ("0", "1"):
        raise ValueError("expected 0 or 1, got %r" % v)
    return v == "1"


def _ints(v, count):
    parts = v.split(":")
    if len(parts) != count:
        raise ValueError("expected %d ':'-separated integers" % count)
    return tuple(int(p) for p in parts)


_SCALARS = {
    "n": ("n", int), "f": ("f", int), "reliable": ("reliable", str),
    "unreliable": ("unreliable", str), "fd.hb_us": ("hb_us", int), "fd.to_us": ("to_us", int),
    "mode": ("mode", str), "uniform": ("uniform", _flag), "partition": ("partition", _flag),
    "partition.to_us": ("partition_to_us", int), "rounds": ("rounds", int),
    "payload": ("payload", int), "seed": ("seed", int), "latency": ("latency", str),
    "jitter_us": ("jitter_us", int), "time_limit_us": ("time_limit_us", int),
    "exceeds_f": ("exceeds_f", _flag), "reliable_only": ("reliable_only", _flag),
    "detail": ("detail", str), "sdc.hop_us": ("sdc_hop_us", float),
    "nic.gbps": ("nic_gbps", float), "mdc.dcs": ("mdc_dcs", int),
    "mdc.intra_us": ("mdc_intra_us", float), "mdc.inter_lo_us": ("mdc_inter_lo_us", float),
    "mdc.inter_hi_us": ("mdc_inter_hi_us", float),
}


def parse_scenario(text):
    sc = Scenario()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not val:
            raise ScenarioError("expected key=value, got %r" % raw, lineno)
        try:
            if key in _SCALARS:
                attr, conv = _SCALARS[key]
                setattr(sc, attr, conv(val))
            elif key == "fail":
                sc.fails.append(_ints(val, 2))
            elif key == "spike":
                sc.spikes.append(_ints(val, 4))
            elif key == "eon":
                t, _, spec = val.partition(":")
                sc.eons.append((int(t), spec))
            elif key == "send_crash":
                s, r, targets = val.split(":")
                sc.send_crashes.append((int(s), int(r), tuple(int(x) for x in targets.split("/") if x)))
            elif key == "deliver_crash":
                sc.deliver_crashes.append(_ints(val, 2))
            else:
                raise ScenarioError("unknown key %r" % key, lineno)
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError("bad value for %s: %s" % (key, exc), lineno)
    if sc.n < 2:
        raise ScenarioError("need n >= 2")
    return sc


def load_scenario(path):
    with open(path) as fh:
        return parse_scenario(fh.read())


# -- trace ----------------------------------------------------------------

def _label_str(label):
    return "-" if label is None else str(label)


def _parse_label(text):
    if text == "-":
        return None
    kind, rest = text[0], text[2:-1]
    e, r = rest.split(",")
    return Label(int(e), int(r), kind)


class Trace:
    """Ordered event records plus indexes the checkers and metrics need."""

    def __init__(self, n=0, detail="full", meta=None):
        self.n = n
        self.detail = detail
        self.records = []
        self.meta = dict(meta or {})
        self.deliveries = defaultdict(list)     # server -> [(round, epoch, reliable, ((src, payload), ...), time, line)]
        self.broadcasts = defaultdict(dict)     # server -> round -> (time, payload)
        self.crashed = {}
        self.terminated = {}
        self.removed = defaultdict(list)
        self.histogram = Counter()
        self.tx_per_server = Counter()
        self.tx_per_msg = Counter()
        self.violations = []
        self.timed_out = False
        self.end_time = 0

    @property
    def rounds(self):
        return int(self.meta.get("rounds", 0))

    @property
    def exceeds_f(self):
        return bool(int(self.meta.get("exceeds_f", 0)))

    def faulty(self):
        return set(self.crashed) | set(self.terminated)

    def correct(self):
        return [s for s in range(self.n) if s not in self.crashed and s not in self.terminated]

    def add(self, time, server, event, before=None, after=None, info=()):
        line = len(self.records)
        self.records.append((time, server, event, before, after, info))
        if event == "deliver":
            rnd, epoch, reliable, msgs = info
            self.deliveries[server].append((rnd, epoch, reliable, msgs, time, line))
        elif event == "broadcast":
            rnd, payload = info
            self.broadcasts[server].setdefault(rnd, (time, payload))
        elif event == "crash":
            self.crashed[server] = time
        elif event == "terminate":
            self.terminated[server] = time
        elif event == "transition":
            self.histogram[info[0]] += 1
        elif event == "remove":
            self.removed[server].append(tuple(info))
        elif event == "violation":
            self.violations.append((line, server, info[0]))
        return line

    def to_tsv(self):
        out = io.StringIO()
        meta = dict(self.meta)
        meta.update(n=self.n, detail=self.detail, timed_out=int(self.timed_out), end_time=self.end_time,
                    tx_per_server=json.dumps(sorted(self.tx_per_server.items())),
                    tx_per_msg=json.dumps(sorted([list(k) + [v] for k, v in self.tx_per_msg.items()])))
        for k in sorted(meta):
            out.write("#%s=%s\n" % (k, meta[k]))
        out.write("time\tserver\tevent\tbefore\tafter\tinfo\n")
        for t, s, ev, b, a, info in self.records:
            out.write("%d\t%d\t%s\t%s\t%s\t%s\n" % (t, s, ev, _label_str(b), _label_str(a),
                                                    json.dumps(_jsonable(info), separators=(",", ":"))))
        return out.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_tsv())


def _jsonable(x):
    if isinstance(x, bytes):
        return x.decode("latin-1")
    if isinstance(x, (tuple, list)):
        return [_jsonable(y) for y in x]
    return x


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(y) for y in x)
    return x


def load_trace(path_or_text):
    text = path_or_text
    if "\n" not in path_or_text:
        with open(path_or_text) as fh:
            text = fh.read()
    meta = {}
    rows = []
    for raw in text.splitlines():
        if raw.startswith("#"):
            k, _, v = raw[1:].partition("=")
            meta[k] = v
        elif raw.startswith("time\t") or not raw.strip():
            continue
        else:
            rows.append(raw.split("\t"))
    n = int(meta.pop("n", 0))
    tr = Trace(n, meta.pop("detail", "full"))
    tr.timed_out = bool(int(meta.pop("timed_out", 0)))
    tr.end_time = int(meta.pop("end_time", 0))
    for k, v in json.loads(meta.pop("tx_per_server", "[]")):
        tr.tx_per_server[k] = v
    for row in json.loads(meta.pop("tx_per_msg", "[]")):
        tr.tx_per_msg[tuple(row[:-1])] = row[-1]
    tr.meta = meta
    for cols in rows:
        if len(cols) != 6:
            raise ValueError("malformed trace row: %r" % (cols,))
        t, s, ev, b, a, info = cols
        info = _tuplify(json.loads(info))
        if ev == "deliver":
            rnd, epoch, reliable, msgs = info
            info = (rnd, epoch, bool(reliable), tuple((src, p.encode("latin-1")) for src, p in msgs))
        elif ev == "broadcast":
            info = (info[0], info[1].encode("latin-1"))
        tr.add(int(t), int(s), ev, _parse_label(b), _parse_label(a), info)
    return tr


# -- simulator --------------------------------------------------------------

class Simulator:
    def __init__(self, scenario):
        sc = scenario.resolved()
        self.sc = sc
        self.n = sc.n
        self.rng = random.Random(sc.seed)
        self.detail = sc.detail
        self.full = sc.detail == "full"
        gu = build_overlay(sc.unreliable_spec())
        gr = build_overlay(sc.reliable_spec())
        self.fd_config = FdConfig(sc.hb_us * US, sc.to_us * US, sc.mode)
        cfg = dict(f=sc.f, uniform=sc.uniform, partition=sc.partition,
                   partition_timeout=sc.partition_to_us * US, reliable_only=sc.reliable_only,
                   rounds=sc.rounds, payload_size=sc.payload)
        self.servers = [Server(i, gu, gr, ServerConfig(**cfg), self.fd_config,
                               allow_exceeds=sc.exceeds_f) for i in range(sc.n)]
        self.ns_per_byte = 8.0 / sc.nic_gbps
        self.latency = self._latency_matrix()
        self.heap = []
        self.seq = 0
        self.nic_free = [0] * sc.n
        self.held = [0] * sc.n
        self.last_arrival = {}
        self.cutoff = {}
        self.dead = set()
        self.spikes = defaultdict(list)
        for t, a, b, d in sc.spikes:
            self.spikes[(a, b)].append((t * US, (t + d) * US))
        self.send_crash = {(s, r): tuple(t) for s, r, t in sc.send_crashes}
        self.deliver_crash = set(sc.deliver_crashes)
        meta = {"seed": sc.seed, "rounds": sc.rounds, "exceeds_f": int(sc.exceeds_f), "f": sc.f,
                "uniform": int(sc.uniform), "partition": int(sc.partition), "mode": sc.mode,
                "reliable_only": int(sc.reliable_only), "time_limit_us": sc.time_limit_us,
                "latency": sc.latency, "payload": sc.payload}
        self.trace = Trace(sc.n, sc.detail, meta)
        self.unfinished = set(range(sc.n))
        self.now = 0
        self.done = False
        self._scheduled_crash = set()
        for t, s in sc.fails:
            self.inject_failure(s, t * US)
        for t, spec in sc.eons:
            self._push(t * US, _EON, spec)

    def _latency_matrix(self):
        sc = self.sc
        n = sc.n
        if sc.latency == "sdc":
            hop = int(sc.sdc_hop_us * US)
            return [[hop] * n for _ in range(n)]
        k = max(1, sc.mdc_dcs)
        inter = {}
        for a in range(k):
            for b in range(a + 1, k):
                inter[(a, b)] = int(self.rng.uniform(sc.mdc_inter_lo_us, sc.mdc_inter_hi_us) * US)
        intra = int(sc.mdc_intra_us * US)
        m = [[0] * n for _ in range(n)]
        for u in range(n):
            for v in range(n):
                du, dv = u % k, v % k
                m[u][v] = intra if du == dv else inter[(min(du, dv), max(du, dv))]
        return m

    def _push(self, t, kind, a=None, b=None, c=None, d=None):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, a, b, c, d))

    # -- failure injection -------------------------------------------------

    def inject_failure(self, server, time):
        if server in self.dead or server in self._scheduled_crash:
            raise AlreadyCrashed("server %d already crashed" % server)
        self._scheduled_crash.add(server)
        self._push(time, _CRASH, server)

    def _crash(self, s, cutoff=None):
        if s in self.dead:
            return
        self.dead.add(s)
        self.cutoff[s] = self.now if cutoff is None else cutoff
        self.unfinished.discard(s)
        self.trace.add(self.now, s, "crash", self.servers[s].label, None, ())

    # -- transmission ------------------------------------------------------

    def _arrival(self, u, v, depart, base):
        arr = depart + base
        if self.sc.jitter_us:
            arr += self.rng.randrange(self.sc.jitter_us * US + 1)
        for start, end in self.spikes.get((u, v), ()):
            if start <= depart < end:
                arr = max(arr, end + base)
        return arr

    def _transmit(self, s, env, targets):
        ser = int(env.wire_size() * self.ns_per_byte)
        t = max(self.now, self.nic_free[s])
        lat = self.latency[s]
        kind = env.kind
        is_msg = kind == BCAST or kind == RBCAST
        key = env.item.key if is_msg else None
        for v in targets:
            t += ser
            arr = self._arrival(s, v, t, lat[v])
            last = self.last_arrival.get((s, v), 0)
            if arr < last:
                arr = last
            self.last_arrival[(s, v)] = arr
            self._push(arr, _DELIVER, v, s, env, t)
            if is_msg:
                self.trace.tx_per_msg[key] += 1
            if self.full:
                self.trace.add(self.now, s, "send", None, None, (v, kind, env.eon) + _brief(env))
        self.trace.tx_per_server[s] += len(targets)
        self.nic_free[s] = t

    # -- effects -----------------------------------------------------------

    def _apply(self, s, effects):
        srv = self.servers[s]
        tr = self.trace
        for eff in effects:
            if s in self.dead:
                return
            cls = type(eff)
            if cls is Send:
                env = eff.envelope
                to = eff.to
                if env.kind in (BCAST, RBCAST) and env.item.source == s:
                    rule = self.send_crash.pop((s, env.item.round), None)
                    if rule is not None:
                        self._transmit(s, env, [v for v in to if v in rule])
                        self._crash(s, cutoff=self.nic_free[s])
                        return
                self._transmit(s, env, to)
            elif cls is Deliver:
                # uniform mode needs message stability: a delivery counts only
                # once every copy queued before it has left the NIC
                if self.sc.uniform and (self.nic_free[s] > self.now or self.held[s]):
                    self.held[s] += 1
                    self._push(max(self.nic_free[s], self.now), _RELEASE, s, eff, srv.label)
                elif not self._deliver(s, eff, srv.label):
                    return
            elif cls is Transition:
                tr.add(self.now, s, "transition", eff.before, eff.after, (eff.name,))
            elif cls is Remove:
                tr.add(self.now, s, "remove", srv.label, None, eff.servers)
            elif cls is SelfTerminate:
                tr.add(self.now, s, "terminate", srv.label, None, (eff.reason,))
                self.dead.add(s)
                self.cutoff[s] = self.now
                self.unfinished.discard(s)
                return
            elif cls is StartTimer:
                self._push(self.now + eff.delay, _TIMER, s, eff.tag)
            elif cls is Violation:
                tr.add(self.now, s, "violation", srv.label, None, (eff.text,))
            elif cls is Note:
                tr.add(self.now, s, eff.event, srv.label, None, eff.info)

    def _deliver(self, s, eff, label):
        """Record an A-delivery; False if the server crashes right after it."""
        msgs = tuple((m.source, m.payload) for m in eff.messages)
        self.trace.add(self.now, s, "deliver", label, None, (eff.round, eff.epoch, eff.reliable, msgs))
        if eff.round >= self.sc.rounds:
            self.unfinished.discard(s)
        if (s, eff.round) in self.deliver_crash:
            self.deliver_crash.discard((s, eff.round))
            self._crash(s)
            return False
        return True

    # -- main loop ---------------------------------------------------------

    def run(self):
        limit = self.sc.time_limit_us * US
        for s, srv in enumerate(self.servers):
            srv.now = 0
            self._push(0, _TICK, s)
        for s, srv in enumerate(self.servers):
            self._apply(s, srv.start())
        heap = self.heap
        pop = heapq.heappop
        servers = self.servers
        dead = self.dead
        full = self.full
        tr = self.trace
        while heap and not self.done:
            t, _, kind, a, b, c, d = pop(heap)
            if t > limit:
                self.now = limit
                tr.timed_out = True
                break
            self.now = t
            if kind == _DELIVER:
                v, u, env, depart = a, b, c, d
                if v in dead or (u in dead and depart > self.cutoff[u]):
                    continue
                srv = servers[v]
                srv.now = t
                before = srv.label
                effects = srv.receive(u, env)
                if full:
                    tr.add(t, v, "recv", before, srv.label, (u, env.kind, env.eon) + _brief(env))
                self._apply(v, effects)
            elif kind == _TICK:
                s = a
                if s in dead:
                    continue
                srv = servers[s]
                srv.now = t
                items = fd_tick(srv.fd, t)
                if srv.fd_next is not None:
                    items += fd_tick(srv.fd_next, t)
                beats, effects = srv.detector_output(items)
                for hb in beats:
                    self._beat(s, hb)
                self._apply(s, effects)
                self._push(t + self.fd_config.heartbeat_period, _TICK, s)
            elif kind == _BEAT:
                sender, eon, sent = b, c, d
                for v in a:
                    if v in dead:
                        continue
                    srv = servers[v]
                    for fd in (srv.fd, srv.fd_next):
                        if fd is not None and fd.eon == eon:
                            fd.heard(sender, sent)
            elif kind == _CRASH:
                self._crash(a)
            elif kind == _TIMER:
                if a in dead:
                    continue
                srv = servers[a]
                srv.now = t
                self._apply(a, srv.on_timer(b))
            elif kind == _RELEASE:
                self.held[a] -= 1
                if a not in dead:
                    self._deliver(a, b, c)
            elif kind == _EON:
                live = [s for s in range(self.n) if s not in dead]
                if live:
                    servers[live[0]].inject_command(a)
                    tr.add(t, live[0], "eon_directive", servers[live[0]].label, None, (a,))
            if not self.unfinished:
                self.done = True
        if not self.done and not tr.timed_out:
            # quiescent before every live server finished: a liveness failure
            tr.timed_out = bool(self.unfinished)
        tr.end_time = self.now
        tr.meta["unfinished"] = ",".join(map(str, sorted(self.unfinished)))
        return tr

    def _beat(self, s, hb):
        base = self.latency[s]
        groups = defaultdict(list)
        for v in hb.to:
            arr = self.now + base[v]
            for start, end in self.spikes.get((s, v), ()):
                if start <= self.now < end:
                    arr = max(arr, end + base[v])
            groups[arr].append(v)
        for arr in sorted(groups):
            self._push(arr, _BEAT, tuple(groups[arr]), s, hb.eon, self.now)


def _brief(env):
    it = env.item
    if env.kind in (BCAST, RBCAST):
        return (it.source, it.epoch, it.round)
    if env.kind == FAIL:
        return (it.target, it.owner, 0)
    if env.kind == RECONF:
        return (it.origin, it.eon, 0)
    return (it.origin, it.epoch, it.round, it.direction)


def run(scenario, allow_timeout=True):
    """Simulate ``scenario`` and return its trace.

    With ``allow_timeout`` false a run that hits the time bound raises
    ``TimeBoundExceeded`` (carrying the partial trace).
    """
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    trace = Simulator(scenario).run()
    if trace.timed_out and not allow_timeout:
        raise TimeBoundExceeded(trace)
    return trace


def inject_failure(sim, server, time):
    sim.inject_failure(server, time)


__all__ = ["Scenario", "ScenarioError", "Simulator", "Trace", "TimeBoundExceeded", "AlreadyCrashed",
           "parse_scenario", "load_scenario", "load_trace", "run", "inject_failure", "ConfigError", "MS", "US"]
