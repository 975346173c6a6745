"""Trace checkers, the closed-form performance model and run metrics."""

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

from .protocol import RELIABLE, Label

PASS = "pass"
FAIL = "fail"
SKIP = "skip"
INCONCLUSIVE = "inconclusive"


class DomainError(ValueError):
    pass


class MissingParameter(ValueError):
    pass


class WindowNotReached(RuntimeError):
    pass


class MalformedTrace(ValueError):
    pass


@dataclass(frozen=True)
class CheckReport:
    name: str
    verdict: str
    locator: tuple = None
    detail: str = ""

    @property
    def ok(self):
        return self.verdict in (PASS, SKIP)

    def __str__(self):
        loc = "" if self.locator is None else " @lines %d-%d" % self.locator
        return "%-22s %s%s %s" % (self.name, self.verdict.upper(), loc, self.detail)


def _report(name, problems, detail_ok=""):
    if not problems:
        return CheckReport(name, PASS, None, detail_ok)
    line, text = problems[0]
    first = line if isinstance(line, tuple) else (line, line)
    return CheckReport(name, FAIL, first, "%s (%d problem(s))" % (text, len(problems)))


# -- safety ---------------------------------------------------------------

def _round_content(entry):
    return tuple(sorted(entry[3]))


def _agreement_problems(trace, servers):
    """Prefix-compatible logs, equal per-round sets and equal per-round epochs."""
    logs = {s: trace.deliveries.get(s, []) for s in servers}
    order, sets, epochs = [], [], []
    ref = max(logs.values(), key=len, default=[])
    for s, log in sorted(logs.items()):
        for i, entry in enumerate(log):
            if i >= len(ref):
                break
            r_entry = ref[i]
            if entry[0] != r_entry[0] or entry[3] != r_entry[3]:
                order.append(((min(entry[5], r_entry[5]), max(entry[5], r_entry[5])),
                              "server %d diverges at position %d (round %d vs %d)"
                              % (s, i, entry[0], r_entry[0])))
                break
    by_round = defaultdict(dict)
    for s, log in logs.items():
        for entry in log:
            by_round[entry[0]][s] = entry
    for rnd in sorted(by_round):
        entries = by_round[rnd]
        contents = {s: frozenset(e[3]) for s, e in entries.items()}
        if len(set(contents.values())) > 1:
            lines = [e[5] for e in entries.values()]
            sets.append(((min(lines), max(lines)), "round %d delivered with %d different sets"
                         % (rnd, len(set(contents.values())))))
        eps = {e[1] for e in entries.values()}
        if len(eps) > 1:
            lines = [e[5] for e in entries.values()]
            epochs.append(((min(lines), max(lines)), "round %d delivered in epochs %s" % (rnd, sorted(eps))))
    return order, sets, epochs


def check_safety(trace):
    if trace.n <= 0:
        raise MalformedTrace("trace has no servers")
    integrity = []
    for s, log in trace.deliveries.items():
        seen = set()
        prev = 0
        for rnd, epoch, reliable, msgs, t, line in log:
            if rnd != prev + 1:
                integrity.append((line, "server %d delivered round %d after %d" % (s, rnd, prev)))
            prev = rnd
            for src, payload in msgs:
                if (src, rnd) in seen:
                    integrity.append((line, "server %d delivered (%d, round %d) twice" % (s, src, rnd)))
                seen.add((src, rnd))
                sent = trace.broadcasts.get(src, {}).get(rnd)
                if sent is None or sent[1] != payload:
                    integrity.append((line, "server %d delivered (%d, round %d) never broadcast"
                                      % (s, src, rnd)))
    order, sets, epochs = _agreement_problems(trace, trace.correct())
    return [
        _report("integrity", integrity),
        _report("total_order", order),
        _report("set_agreement", sets),
        _report("same_epoch", epochs),
    ]


def check_uniform(trace):
    """Agreement and order extended to every server, including the ones that failed."""
    order, sets, epochs = _agreement_problems(trace, range(trace.n))
    return [_report("uniform_total_order", order), _report("uniform_agreement", sets + epochs)]


# -- liveness -------------------------------------------------------------

def check_liveness(trace):
    names = ("validity", "agreement")
    if trace.exceeds_f:
        return [CheckReport(n, SKIP, None, "assumption violated: more than f failures") for n in names]
    if trace.timed_out:
        return [CheckReport(n, INCONCLUSIVE, None, "run hit its time bound") for n in names]
    rounds = trace.rounds
    validity, agreement = [], []
    correct = trace.correct()
    for s in correct:
        log = trace.deliveries.get(s, [])
        own = {rnd for rnd, _, _, msgs, _, _ in log for src, _ in msgs if src == s}
        missing = [r for r in range(1, rounds + 1) if r not in own]
        if missing:
            validity.append((log[-1][5] if log else 0, "server %d lacks its own messages for rounds %s"
                             % (s, missing[:5])))
    ref = None
    for s in correct:
        head = [(e[0], e[3]) for e in trace.deliveries.get(s, []) if e[0] <= rounds]
        if ref is None:
            ref = (s, head)
        elif head != ref[1]:
            agreement.append((0, "servers %d and %d disagree through round %d" % (ref[0], s, rounds)))
    return [_report("validity", validity), _report("agreement", agreement)]


# -- propositions ---------------------------------------------------------

def _unrel(label):
    return label.kind != RELIABLE


def concurrent_ok(a, b):
    """True if non-faulty servers may be in labels ``a`` and ``b`` at the same time."""
    e, r = a.epoch, a.round
    if _unrel(a):
        if _unrel(b):
            return b.epoch == e and r - 1 <= b.round <= r + 1
        return (b.epoch, b.round) in ((e, r - 1), (e + 1, r - 2), (e + 1, r - 1), (e + 1, r))
    if _unrel(b):
        return (b.epoch, b.round) in ((e - 1, r), (e - 1, r + 1), (e - 1, r + 2), (e, r + 1))
    return (b.epoch, b.round) in ((e - 1, r - 1), (e, r - 1), (e, r), (e, r + 1), (e + 1, r + 1))


def check_state_propositions(trace):
    faulty = trace.faulty()
    unique, msg3, msg4, msg5, table, runtime = [], [], [], [], [], []
    current = {s: Label(1, 0, RELIABLE) for s in range(trace.n) if s not in faulty}
    for line, (t, s, ev, before, after, info) in enumerate(trace.records):
        if ev == "violation":
            runtime.append((line, "server %d: %s" % (s, info[0])))
        if s in faulty:
            continue
        if ev == "transition":
            current[s] = after
            for o, lab in current.items():
                if o == s:
                    continue
                if (lab.epoch, lab.round) == (after.epoch, after.round) and _unrel(lab) != _unrel(after):
                    unique.append((line, "servers %d and %d in %s and %s" % (s, o, after, lab)))
                elif not concurrent_ok(after, lab):
                    table.append((line, "servers %d and %d concurrently in %s and %s" % (s, o, after, lab)))
        elif ev == "recv":
            kind, author = info[1], info[3]
            if author in faulty or kind not in ("BCAST", "RBCAST"):
                continue
            e, r = info[4], info[5]
            te, tr_ = before.epoch, before.round
            if kind == "BCAST":
                if te < e or (te == e and tr_ < r and tr_ != r - 1):
                    msg3.append((line, "unreliable (%d,%d) received in %s" % (e, r, before)))
            else:
                if te < e and not (te == e - 1 and before.kind == RELIABLE and tr_ == r - 1):
                    msg4.append((line, "reliable (%d,%d) received in %s" % (e, r, before)))
                if te == e and tr_ <= r and not (before.kind == RELIABLE and tr_ in (r - 1, r)):
                    msg5.append((line, "reliable (%d,%d) received in %s" % (e, r, before)))
    out = [
        _report("unique_states", unique),
        _report("concurrent_states", table),
        _report("runtime_assertions", runtime),
    ]
    if trace.detail == "full":
        out += [_report("unreliable_receipt", msg3), _report("reliable_receipt", msg4),
                _report("reliable_same_epoch", msg5)]
    return out


def check_eon_barrier(trace):
    """No protocol send tagged with a new eon before every correct server entered the transitional round."""
    correct = set(trace.correct())
    enters = defaultdict(dict)
    problems = []
    for line, (t, s, ev, before, after, info) in enumerate(trace.records):
        if ev == "eon_enter" and s in correct:
            enters[info[0]].setdefault(s, (t, line))
    for line, (t, s, ev, before, after, info) in enumerate(trace.records):
        if ev != "send" or info[2] < 2:
            continue
        eon = info[2]
        entered = enters.get(eon, {})
        if set(entered) != correct:
            problems.append((line, "eon %d traffic before servers %s entered" % (eon, sorted(correct - set(entered)))))
            break
        last = max(v[0] for v in entered.values())
        if t < last:
            problems.append((line, "eon %d traffic at %d before last entry at %d" % (eon, t, last)))
            break
    return _report("eon_barrier", problems)


def check_all(trace, uniform=False):
    reports = check_safety(trace) + check_liveness(trace) + check_state_propositions(trace)
    if uniform:
        reports += check_uniform(trace)
    return reports


# -- performance model ----------------------------------------------------

@dataclass(frozen=True)
class PerfModel:
    delta_u: float
    delta_r: float
    lam: float = math.inf

    def validate(self):
        if not (0 < self.delta_u < self.delta_r):
            raise DomainError("need 0 < delta_u < delta_r")
        if self.lam < 3:
            raise DomainError("lambda must be at least 3, got %s" % self.lam)
        return self


def expected_performance(model):
    model.validate()
    du, dr, lam = model.delta_u, model.delta_r, model.lam
    if math.isinf(lam):
        return {"latency": 2 * du, "throughput": 1 / du}
    return {"latency": 2 * du + (du + 2 * dr) / lam,
            "throughput": (1 - 1 / lam) / (du + dr / lam)}


BASELINE = "baseline"
RERUN_RELIABLY = "rerun-reliably"
MERGED = "merged"


def worst_case_latency(model, variant=BASELINE, delta_r_bar=None):
    if not (model.delta_u > 0 and model.delta_r > 0):
        raise DomainError("round durations must be positive")
    du, dr = model.delta_u, model.delta_r
    if variant == BASELINE:
        return 3 * du + 2 * dr
    if variant == RERUN_RELIABLY:
        return du + 2 * dr
    if variant == MERGED:
        if delta_r_bar is None:
            raise MissingParameter("merged variant needs delta_r_bar")
        return 2 * du + delta_r_bar
    raise ValueError("unknown variant %r" % variant)


def worst_case_throughput(model):
    return 1 / (2 * model.delta_u + model.delta_r)


# -- metrics --------------------------------------------------------------

def median_ci(samples, z=1.96):
    """Median with order-statistic bounds of an approximate 95% interval."""
    xs = sorted(samples)
    m = len(xs)
    if m == 0:
        raise ValueError("no samples")
    med = xs[m // 2] if m % 2 else (xs[m // 2 - 1] + xs[m // 2]) / 2
    lo = max(0, int(math.floor((m - z * math.sqrt(m)) / 2)) - 1)
    hi = min(m - 1, int(math.ceil(1 + (m + z * math.sqrt(m)) / 2)) - 1)
    return med, xs[lo], xs[hi]


@dataclass
class Metrics:
    rows: list
    histogram: Counter
    per_message: dict
    window: tuple

    CSV_HEADER = ("server", "median_latency_us", "ci_lo", "ci_hi", "throughput_msgs_per_s",
                  "rounds", "transmissions")

    def write_csv(self, path_or_file):
        own = isinstance(path_or_file, str)
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for row in self.rows:
                w.writerow(row)
        finally:
            if own:
                fh.close()

    def mean_throughput(self):
        vals = [r[4] for r in self.rows]
        return sum(vals) / len(vals) if vals else 0.0


def _window(trace, servers, lo_count, hi_count):
    t1 = t2 = 0
    for s in servers:
        total = 0
        r1 = r2 = None
        for rnd, epoch, rel, msgs, t, line in trace.deliveries.get(s, []):
            total += len(msgs)
            if r1 is None and total >= lo_count:
                r1 = t
            if r2 is None and total >= hi_count:
                r2 = t
                break
        if r1 is None or r2 is None:
            raise WindowNotReached("server %d delivered %d of %d messages" % (s, total, hi_count))
        t1, t2 = max(t1, r1), max(t2, r2)
    return t1, t2


def summarize(trace, window=True):
    servers = trace.correct()
    n = trace.n
    if window:
        t1, t2 = _window(trace, servers, 10 * n, 110 * n)
    else:
        t1 = 0
        t2 = max((trace.deliveries[s][-1][4] for s in servers if trace.deliveries.get(s)), default=0)
    span = max(t2 - t1, 1)
    rows = []
    for s in servers:
        lat, count, rounds = [], 0, 0
        for rnd, epoch, rel, msgs, t, line in trace.deliveries.get(s, []):
            if t1 <= t <= t2:
                count += len(msgs)
                rounds += 1
                sent = trace.broadcasts.get(s, {}).get(rnd)
                if sent is not None and any(src == s for src, _ in msgs):
                    lat.append((t - sent[0]) / 1000.0)
        if lat:
            med, lo, hi = median_ci(lat)
        else:
            med = lo = hi = float("nan")
        rows.append((s, round(med, 3), round(lo, 3), round(hi, 3),
                     round(count / (span / 1e9), 3), rounds, trace.tx_per_server.get(s, 0)))
    per_message = dict(trace.tx_per_msg)
    return Metrics(rows, Counter(trace.histogram), per_message, (t1, t2))


def round_durations(trace):
    """Mean time (ns) a correct server spends per completed round, keyed by round type."""
    acc = defaultdict(list)
    last = {}
    for t, s, ev, before, after, info in trace.records:
        if ev != "transition":
            continue
        name = info[0]
        if s in last and name in ("uu", "rf", "rr"):
            kind = "R" if before.kind == RELIABLE else "U"
            acc[kind].append(t - last[s])
        last[s] = t
    return {k: sum(v) / len(v) for k, v in acc.items() if v}


def round_rate(trace):
    """Delivered rounds per simulated second, averaged over correct servers."""
    rates = []
    for s in trace.correct():
        log = trace.deliveries.get(s, [])
        if len(log) >= 2:
            span = log[-1][4] - log[0][4]
            if span > 0:
                rates.append((len(log) - 1) / (span / 1e9))
    return sum(rates) / len(rates) if rates else 0.0
