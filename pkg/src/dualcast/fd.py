"""Heartbeat failure detection over the reliable overlay.

Each server sends heartbeats to its successors and watches its
predecessors. A predecessor that stays silent for longer than the timeout
is suspected once and a notification is emitted for it.
"""

from dataclasses import dataclass

PERFECT = "perfect"
EVENTUAL = "ep"


@dataclass(frozen=True)
class FailureNotification:
    target: int
    owner: int
    eon: int = 1

    @property
    def key(self):
        return (self.target, self.owner)


@dataclass(frozen=True)
class FdConfig:
    heartbeat_period: int
    timeout: int
    mode: str = PERFECT

    def validate(self):
        if not (self.timeout > self.heartbeat_period > 0):
            raise ValueError("need timeout > heartbeat period > 0")
        if self.mode not in (PERFECT, EVENTUAL):
            raise ValueError("unknown detector mode %r" % (self.mode,))
        return self


@dataclass(frozen=True)
class Heartbeat:
    to: tuple
    eon: int


class FdState:
    def __init__(self, owner, predecessors, successors, config, now=0, eon=1):
        self.owner = owner
        self.eon = eon
        self.config = config
        self.successors = tuple(successors)
        self.last_heard = {p: now for p in predecessors}
        self.suspected = set()
        self.next_beat = now

    @property
    def predecessors(self):
        return set(self.last_heard)

    def heard(self, pred, now):
        if pred in self.last_heard and now > self.last_heard[pred]:
            self.last_heard[pred] = now

    def forget(self, servers):
        """Stop watching removed servers and stop sending them heartbeats."""
        for p in servers:
            self.last_heard.pop(p, None)
        self.successors = tuple(s for s in self.successors if s not in servers)


def fd_tick(fd, now):
    out = []
    if now >= fd.next_beat:
        if fd.successors:
            out.append(Heartbeat(fd.successors, fd.eon))
        period = fd.config.heartbeat_period
        while fd.next_beat <= now:
            fd.next_beat += period
    for pred in sorted(fd.last_heard):
        if pred in fd.suspected:
            continue
        if now - fd.last_heard[pred] > fd.config.timeout:
            fd.suspected.add(pred)
            out.append(FailureNotification(pred, fd.owner, fd.eon))
    return out


def should_suppress(fd, sender, is_notification):
    """True for non-notification traffic from a suspected predecessor under eventual accuracy."""
    if fd is None or fd.config.mode != EVENTUAL or is_notification:
        return False
    return sender in fd.suspected
