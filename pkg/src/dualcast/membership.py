"""Protocol extensions: partition gating, uniform delivery and eon changes."""

from dataclasses import dataclass, field

from .overlay import Digraph

EON_TAG = b"|eon:"


class ConfigError(ValueError):
    pass


@dataclass
class PartitionProbe:
    round: tuple
    forward_acks: set = field(default_factory=set)
    backward_acks: set = field(default_factory=set)
    started_at: int = None


def partition_gate(probe, n):
    """Strict majority of both forward and backward acknowledgements."""
    return 2 * len(probe.forward_acks) > n and 2 * len(probe.backward_acks) > n


def check_uniform_config(n, f):
    if 2 * f >= n:
        raise ConfigError("uniform delivery needs n > 2f (n=%d, f=%d)" % (n, f))


def uniform_gate(witnesses, f, self_id=None):
    """True once at least ``f`` other servers have been seen two rounds ahead."""
    if f <= 0:
        return True
    seen = set(witnesses)
    seen.discard(self_id)
    return len(seen) >= f


@dataclass
class EonState:
    eon: int
    current_gr: Digraph
    next_gr: Digraph = None
    in_transitional_round: bool = False

    def check(self):
        assert (self.next_gr is not None) == self.in_transitional_round


def encode_reconfig(spec_text):
    return EON_TAG + spec_text.encode()


def decode_reconfig(payload):
    """Return the reliable-overlay spec text embedded in a payload, if any."""
    if not payload:
        return None
    i = payload.find(EON_TAG)
    if i < 0:
        return None
    return payload[i + len(EON_TAG):].decode()


def begin_eon_transition(state, new_gr):
    """Enter the transitional round: stage ``new_gr`` alongside the current overlay.

    All protocol traffic stays on the current overlay; the caller starts
    heartbeats on ``new_gr`` so its detector is warm when the eon flips.
    """
    eon = state.eon_state
    if eon.in_transitional_round:
        raise ConfigError("already in a transitional round")
    members = set(state.gr.vertices)
    if set(new_gr.vertices) != members:
        raise ConfigError("next overlay must span the current members %s" % sorted(members))
    eon.next_gr = new_gr
    eon.in_transitional_round = True
    return []


def finish_eon_transition(state, removed):
    """Flip to the staged overlay once the transitional round completes."""
    from .overlay import remove_servers
    eon = state.eon_state
    nxt = remove_servers(eon.next_gr, removed) if removed else eon.next_gr
    eon.eon += 1
    eon.current_gr = nxt
    eon.next_gr = None
    eon.in_transitional_round = False
    return nxt
