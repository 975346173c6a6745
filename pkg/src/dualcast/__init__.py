"""Leaderless atomic broadcast over an unreliable and a reliable overlay digraph."""

from .overlay import (Digraph, DigraphSpec, build_overlay, remove_servers, transpose,
                      vertex_connectivity)
from .protocol import Label, Message, Server, apply_transition, init_server
from .sim import Scenario, Trace, parse_scenario, run

__version__ = "0.1.0"

__all__ = ["Digraph", "DigraphSpec", "build_overlay", "remove_servers", "transpose",
           "vertex_connectivity", "Label", "Message", "Server", "apply_transition",
           "init_server", "Scenario", "Trace", "parse_scenario", "run", "__version__"]
