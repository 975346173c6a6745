"""Overlay digraphs: construction, mutation and connectivity.

Two families serve the unreliable mode (``ring`` and ``binomial``) and two
serve the reliable mode (``circulant`` and ``edges``). Successor lists are
kept sorted so every traversal is reproducible.
"""

from dataclasses import dataclass
from collections import deque

import networkx as nx
from networkx.algorithms.connectivity import (build_auxiliary_node_connectivity,
                                             local_node_connectivity)
from networkx.algorithms.flow import build_residual_network

RING = "ring"
BINOMIAL = "binomial"
CIRCULANT = "circulant"
EDGES = "edges"

FAMILIES = (RING, BINOMIAL, CIRCULANT, EDGES)
UNRELIABLE_FAMILIES = (RING, BINOMIAL)


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class DigraphSpec:
    family: str
    n: int
    d: int = 0
    edges: tuple = ()

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidSpec("unknown family %r" % (self.family,))
        if self.n < 2:
            raise InvalidSpec("need n >= 2, got %d" % self.n)
        if self.family == CIRCULANT and not (1 <= self.d < self.n):
            raise InvalidSpec("circulant degree %d out of range for n=%d" % (self.d, self.n))
        if self.family == EDGES:
            for u, v in self.edges:
                if u == v:
                    raise InvalidSpec("self-loop on %d" % u)
        return self


class Digraph:
    """Directed graph with sorted successor tuples.

    ``family`` remembers how the graph was built, which matters for the
    unreliable overlays: removing servers rebuilds them rather than deleting
    edges, and the binomial family forwards along a per-source tree.
    """

    __slots__ = ("vertices", "succ", "family", "d", "_pred", "_relay", "_index")

    def __init__(self, vertices, edges=(), family=EDGES, d=0):
        self.vertices = tuple(sorted(set(vertices)))
        members = set(self.vertices)
        succ = {v: set() for v in self.vertices}
        for u, v in edges:
            if u == v:
                continue
            if u not in members or v not in members:
                raise InvalidSpec("edge (%d, %d) leaves the vertex set" % (u, v))
            succ[u].add(v)
        self.succ = {v: tuple(sorted(s)) for v, s in succ.items()}
        self.family = family
        self.d = d
        self._pred = None
        self._relay = {}
        self._index = None

    def __contains__(self, v):
        return v in self.succ

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        return isinstance(other, Digraph) and self.succ == other.succ

    def __hash__(self):
        return hash(tuple(self.succ.items()))

    def __repr__(self):
        return "Digraph(%s, n=%d, m=%d)" % (self.family, len(self.vertices), self.edge_count())

    def successors(self, v):
        return self.succ[v]

    def predecessors(self, v):
        if self._pred is None:
            pred = {u: [] for u in self.vertices}
            for u in self.vertices:
                for w in self.succ[u]:
                    pred[w].append(u)
            self._pred = {u: tuple(sorted(p)) for u, p in pred.items()}
        return self._pred[v]

    def edges(self):
        return [(u, v) for u in self.vertices for v in self.succ[u]]

    def edge_count(self):
        return sum(len(s) for s in self.succ.values())

    def has_edge(self, u, v):
        return u in self.succ and v in self.succ[u]

    def relay_targets(self, node, source):
        """Where ``node`` sends a message that originated at ``source``.

        Binomial overlays forward along the source's binomial tree laid out
        on the cyclic vertex order. Other families send to every successor
        except the source itself, which already holds the message.
        """
        key = (node, source)
        hit = self._relay.get(key)
        if hit is not None:
            return hit
        if self.family == BINOMIAL:
            if self._index is None:
                self._index = {v: i for i, v in enumerate(self.vertices)}
            m = len(self.vertices)
            k = (self._index[node] - self._index[source]) % m
            out = []
            step = 1 << k.bit_length()
            while k + step < m:
                out.append(self.vertices[(self._index[source] + k + step) % m])
                step <<= 1
            hit = tuple(out)
        else:
            hit = tuple(v for v in self.succ[node] if v != source)
        self._relay[key] = hit
        return hit

    def reachable_from(self, source, relay=False):
        """Vertices reached from ``source``; ``relay`` follows the forwarding rule."""
        seen = {source}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            nxt = self.relay_targets(u, source) if relay else self.succ[u]
            for v in nxt:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen


def _ring_edges(vs):
    m = len(vs)
    if m < 2:
        return []
    if m == 2:
        return [(vs[0], vs[1]), (vs[1], vs[0])]
    return [(vs[i], vs[(i + 1) % m]) for i in range(m)]


def _circulant_edges(vs, d):
    m = len(vs)
    return [(vs[i], vs[(i + k) % m]) for i in range(m) for k in range(1, d + 1) if k < m]


def build_overlay(spec, vertices=None):
    """Build the digraph described by ``spec`` over ``vertices`` (default 0..n-1)."""
    spec.validate()
    vs = sorted(vertices) if vertices is not None else list(range(spec.n))
    if spec.family in (RING, BINOMIAL):
        # the binomial skeleton is the cyclic order its trees are laid on
        return Digraph(vs, _ring_edges(vs), family=spec.family)
    if spec.family == CIRCULANT:
        d = min(spec.d, len(vs) - 1)
        return Digraph(vs, _circulant_edges(vs, d), family=CIRCULANT, d=d)
    return Digraph(vs, spec.edges, family=EDGES)


def transpose(g):
    t = Digraph(g.vertices, [(v, u) for u, v in g.edges()], family=EDGES)
    return t


def remove_servers(g, removed):
    removed = set(removed)
    survivors = [v for v in g.vertices if v not in removed]
    if not removed & set(g.vertices):
        return g
    if g.family in UNRELIABLE_FAMILIES:
        return build_overlay(DigraphSpec(g.family, max(len(survivors), 2)), survivors) \
            if len(survivors) >= 2 else Digraph(survivors, (), family=g.family)
    kept = [(u, v) for u, v in g.edges() if u not in removed and v not in removed]
    return Digraph(survivors, kept, family=g.family, d=g.d)


def is_strongly_connected(g):
    if not g.vertices:
        return False
    root = g.vertices[0]
    if len(g.reachable_from(root)) != len(g.vertices):
        return False
    return len(transpose(g).reachable_from(root)) == len(g.vertices)


def vertex_connectivity(g):
    """Minimum vertex cut that breaks strong connectivity (n-1 for complete digraphs).

    Even's scheme: some vertex among the first kappa+1 survives a minimum
    cut, so only flows out of and into those vertices are needed. Local
    flows come from networkx; its global digraph routine skips pairs that
    are adjacent in one direction only and can overestimate.
    """
    key = tuple(g.succ.items())
    hit = _KAPPA_CACHE.get(key)
    if hit is None:
        hit = _KAPPA_CACHE[key] = _vertex_connectivity(g)
    return hit


_KAPPA_CACHE = {}


def _vertex_connectivity(g):
    n = len(g.vertices)
    if n <= 1:
        return 0
    if not is_strongly_connected(g):
        return 0
    G = nx.DiGraph()
    G.add_nodes_from(g.vertices)
    G.add_edges_from(g.edges())
    aux = build_auxiliary_node_connectivity(G)
    residual = build_residual_network(aux, "capacity")
    best = n - 1
    order = g.vertices
    i = 0
    while i < n and i <= best:
        v = order[i]
        for w in order[i + 1:]:
            for a, b in ((v, w), (w, v)):
                if not g.has_edge(a, b):
                    k = local_node_connectivity(G, a, b, auxiliary=aux, residual=residual, cutoff=best)
                    best = min(best, k)
        i += 1
    return best


def parse_edge_list(text):
    edges = []
    vertices = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidSpec("line %d: expected 'u v', got %r" % (lineno, raw))
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise InvalidSpec("line %d: non-integer vertex in %r" % (lineno, raw))
        if u == v:
            raise InvalidSpec("line %d: self-loop on %d" % (lineno, u))
        edges.append((u, v))
        vertices.update((u, v))
    return Digraph(vertices, edges, family=EDGES)


def format_edge_list(g):
    lines = ["# %d vertices, %d edges" % (len(g.vertices), g.edge_count())]
    lines += ["%d %d" % e for e in g.edges()]
    return "\n".join(lines) + "\n"


def load_edge_list(path):
    with open(path) as fh:
        return parse_edge_list(fh.read())


def save_edge_list(g, path):
    with open(path, "w") as fh:
        fh.write(format_edge_list(g))


def parse_family(text, n):
    """Parse ``ring``, ``binomial``, ``circulant:D`` or ``edges:PATH`` into a spec."""
    name, _, arg = text.strip().partition(":")
    if name in (RING, BINOMIAL):
        if arg:
            raise InvalidSpec("%s takes no argument" % name)
        return DigraphSpec(name, n)
    if name == CIRCULANT:
        try:
            d = int(arg)
        except ValueError:
            raise InvalidSpec("circulant needs an integer degree, got %r" % arg)
        return DigraphSpec(CIRCULANT, n, d)
    if name == EDGES:
        if not arg:
            raise InvalidSpec("edges needs a file path")
        g = load_edge_list(arg)
        return DigraphSpec(EDGES, n, edges=tuple(g.edges()))
    raise InvalidSpec("unknown family %r" % name)
