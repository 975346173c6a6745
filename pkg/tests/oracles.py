"""Independent reference computations used as test oracles.

Nothing here imports the networkx-backed code paths: connectivity is
found by enumerating vertex cuts and reachability by plain search.
"""

from itertools import combinations


def reach(succ, root, removed=frozenset()):
    seen = {root}
    stack = [root]
    while stack:
        u = stack.pop()
        for v in succ.get(u, ()):
            if v not in removed and v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def strongly_connected(vertices, succ, removed=frozenset()):
    alive = [v for v in vertices if v not in removed]
    if not alive:
        return False
    pred = {v: [] for v in vertices}
    for u in vertices:
        for v in succ.get(u, ()):
            pred[v].append(u)
    root = alive[0]
    return (len(reach(succ, root, removed)) == len(alive)
            and len(reach(pred, root, removed)) == len(alive))


def brute_force_connectivity(vertices, edges):
    """Smallest vertex set whose removal leaves a digraph that is not strongly connected.

    A digraph with every ordered pair adjacent has no such cut; its
    connectivity is n-1 by convention.
    """
    vertices = list(vertices)
    n = len(vertices)
    succ = {v: set() for v in vertices}
    for u, v in edges:
        succ[u].add(v)
    if not strongly_connected(vertices, succ):
        return 0
    for k in range(1, n - 1):
        for cut in combinations(vertices, k):
            if not strongly_connected(vertices, succ, frozenset(cut)):
                return k
    return n - 1


def circulant_edges(n, d):
    return [(i, (i + k) % n) for i in range(n) for k in range(1, d + 1)]


def relabel(edges, mapping):
    return [(mapping[u], mapping[v]) for u, v in edges]


def flatten_logs(trace, servers):
    """Per-server delivery sequence of (round, source) pairs."""
    return {s: [(e[0], src) for e in trace.deliveries.get(s, []) for src, _ in e[3]] for s in servers}


def prefix_compatible(a, b):
    k = min(len(a), len(b))
    return a[:k] == b[:k]
