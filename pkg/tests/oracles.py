"""Independent oracles shared by the optimizer and acceptance tests."""

from __future__ import annotations

import functools
import itertools

import numpy as np

from mugraph import fixtures
from mugraph.generator import construct_thread_graphs
from mugraph.ir import BlockGraph, Graph, OpType, ThreadGraph


def fixture_graphs() -> list[tuple[str, Graph]]:
    """Every program, block graph and thread graph reachable from the fixtures."""
    out: list[tuple[str, Graph]] = []

    def walk(name: str, g: Graph) -> None:
        out.append((name, g))
        for k, op in enumerate(g.ops):
            if isinstance(op.graph, (BlockGraph, ThreadGraph)):
                walk(f"{name}/{k}", op.graph)

    for name, suite in sorted(fixtures.suites().items()):
        walk(f"{name}.program", suite.program)
    for name in ("rmsnorm", "lora", "gatedmlp", "qknorm", "attention"):
        fused = getattr(fixtures, f"{name}_fused")()
        walk(f"{name}.fused", fused)
        walk(f"{name}.threads", construct_thread_graphs(fused))
    walk("rmsnorm.unfused", fixtures.rmsnorm_unfused_kernels())
    walk("rmsnorm.unfused.threads", construct_thread_graphs(fixtures.rmsnorm_unfused_kernels()))
    return out


def min_segments(g: Graph) -> int:
    """Fewest barrier-free segments, by search over ordered set partitions.

    A segment may only hold operators whose producers all ran in earlier
    segments. In a block graph, loop-body operators (those not downstream of
    an Accum) must all finish before any post-loop operator, and a segment
    never mixes the two.
    """
    ids = [op.id for op in g.ops]
    if not ids:
        return 0
    made_by = {t: op.id for op in g.ops for t in op.outputs}
    deps = {op.id: frozenset(made_by[t] for t in op.inputs if t in made_by) for op in g.ops}
    post = set()
    if isinstance(g, BlockGraph):
        kind = {op.id: op.type for op in g.ops}
        changed = True
        while changed:
            changed = False
            for o in ids:
                if o not in post and any(kind[d] is OpType.ACCUM or d in post for d in deps[o]):
                    post.add(o)
                    changed = True
    loop = frozenset(o for o in ids if o not in post)

    @functools.lru_cache(maxsize=None)
    def best(done: frozenset) -> int:
        if len(done) == len(ids):
            return 0
        ready = [o for o in ids if o not in done and deps[o] <= done]
        if not loop <= done:
            ready = [o for o in ready if o in loop]
        result = len(ids)
        for r in range(len(ready), 0, -1):
            for group in itertools.combinations(ready, r):
                result = min(result, 1 + best(done | frozenset(group)))
        return result

    return best(frozenset())


def interval_overlap(a, b) -> bool:
    return not (a.end < b.start or b.end < a.start)


def milp_peak(intervals) -> int:
    """Optimal peak of a dynamic storage allocation as a big-M mixed integer program."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    ivs = list(intervals)
    n = len(ivs)
    if n == 0:
        return 0
    total = sum(iv.size for iv in ivs)
    big = 2 * total
    pairs = [(i, j) for i, j in itertools.combinations(range(n), 2) if interval_overlap(ivs[i], ivs[j])]
    nv = n + 1 + len(pairs)
    rows, ub = [], []
    for i, iv in enumerate(ivs):
        r = np.zeros(nv)
        r[i], r[n] = 1, -1
        rows.append(r)
        ub.append(-iv.size)
    for k, (i, j) in enumerate(pairs):
        y = n + 1 + k
        r = np.zeros(nv)  # y = 1 puts i below j
        r[i], r[j], r[y] = 1, -1, big
        rows.append(r)
        ub.append(big - ivs[i].size)
        r = np.zeros(nv)  # y = 0 puts j below i
        r[j], r[i], r[y] = 1, -1, -big
        rows.append(r)
        ub.append(-ivs[j].size)
    c = np.zeros(nv)
    c[n] = 1
    integrality = np.zeros(nv)
    integrality[n + 1:] = 1
    hi = np.full(nv, float(total))
    hi[n + 1:] = 1
    res = milp(c, constraints=LinearConstraint(np.array(rows), -np.inf, np.array(ub)),
               integrality=integrality, bounds=Bounds(np.zeros(nv), hi))
    assert res.success, res.message
    return int(round(res.fun))
