"""Post-verification optimization: layouts, schedules, memory plans and cost.

None of these stages changes what a µGraph computes; they only decide how
its tensors are laid out, in which order block operators run, and where
shared tensors live. ``docs/cost_model.md`` documents the cost formula.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .generator import Candidate, construct_thread_graphs
from .ir import (DEFAULT_ELEM_BYTES, DEFAULT_SMEM_LIMIT, ELEMENTWISE, BlockGraph, Graph, KernelGraph,
                 MuGraphError, Op, OpType, Scope, Shape, ThreadGraph, canonical_key)


class Infeasible(MuGraphError):
    pass


class DoesNotFit(MuGraphError):
    def __init__(self, peak: int, limit: int):
        super().__init__(f"shared memory plan needs {peak} bytes, limit is {limit}")
        self.peak = peak
        self.limit = limit


@dataclass(frozen=True)
class CostWeights:
    w_device: float = 1.0
    w_shared: float = 0.02
    w_kernel_launch: float = 4096.0
    w_compute: float = 0.002
    sm_count: int = 108
    sector_bytes: int = 32

    def __post_init__(self) -> None:
        if min(self.w_device, self.w_shared, self.w_kernel_launch, self.w_compute) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.sm_count < 1 or self.sector_bytes < 1:
            raise ValueError("sm_count and sector_bytes must be positive")

    @classmethod
    def parse(cls, text: str, base: "CostWeights | None" = None) -> "CostWeights":
        """``"wDevice=1,wShared=0.1"`` style overrides of ``base`` (default weights)."""
        names = {"wDevice": "w_device", "wShared": "w_shared", "wKernelLaunch": "w_kernel_launch",
                 "wCompute": "w_compute", "smCount": "sm_count", "sectorBytes": "sector_bytes"}
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            if key not in names:
                raise ValueError(f"unknown weight {key!r}")
            attr = names[key]
            kw[attr] = int(val) if attr in ("sm_count", "sector_bytes") else float(val)
        return replace(base, **kw) if base is not None else cls(**kw)

    def to_json(self) -> dict:
        return {"wDevice": self.w_device, "wShared": self.w_shared, "wKernelLaunch": self.w_kernel_launch,
                "wCompute": self.w_compute, "smCount": self.sm_count, "sectorBytes": self.sector_bytes}


# ---------------------------------------------------------------------------
# layouts

Layout = tuple  # permutation of dimensions; the last entry is innermost


def layouts_for(shape: Shape) -> list[Layout]:
    """All permutations, one representative per order of the non-unit dimensions."""
    seen, out = set(), []
    for perm in itertools.permutations(range(len(shape))):
        key = tuple(d for d in perm if shape[d] > 1)
        if key not in seen:
            seen.add(key)
            out.append(perm)
    return out


def innermost(layout: Layout, shape: Shape) -> int | None:
    for d in reversed(layout):
        if shape[d] > 1:
            return d
    return None


def same_order(a: Layout, b: Layout, shape: Shape) -> bool:
    return [d for d in a if shape[d] > 1] == [d for d in b if shape[d] > 1]


def matmul_operand_ok(layout: Layout, shape: Shape) -> bool:
    """Matmul operands keep their innermost dimension among the last two."""
    d = innermost(layout, shape)
    return d is None or d >= len(shape) - 2


def run_length(layout: Layout, tile: Shape, full: Shape) -> int:
    """Contiguous elements per run when a tile is read from a tensor stored in ``layout``."""
    r = 1
    for d in reversed(layout):
        r *= tile[d]
        if tile[d] != full[d]:
            break
    return r


def coalescing_factor(layout: Layout, tile: Shape, full: Shape, elem_bytes: int, sector: int) -> float:
    """Bytes moved per useful byte at sector granularity."""
    run = run_length(layout, tile, full) * elem_bytes
    return math.ceil(run / sector) * sector / run


@dataclass
class _Var:
    key: tuple
    shape: Shape
    domain: list[Layout]


@dataclass
class _Term:
    vars: tuple[int, ...]
    fn: Callable[..., float]
    table: dict = field(default_factory=dict)


@dataclass
class LayoutAssignment:
    layouts: dict[tuple, Layout]
    cost: float
    method: str
    explored: int

    def get(self, key: tuple, shape: Shape) -> Layout:
        return self.layouts.get(key, tuple(range(len(shape))))

    def to_json(self) -> dict:
        return {"cost": self.cost, "method": self.method, "explored": self.explored,
                "layouts": [{"tensor": list(k), "layout": list(v)} for k, v in sorted(self.layouts.items())]}


class LayoutProblem:
    """Per-tensor layout variables, unary constraints and small cost terms."""

    def __init__(self):
        self.vars: list[_Var] = []
        self.index: dict[tuple, int] = {}
        self.terms: list[_Term] = []

    def var(self, key: tuple, shape: Shape) -> int:
        if key not in self.index:
            self.index[key] = len(self.vars)
            self.vars.append(_Var(key, shape, layouts_for(shape)))
        return self.index[key]

    def constrain(self, v: int, pred: Callable[[Layout], bool]) -> None:
        var = self.vars[v]
        var.domain = [lay for lay in var.domain if pred(lay)]

    def term(self, vs: Sequence[int], fn: Callable[..., float]) -> None:
        self.terms.append(_Term(tuple(vs), fn))

    def size(self) -> int:
        return math.prod(len(v.domain) for v in self.vars)

    def _tables(self) -> None:
        for t in self.terms:
            t.table = {combo: t.fn(*(self.vars[v].domain[i] for v, i in zip(t.vars, combo)))
                       for combo in itertools.product(*(range(len(self.vars[v].domain)) for v in t.vars))}

    def _result(self, best, best_cost, method, explored) -> LayoutAssignment:
        return LayoutAssignment({v.key: v.domain[i] for v, i in zip(self.vars, best)}, best_cost, method,
                                explored)

    def solve_exhaustive(self) -> LayoutAssignment:
        if any(not v.domain for v in self.vars):
            raise Infeasible("a tensor admits no layout under the constraints")
        self._tables()
        best, best_cost, explored = None, math.inf, 0
        for combo in itertools.product(*(range(len(v.domain)) for v in self.vars)):
            explored += 1
            c = sum(t.table[tuple(combo[v] for v in t.vars)] for t in self.terms)
            if c < best_cost - 1e-12:
                best, best_cost = combo, c
        return self._result(best, best_cost, "exhaustive", explored)

    def solve_branch_and_bound(self) -> LayoutAssignment:
        if any(not v.domain for v in self.vars):
            raise Infeasible("a tensor admits no layout under the constraints")
        self._tables()
        n = len(self.vars)
        # each term is charged once its last variable (in order) is assigned
        closing: list[list[_Term]] = [[] for _ in range(n)]
        for t in self.terms:
            closing[max(t.vars)].append(t) if t.vars else None
        const = sum(t.table[()] for t in self.terms if not t.vars)
        term_min = [min(t.table.values()) if t.vars else 0.0 for t in self.terms]
        # suffix lower bound: minimum of every term not yet closed
        rest = [0.0] * (n + 1)
        for i in range(n - 1, -1, -1):
            rest[i] = rest[i + 1] + sum(term_min[self.terms.index(t)] for t in closing[i])
        assign = [0] * n
        best: list = [None, math.inf]
        explored = 0

        def dfs(i: int, acc: float) -> None:
            nonlocal explored
            explored += 1
            if acc + rest[i] >= best[1] - 1e-12:
                return
            if i == n:
                best[0], best[1] = tuple(assign), acc
                return
            options = []
            for k in range(len(self.vars[i].domain)):
                assign[i] = k
                options.append((acc + sum(t.table[tuple(assign[v] for v in t.vars)] for t in closing[i]), k))
            for c, k in sorted(options):
                assign[i] = k
                dfs(i + 1, c)

        dfs(0, const)
        return self._result(best[0], best[1], "branch-and-bound", explored)

    def components(self) -> list["LayoutProblem"]:
        """Independent subproblems: variables linked by a shared term."""
        parent = list(range(len(self.vars)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for t in self.terms:
            for v in t.vars[1:]:
                parent[find(v)] = find(t.vars[0])
        groups: dict[int, list[int]] = {}
        for v in range(len(self.vars)):
            groups.setdefault(find(v), []).append(v)
        subs = []
        for members in groups.values():
            sub = LayoutProblem()
            remap = {v: sub.var(self.vars[v].key, self.vars[v].shape) for v in members}
            for v in members:
                sub.vars[remap[v]].domain = self.vars[v].domain
            sub.terms = [_Term(tuple(remap[v] for v in t.vars), t.fn) for t in self.terms
                         if t.vars and find(t.vars[0]) == find(members[0])]
            subs.append(sub)
        return subs

    def solve(self, exhaustive_limit: int = 10 ** 6) -> LayoutAssignment:
        """Exact optimum, solving independent components separately."""
        if any(not v.domain for v in self.vars):
            raise Infeasible("a tensor admits no layout under the constraints")
        layouts, total, explored, methods = {}, 0.0, 0, set()
        for sub in self.components():
            res = sub.solve_exhaustive() if sub.size() <= exhaustive_limit else sub.solve_branch_and_bound()
            layouts.update(res.layouts)
            total += res.cost
            explored += res.explored
            methods.add(res.method)
        method = "exhaustive" if methods <= {"exhaustive"} else "branch-and-bound"
        return LayoutAssignment(layouts, total, method, explored)


def _penalty_terms(prob: LayoutProblem, op: Op, g: Graph, key: Callable[[int], tuple], scale: float,
                   weight: float) -> None:
    """Layout costs of one operator: extra bytes moved because of layout choices."""
    eb = DEFAULT_ELEM_BYTES
    outs = op.outputs
    if op.type in (OpType.MATMUL, OpType.CONCAT_MATMUL):
        for t in op.inputs:
            s = g.shape(t)
            v = prob.var(key(t), s)
            prob.constrain(v, lambda lay, s=s: matmul_operand_ok(lay, s))
            nbytes = math.prod(s) * eb * scale * weight
            # row-major operands stream without bank conflicts
            prob.term([v], lambda lay, s=s, nb=nbytes: 0.0 if innermost(lay, s) in (None, len(s) - 1) else nb)
        return
    if op.type in ELEMENTWISE or op.type in (OpType.ACCUM, OpType.THREAD_GRAPH):
        o = outs[0]
        so = g.shape(o)
        vo = prob.var(key(o), so)
        for t in op.inputs:
            s = g.shape(t)
            if len(s) != len(so):
                continue
            vi = prob.var(key(t), s)
            if vi == vo:
                continue
            nbytes = math.prod(s) * eb * scale * weight
            prob.term([vi, vo], lambda a, b, s=s, nb=nbytes: 0.0 if same_order(a, b, s) else nb)


def _tile_terms(prob: LayoutProblem, bg: BlockGraph, op_index: int, kernel_op: Op, w: CostWeights,
                scale: float) -> None:
    eb = DEFAULT_ELEM_BYTES
    for i, t in enumerate(bg.inputs):
        kt = kernel_op.inputs[i]
        full = bg.shape(t)
        tile = next(bg.shape(op.outputs[0]) for op in bg.ops
                    if op.type is OpType.IN_ITER and op.inputs[0] == t)
        v = prob.var(("K", kt), full)
        reads = math.prod(tile) * eb * scale * bg.forloop
        prob.term([v], lambda lay, tile=tile, full=full, nb=reads:
                  nb * (coalescing_factor(lay, tile, full, eb, w.sector_bytes) - 1) * w.w_device)
    for j, t in enumerate(bg.outputs):
        kt = kernel_op.outputs[j]
        full = bg.shape(t)
        saver = next(op for op in bg.ops if op.type is OpType.OUT_SAVER and op.outputs[0] == t)
        tile = bg.shape(saver.inputs[0])
        v = prob.var(("K", kt), full)
        writes = math.prod(tile) * eb * scale
        prob.term([v], lambda lay, tile=tile, full=full, nb=writes:
                  nb * (coalescing_factor(lay, tile, full, eb, w.sector_bytes) - 1) * w.w_device)


def build_layout_problem(g: KernelGraph, w: CostWeights = CostWeights()) -> LayoutProblem:
    prob = LayoutProblem()
    for t in g.tensors:
        prob.var(("K", t), g.shape(t))
    for j, op in enumerate(g.ops):
        if op.type is OpType.GRAPH_DEF and isinstance(op.graph, BlockGraph):
            bg = op.graph
            blocks = math.prod(bg.grid)
            dev = dict(zip(bg.inputs, op.inputs)) | dict(zip(bg.outputs, op.outputs))

            def key(t, j=j, dev=dev):
                return ("K", dev[t]) if t in dev else ("B", j, t)

            loop_ops = bg.loop_phase()
            for bop in bg.ops:
                if bop.type in (OpType.IN_ITER, OpType.OUT_SAVER):
                    continue
                reps = blocks * (bg.forloop if bop.id in loop_ops and bop.type is not OpType.ACCUM else 1)
                _penalty_terms(prob, bop, bg, key, reps, w.w_shared)
            _tile_terms(prob, bg, j, op, w, blocks)
        else:
            _penalty_terms(prob, op, g, lambda t: ("K", t), 1, w.w_device)
    return prob


def choose_layouts(g: KernelGraph, w: CostWeights = CostWeights(), method: str = "auto") -> LayoutAssignment:
    prob = build_layout_problem(g, w)
    if method == "exhaustive":
        return prob.solve_exhaustive()
    if method == "branch-and-bound":
        return prob.solve_branch_and_bound()
    return prob.solve()


# ---------------------------------------------------------------------------
# scheduling


@dataclass(frozen=True)
class Schedule:
    order: tuple[int, ...]  # op ids
    depth: dict[int, int]
    syncs: tuple[int, ...]  # positions in ``order`` preceded by a barrier
    phase: dict[int, int] = field(default_factory=dict)  # 0 loop body, 1 after the loop

    @property
    def sync_count(self) -> int:
        return len(self.syncs)

    def segment_of(self) -> dict[int, int]:
        """Barrier-free segment index of every operator."""
        seg, k = {}, 0
        for pos, o in enumerate(self.order):
            if pos in self.syncs:
                k += 1
            seg[o] = k
        return seg

    def to_json(self) -> dict:
        return {"order": list(self.order), "depth": {str(k): v for k, v in self.depth.items()},
                "phase": {str(k): v for k, v in self.phase.items()}, "syncs": list(self.syncs)}


def op_phases(g: Graph) -> dict[int, int]:
    """0 for operators in the loop body (all of them outside block graphs), 1 after the loop."""
    if isinstance(g, BlockGraph):
        loop = g.loop_phase()
        return {op.id: 0 if op.id in loop else 1 for op in g.ops}
    return {op.id: 0 for op in g.ops}


def op_depths(g: Graph) -> dict[int, int]:
    """Longest operator path within the operator's phase; phase sources have depth 1."""
    prod = g.producers()
    phase = op_phases(g)
    depth: dict[int, int] = {}
    for op in g.ops:
        depth[op.id] = 1 + max((depth[prod[t].id] for t in op.inputs
                                if t in prod and phase[prod[t].id] == phase[op.id]), default=0)
    return depth


def schedule_ops(g: Graph) -> Schedule:
    """Group operators by (phase, depth); a barrier separates consecutive groups."""
    depth = op_depths(g)
    phase = op_phases(g)
    level = {o: (phase[o], depth[o]) for o in depth}
    order = tuple(sorted(depth, key=lambda o: (level[o], o)))
    syncs = tuple(k for k in range(1, len(order)) if level[order[k]] != level[order[k - 1]])
    return Schedule(order, depth, syncs, phase)


def min_syncs_bruteforce(g: Graph) -> int:
    """Fewest barriers over every topological order, splitting greedily.

    Loop-body operators come before post-loop ones and the two never share
    a segment.
    """
    prod = g.producers()
    phase = op_phases(g)
    deps = {op.id: {prod[t].id for t in op.inputs if t in prod} for op in g.ops}
    ids = [op.id for op in g.ops]
    best = math.inf
    for perm in itertools.permutations(ids):
        pos = {o: k for k, o in enumerate(perm)}
        if any(pos[d] > pos[o] for o in ids for d in deps[o]):
            continue
        if any(phase[a] > phase[b] for a, b in zip(perm, perm[1:])):
            continue
        syncs, segment, seg_phase = 0, set(), None
        for o in perm:
            if deps[o] & segment or (segment and phase[o] != seg_phase):
                syncs += 1
                segment = set()
            segment.add(o)
            seg_phase = phase[o]
        best = min(best, syncs)
    return int(best) if ids else 0


# ---------------------------------------------------------------------------
# memory planning


@dataclass(frozen=True)
class Interval:
    tensor: int
    size: int
    start: int
    end: int

    def overlaps(self, other: "Interval") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class MemoryPlan:
    offsets: dict[int, int]
    peak: int
    method: str

    def to_json(self) -> dict:
        return {"peak": self.peak, "method": self.method,
                "offsets": {str(k): v for k, v in sorted(self.offsets.items())}}


def lifetimes(g: Graph, sched: Schedule, elem_bytes: int = DEFAULT_ELEM_BYTES) -> list[Interval]:
    """Shared tensors live from their producer's segment to their last consumer's.

    Operators in one segment run concurrently, so lifetimes are measured in
    segments. An Accum result persists across iterations and starts at 0.
    """
    pos = sched.segment_of()
    ops = {op.id: op for op in g.ops}
    out = []
    cons = g.consumers()
    for op_id in sched.order:
        op = ops[op_id]
        for t in op.outputs:
            tensor = g.tensors[t]
            if tensor.scope is not Scope.SHARED:
                continue
            start = 0 if op.type is OpType.ACCUM else pos[op_id]
            end = max((pos[c.id] for c in cons.get(t, [])), default=pos[op_id])
            out.append(Interval(t, math.prod(tensor.shape) * elem_bytes, start, end))
    return out


def _first_fit(order: Sequence[Interval]) -> tuple[dict[int, int], int]:
    placed: list[tuple[Interval, int]] = []
    offsets = {}
    for iv in order:
        busy = sorted((off, off + other.size) for other, off in placed if other.overlaps(iv))
        off = 0
        for lo, hi in busy:
            if off + iv.size <= lo:
                break
            off = max(off, hi)
        placed.append((iv, off))
        offsets[iv.tensor] = off
    peak = max((off + iv.size for iv, off in placed), default=0)
    return offsets, peak


def live_bound(ivs: Sequence[Interval]) -> int:
    """Largest total size live at one position; no plan can be smaller."""
    points = {iv.start for iv in ivs}
    return max((sum(iv.size for iv in ivs if iv.start <= p <= iv.end) for p in points), default=0)


def _best_first_fit(ivs: list[Interval]) -> tuple[dict[int, int], int]:
    """Every first-fit order, skipping prefixes already as tall as the best plan."""
    best: list = [None, math.inf]
    placed: list[tuple[Interval, int]] = []
    used = [False] * len(ivs)
    floor = live_bound(ivs)

    def dfs(peak: int) -> None:
        if peak >= best[1] or best[1] <= floor:
            return
        if len(placed) == len(ivs):
            best[0], best[1] = {iv.tensor: off for iv, off in placed}, peak
            return
        for k, iv in enumerate(ivs):
            if used[k]:
                continue
            busy = sorted((off, off + other.size) for other, off in placed if other.overlaps(iv))
            off = 0
            for lo, hi in busy:
                if off + iv.size <= lo:
                    break
                off = max(off, hi)
            used[k] = True
            placed.append((iv, off))
            dfs(max(peak, off + iv.size))
            placed.pop()
            used[k] = False

    dfs(0) if ivs else None
    return (best[0], int(best[1])) if ivs else ({}, 0)


def plan_intervals(intervals: Sequence[Interval], exhaustive_limit: int = 8) -> MemoryPlan:
    """Offsets for tensors with lifetimes; optimal when there are few tensors.

    Placing tensors by increasing offset of an optimal plan with first fit
    never raises any offset, so the best first-fit order is optimal.
    """
    if len(intervals) <= exhaustive_limit:
        offsets, peak = _best_first_fit(list(intervals))
        return MemoryPlan(offsets, peak, "exhaustive")
    order = sorted(intervals, key=lambda iv: (-iv.size, iv.start, iv.tensor))
    offsets, peak = _first_fit(order)
    return MemoryPlan(offsets, peak, "first-fit-decreasing")


def plan_memory(g: Graph, sched: Schedule, smem_limit: int = DEFAULT_SMEM_LIMIT,
                elem_bytes: int = DEFAULT_ELEM_BYTES) -> MemoryPlan:
    plan = plan_intervals(lifetimes(g, sched, elem_bytes))
    if plan.peak > smem_limit:
        raise DoesNotFit(plan.peak, smem_limit)
    return plan


def check_plan(intervals: Iterable[Interval], plan: MemoryPlan) -> bool:
    ivs = list(intervals)
    for a, b in itertools.combinations(ivs, 2):
        if a.overlaps(b):
            oa, ob = plan.offsets[a.tensor], plan.offsets[b.tensor]
            if oa < ob + b.size and ob < oa + a.size:
                return False
    return all(plan.offsets[iv.tensor] + iv.size <= plan.peak for iv in ivs)


# ---------------------------------------------------------------------------
# cost


@dataclass
class CostReport:
    total: float = 0.0
    launches: int = 0
    device_bytes: float = 0.0
    shared_bytes: float = 0.0
    macs: int = 0
    kernels: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"total": self.total, "launches": self.launches, "deviceBytes": self.device_bytes,
                "sharedBytes": self.shared_bytes, "macs": self.macs, "kernels": self.kernels}


def op_macs(op: Op, g: Graph) -> int:
    """Scalar multiply-adds (or elementwise evaluations) of one operator."""
    shapes = [g.shape(t) for t in op.inputs]
    out = g.shape(op.outputs[0]) if op.outputs else ()
    if op.type is OpType.MATMUL:
        return math.prod(out) * shapes[0][-1]
    if op.type is OpType.CONCAT_MATMUL:
        return math.prod(out) * (shapes[0][-1] + shapes[1][-1])
    if op.type in (OpType.SUM, OpType.ACCUM):
        return math.prod(shapes[0])
    if op.type is OpType.THREAD_GRAPH and op.graph is not None:
        return sum(op_macs(o, op.graph) for o in op.graph.ops)
    if op.type in ELEMENTWISE:
        return math.prod(out)
    return 0


def _traffic(op: Op, g: Graph, layouts: LayoutAssignment, key: Callable[[int], tuple]) -> float:
    """Bytes an operator reads and writes, with layout penalties applied."""
    eb = DEFAULT_ELEM_BYTES
    total = 0.0
    out_shape = g.shape(op.outputs[0])
    out_lay = layouts.get(key(op.outputs[0]), out_shape)
    for t in op.inputs:
        s = g.shape(t)
        nb = math.prod(s) * eb
        lay = layouts.get(key(t), s)
        if op.type in (OpType.MATMUL, OpType.CONCAT_MATMUL):
            nb *= 1 if innermost(lay, s) in (None, len(s) - 1) else 2
        elif len(s) == len(out_shape) and not same_order(lay, out_lay, s):
            nb *= 2
        total += nb
    total += sum(math.prod(g.shape(t)) * eb for t in op.outputs)
    return total


def block_kernel_cost(bg: BlockGraph, kop: Op, layouts: LayoutAssignment, j: int,
                      w: CostWeights) -> dict:
    """Per-block time of a graph-defined kernel and its raw counts.

    Loop iterations overlap the next tile's loads with the current
    iteration's work, so the loop costs ``L * max(load, work) + min(load, work)``
    (per-iteration quantities). Blocks run in waves of ``sm_count``.
    """
    eb = DEFAULT_ELEM_BYTES
    dev = dict(zip(bg.inputs, kop.inputs)) | dict(zip(bg.outputs, kop.outputs))

    def key(t):
        return ("K", dev[t]) if t in dev else ("B", j, t)

    loop_ops = bg.loop_phase()
    L = bg.forloop
    load = work = post = 0.0
    dev_bytes = sh_bytes = 0.0
    macs = 0
    for op in bg.ops:
        if op.type is OpType.IN_ITER:
            full = bg.shape(op.inputs[0])
            tile = bg.shape(op.outputs[0])
            lay = layouts.get(key(op.inputs[0]), full)
            nb = math.prod(tile) * eb
            moved = nb * coalescing_factor(lay, tile, full, eb, w.sector_bytes)
            load += moved * w.w_device
            dev_bytes += moved * L
            work += nb * w.w_shared
            sh_bytes += nb * L
        elif op.type is OpType.OUT_SAVER:
            full = bg.shape(op.outputs[0])
            tile = bg.shape(op.inputs[0])
            lay = layouts.get(key(op.outputs[0]), full)
            nb = math.prod(tile) * eb
            moved = nb * coalescing_factor(lay, tile, full, eb, w.sector_bytes)
            post += moved * w.w_device + nb * w.w_shared
            dev_bytes += moved
            sh_bytes += nb
        else:
            traffic = _traffic(op, bg, layouts, key)
            m = op_macs(op, bg)
            t = traffic * w.w_shared + m * w.w_compute
            in_loop = op.id in loop_ops
            reps = L if in_loop else 1
            if in_loop:
                work += t
            else:
                post += t
            sh_bytes += traffic * reps
            macs += m * reps
    blocks = math.prod(bg.grid)
    waves = math.ceil(blocks / w.sm_count)
    per_block = L * max(load, work) + min(load, work) + post
    return {"kind": "graph-def", "time": waves * per_block, "blocks": blocks, "waves": waves,
            "deviceBytes": dev_bytes * blocks, "sharedBytes": sh_bytes * blocks, "macs": macs * blocks,
            "loadPerIteration": load, "workPerIteration": work, "postLoop": post}


def cost(g: KernelGraph, layouts: LayoutAssignment | None = None, w: CostWeights = CostWeights()) -> CostReport:
    """Launch overhead plus modeled time of every kernel."""
    layouts = layouts or LayoutAssignment({}, 0.0, "default", 0)
    rep = CostReport()
    for j, op in enumerate(g.ops):
        if op.type is OpType.GRAPH_DEF and isinstance(op.graph, BlockGraph):
            k = block_kernel_cost(op.graph, op, layouts, j, w)
        else:
            traffic = _traffic(op, g, layouts, lambda t: ("K", t))
            m = op_macs(op, g)
            # vendor kernels spread their work over the whole device
            k = {"kind": op.type.value, "time": (traffic * w.w_device + m * w.w_compute) / w.sm_count,
                 "deviceBytes": traffic, "sharedBytes": 0.0, "macs": m}
        k["op"] = j
        rep.kernels.append(k)
        rep.launches += 1
        rep.device_bytes += k["deviceBytes"]
        rep.shared_bytes += k["sharedBytes"]
        rep.macs += k["macs"]
        rep.total += w.w_kernel_launch + k["time"]
    return rep


# ---------------------------------------------------------------------------
# selection


@dataclass
class Plan:
    graph: KernelGraph
    layouts: LayoutAssignment
    schedules: dict[int, Schedule]
    memory: dict[int, MemoryPlan]
    cost: CostReport

    def to_json(self) -> dict:
        return {"cost": self.cost.to_json(), "layouts": self.layouts.to_json(),
                "schedules": {str(k): v.to_json() for k, v in self.schedules.items()},
                "memory": {str(k): v.to_json() for k, v in self.memory.items()}}


def optimize_candidate(g: KernelGraph, w: CostWeights = CostWeights(), smem_limit: int = DEFAULT_SMEM_LIMIT,
                       fuse: bool = True) -> Plan:
    if fuse:
        g = construct_thread_graphs(g)
    layouts = choose_layouts(g, w)
    schedules, memory = {}, {}
    for j, op in enumerate(g.ops):
        if op.type is OpType.GRAPH_DEF and isinstance(op.graph, BlockGraph):
            schedules[j] = schedule_ops(op.graph)
            memory[j] = plan_memory(op.graph, schedules[j], smem_limit)
    return Plan(g, layouts, schedules, memory, cost(g, layouts, w))


def select_best(candidates: Sequence[Candidate], w: CostWeights = CostWeights(),
                smem_limit: int = DEFAULT_SMEM_LIMIT) -> tuple[Candidate, Plan, list[tuple[Candidate, Plan]]]:
    """Cheapest candidate; ties go to fewer kernel operators, then the canonical key."""
    if not candidates:
        raise ValueError("no candidates to select from")
    scored = []
    for c in candidates:
        try:
            plan = optimize_candidate(c.graph, w, smem_limit)
        except (DoesNotFit, Infeasible):
            continue
        scored.append((c, plan))
    if not scored:
        raise Infeasible("no candidate admits a layout and memory plan")
    scored.sort(key=lambda cp: (round(cp[1].cost.total, 9), len(cp[0].graph.ops), cp[0].key))
    best, plan = scored[0]
    return best, plan, scored


def thread_graphs(g: KernelGraph) -> list[ThreadGraph]:
    return [bop.graph for op in g.ops if isinstance(op.graph, BlockGraph)
            for bop in op.graph.ops if isinstance(bop.graph, ThreadGraph)]


__all__ = ["CostWeights", "CostReport", "DoesNotFit", "Infeasible", "Interval", "LayoutAssignment",
           "LayoutProblem", "MemoryPlan", "Plan", "Schedule", "build_layout_problem", "canonical_key",
           "check_plan", "choose_layouts", "coalescing_factor", "cost", "layouts_for", "lifetimes",
           "live_bound", "min_syncs_bruteforce", "op_depths", "op_macs", "optimize_candidate", "plan_intervals",
           "plan_memory", "run_length", "schedule_ops", "select_best", "thread_graphs"]
