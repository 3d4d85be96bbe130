"""Exhaustive generation of kernel and block graphs in canonical form.

Operators are appended in strictly increasing rank, where the rank of an
operator is ``(largest input index, input indices, type id, attribute key)``.
Inputs of an operator always have smaller indices than its outputs, so a
consumer always outranks its producers; greedily placing the smallest ready
operator therefore yields the unique canonical order of any graph.

Each new operator must pass three checks: its abstract expression is a
subexpression of the program's (decided through the saturated e-graph), its
output shape is well defined, and shared memory stays within the limit.

A block graph is generated as a template over per-iteration tile shapes: the
InIter outputs come first (one per input), every later operator lives either
in the loop body or after the loop, and an Accum moves a loop value past the
loop. A template is complete when no loop value is left unconsumed; the
unconsumed post-loop values become the outputs. Templates depend only on the
loop count, the tile shapes and the input expressions, so they are memoized
and combined with every imap/fmap choice that produces those tiles.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .dims import DimInfo, LabelConflict, analyze, propagate
from .egraph import Entailment
from .expr import Expr, graph_expr
from .ir import (DEFAULT_ELEM_BYTES, DEFAULT_SMEM_LIMIT, ELEMENTWISE, GRID_AXES, LOOP_AXIS,
                 BlockGraph, DimMap, Graph, KernelGraph, MuGraphError, Op, OpType, Scope, Shape,
                 Tensor, ThreadGraph, assemble_output_shape, canonical_key, infer_output_shape,
                 partition_shape)


class ConfigError(MuGraphError):
    pass


def _pow2(limit: int) -> tuple[int, ...]:
    out, v = [], 1
    while v <= limit:
        out.append(v)
        v *= 2
    return tuple(out)


@dataclass(frozen=True)
class SearchConfig:
    max_kernel_ops: int = 5
    max_block_ops: int = 11  # InIter ops count; OutSaver ops are implicit
    grid_candidates: tuple[tuple[int, ...], ...] = tuple((g,) for g in _pow2(128))
    loop_candidates: tuple[int, ...] = _pow2(64)
    smem_limit: int = DEFAULT_SMEM_LIMIT
    elem_bytes: int = DEFAULT_ELEM_BYTES
    kernel_pool: tuple[OpType, ...] | None = None
    block_pool: tuple[OpType, ...] | None = None
    node_limit: int = 10_000
    iter_limit: int = 8
    workers: int = 1
    prune: bool = True
    max_prefixes: int | None = None
    max_graphdef_inputs: int = 4
    max_block_outputs: int | None = None  # default: number of program outputs
    sum_dims: tuple[int, ...] | None = None  # default: dimensions the program reduces
    max_graphdefs: int = 1
    graphdef_inputs: str = "program"  # or "any": also intermediate kernel tensors
    consistent_dims: bool = True
    concat_accum: bool = False
    reshape_targets: tuple[Shape, ...] = ()

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.max_kernel_ops < 1 or self.max_block_ops < 1:
            raise ConfigError("operator limits must be at least 1")
        if not self.grid_candidates or not self.loop_candidates:
            raise ConfigError("grid and loop candidate lists must be non-empty")
        if any(e < 1 for g in self.grid_candidates for e in g) or any(v < 1 for v in self.loop_candidates):
            raise ConfigError("candidate extents must be positive")
        if self.graphdef_inputs not in ("program", "any"):
            raise ConfigError("graphdef_inputs must be 'program' or 'any'")
        if self.max_graphdefs < 0:
            raise ConfigError("max_graphdefs must be non-negative")
        if any(not 1 <= len(g) <= 3 for g in self.grid_candidates):
            raise ConfigError("grids have one to three dimensions")


@dataclass
class SearchStats:
    kernel_prefixes: int = 0
    block_prefixes: int = 0
    pruned_expr: int = 0
    pruned_budget: int = 0
    pruned_shape: int = 0
    pruned_memory: int = 0
    pruned_redundant: int = 0
    pruned_bound: int = 0
    pruned_label: int = 0
    expr_queries: int = 0
    expr_cache_hits: int = 0
    templates_searched: int = 0
    template_cache_hits: int = 0
    graphdefs: int = 0
    candidates: int = 0
    truncated: bool = False

    @property
    def prefixes(self) -> int:
        return self.kernel_prefixes + self.block_prefixes

    def to_json(self) -> dict:
        return {"prefixesExpanded": self.prefixes, "kernelPrefixes": self.kernel_prefixes,
                "blockPrefixes": self.block_prefixes, "prunedExpr": self.pruned_expr,
                "prunedBudget": self.pruned_budget, "prunedShape": self.pruned_shape,
                "prunedMemory": self.pruned_memory,
                "prunedRedundant": self.pruned_redundant,
                "prunedBound": self.pruned_bound,
                "prunedLabel": self.pruned_label, "exprQueries": self.expr_queries,
                "cacheHits": self.expr_cache_hits, "templatesSearched": self.templates_searched,
                "templateCacheHits": self.template_cache_hits, "graphDefs": self.graphdefs,
                "candidates": self.candidates, "truncated": self.truncated}


@dataclass
class Candidate:
    graph: KernelGraph
    exprs: list[Expr]
    key: str
    trivial: bool = False


@dataclass
class GenerationResult:
    candidates: list[Candidate]
    stats: SearchStats
    prefixes: list[KernelGraph] = field(default_factory=list)


class Invalid:
    """Reason a construct_op attempt was rejected."""

    EXPR = "expr"
    SHAPE = "shape"
    MEMORY = "memory"


class _Stop(Exception):
    pass


# ---------------------------------------------------------------------------
# expression classes


class ExprOracle:
    """Maps operator applications to e-classes of the saturated program e-graph."""

    def __init__(self, program_exprs: Sequence[Expr], node_limit: int, iter_limit: int):
        self.ent = Entailment(list(program_exprs), node_limit, iter_limit)
        self.eg = self.ent.egraph
        self.output_classes = [self.ent.class_of(e) for e in program_exprs]
        self._cache: dict[tuple, int | None] = {}
        self.hits = 0

    def var(self, name: str) -> int | None:
        return self.eg.lookup_node(("var", name))

    def node(self, op: str, k: int, *kids: int | None) -> int | None:
        if any(c is None for c in kids):
            return None
        key = (op, k) + kids
        if key in self._cache:
            self.hits += 1
            return self._cache[key]
        c = self.eg.lookup_node(key)
        self._cache[key] = c
        return c

    def _sum(self, k: int, c: int | None) -> int | None:
        return c if k == 1 else self.node("sum", k, c)

    def op_class(self, t: OpType, attrs, ins: Sequence[int | None], shapes: Sequence[Shape],
                 loop: int = 1) -> int | None:
        if t in (OpType.IN_ITER, OpType.OUT_SAVER, OpType.REPEAT, OpType.RESHAPE):
            return ins[0]
        if t is OpType.MATMUL:
            return self._sum(shapes[0][-1], self.node("mul", 0, ins[0], ins[1]))
        if t is OpType.CONCAT_MATMUL:
            a = self._sum(shapes[0][-1], self.node("mul", 0, ins[0], ins[2]))
            b = self._sum(shapes[1][-1], self.node("mul", 0, ins[1], ins[3]))
            return self.node("add", 0, a, b)
        if t is OpType.SUM:
            return self._sum(attrs["k"], ins[0])
        if t is OpType.EW_ADD:
            return self.node("add", 0, ins[0], ins[1])
        if t is OpType.EW_MUL:
            return self.node("mul", 0, ins[0], ins[1])
        if t is OpType.EW_DIV:
            return self.node("div", 0, ins[0], ins[1])
        if t is OpType.SQR:
            return self.node("mul", 0, ins[0], ins[0])
        if t is OpType.EW_EXP:
            return self.node("exp", 0, ins[0])
        if t is OpType.SQRT:
            return self.node("sqrt", 0, ins[0])
        if t is OpType.SILU:
            return self.node("silu", 0, ins[0])
        if t is OpType.ACCUM:
            return self._sum(loop, ins[0]) if attrs.get("fmap") is None else ins[0]
        raise MuGraphError(f"no class rule for {t.value}")

    def in_target(self, c: int | None) -> bool:
        return self.ent.class_in_target(c)

    def same(self, a: int | None, b: int | None) -> bool:
        return a is not None and b is not None and self.eg.find(a) == self.eg.find(b)


# ---------------------------------------------------------------------------
# operator enumeration


def _attrs_key(t: OpType, attrs) -> tuple:
    if t is OpType.SUM:
        return (attrs["dim"], attrs["k"])
    if t is OpType.ACCUM:
        return (-1 if attrs.get("fmap") is None else attrs["fmap"],)
    if t in (OpType.REPEAT, OpType.RESHAPE):
        return tuple(attrs["shape"])
    return ()


def _rank(t: OpType, ins: tuple[int, ...], attrs) -> tuple:
    return (max(ins), ins, t.type_id, _attrs_key(t, attrs))


def _broadcastable(a: Shape, b: Shape) -> bool:
    return len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _matmulable(a: Shape, b: Shape) -> bool:
    return len(a) >= 2 and len(a) == len(b) and a[:-2] == b[:-2] and a[-1] == b[-2]


def ops_with_max(pool: Sequence[OpType], shapes: Sequence[Shape], m: int, loop: int = 1,
                 concat_accum: bool = True, reshape_targets: Sequence[Shape] = (),
                 sum_dims: Sequence[int] | None = None) -> Iterator[tuple[OpType, tuple, dict]]:
    """(type, inputs, attrs) triples whose largest input index is ``m``.

    ``sum_dims`` restricts which dimensions Sum may reduce. Only cheap
    shape compatibility is checked here.
    """
    sqr_available = OpType.SQR in pool
    sm = shapes[m]
    for t in pool:
        if t in (OpType.GRAPH_DEF, OpType.IN_ITER, OpType.OUT_SAVER, OpType.THREAD_GRAPH):
            continue
        if t in (OpType.EW_EXP, OpType.SQR, OpType.SQRT, OpType.SILU):
            yield t, (m,), {}
        elif t is OpType.SUM:
            for d, n in enumerate(sm):
                if n > 1 and (sum_dims is None or d in sum_dims):
                    yield t, (m,), {"dim": d, "k": n}
        elif t is OpType.ACCUM:
            yield t, (m,), {"fmap": None}
            if concat_accum and loop > 1:
                for d in range(len(sm)):
                    yield t, (m,), {"fmap": d}
        elif t in (OpType.REPEAT, OpType.RESHAPE):
            for target in reshape_targets:
                if tuple(target) != sm:
                    yield t, (m,), {"shape": tuple(target)}
        elif t in (OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV, OpType.MATMUL):
            comm = t in (OpType.EW_ADD, OpType.EW_MUL)
            pairs = [(i, m) for i in range(m + 1)]
            if not comm:
                pairs += [(m, i) for i in range(m)]
            for i, j in pairs:
                if t is OpType.EW_MUL and i == j and sqr_available:
                    continue
                if t is OpType.MATMUL:
                    if not _matmulable(shapes[i], shapes[j]):
                        continue
                elif not _broadcastable(shapes[i], shapes[j]):
                    continue
                yield t, (i, j), {}
        elif t is OpType.CONCAT_MATMUL:
            for ins in itertools.product(range(m + 1), repeat=4):
                if max(ins) != m:
                    continue
                w, x, y, z = ins
                # the two halves commute; keep the ordered one
                if (w, y) == (x, z) or (x, z) < (w, y):
                    continue
                if not (_matmulable(shapes[w], shapes[y]) and _matmulable(shapes[x], shapes[z])):
                    continue
                if shapes[x][:-1] + (shapes[z][-1],) != shapes[w][:-1] + (shapes[y][-1],):
                    continue
                yield t, ins, {}


def enumerate_ops(pool: Sequence[OpType], shapes: Sequence[Shape], last_rank: tuple | None,
                  loop: int = 1, concat_accum: bool = True, reshape_targets: Sequence[Shape] = (),
                  sum_dims: Sequence[int] | None = None) -> Iterator[tuple[OpType, tuple, dict]]:
    """(type, inputs, attrs) triples whose rank exceeds ``last_rank``."""
    lo = 0 if last_rank is None else max(last_rank[0], 0)
    for m in range(lo, len(shapes)):
        for t, ins, attrs in ops_with_max(pool, shapes, m, loop, concat_accum, reshape_targets, sum_dims):
            if m > lo or last_rank is None or _rank(t, ins, attrs) > last_rank:
                yield t, ins, attrs


# ---------------------------------------------------------------------------
# block templates


@dataclass(frozen=True)
class Template:
    ops: tuple[tuple[OpType, tuple[int, ...], tuple], ...]  # indices local: 0..n-1 are InIter outputs
    outputs: tuple[int, ...]
    shapes: tuple[Shape, ...]
    classes: tuple[int | None, ...]
    labels: tuple[tuple | None, ...]


def _ops_to_close(dl: int, dp: int, max_out: int, arity: int) -> int | float:
    """Fewest operators that leave no loop value unconsumed and at most
    ``max_out`` post-loop values, from ``dl`` loop and ``dp`` post-loop
    dangling values. Each operator removes at most ``arity - 1`` dangling
    values; an Accum turns one loop value into a post-loop value."""
    if arity <= 1:
        return dl if dp + dl <= max_out else math.inf
    a = arity - 1
    if dl == 0:
        return -(-max(0, dp - max_out) // a)
    return -(-(dl - 1) // a) + 1 + -(-max(0, dp + 1 - max_out) // a)


class _BlockSearch:
    """Canonical DFS over block graphs for fixed input tiles.

    When a tensor is created, every operator whose largest input is that
    tensor is resolved once (shape, class, labels, phase); the DFS then only
    walks operators that survived. Resolutions are cached on the inputs'
    (class, shape, labels, phase) signatures.
    """

    def __init__(self, gen: "Generator", loop: int, tiles: Sequence[Shape],
                 classes: Sequence[int | None], labels: Sequence[tuple | None]):
        self.gen = gen
        self.cfg = gen.cfg
        self.loop = loop
        self.n_in = len(tiles)
        self.shapes: list[Shape] = []
        self.classes: list[int | None] = []
        self.labels: list[tuple | None] = []
        self.loop_phase: list[bool] = []
        self.sigs: list[tuple] = []
        self.exts: list[list[tuple]] = []
        self.consumers: list[int] = [0] * len(tiles)
        self.ops: list[tuple[OpType, tuple, dict]] = []
        self.ranks: list[tuple] = []
        self.smem = sum(math.prod(s) for s in tiles) * self.cfg.elem_bytes
        self.templates: list[Template] = []
        self.max_out = gen.max_block_outputs
        self.seen: dict[tuple, int] = {}
        for s, c, lab in zip(tiles, classes, labels):
            self._see((c, s, True), 1)
            self._add(s, c, lab, True)
        pool = gen.block_pool
        self.max_arity = max([2 if t.arity == 2 else 4 if t is OpType.CONCAT_MATMUL else 1
                              for t in pool] + [1])

    def run(self) -> list[Template]:
        if self.smem <= self.cfg.smem_limit:
            self._dfs()
        return self.templates

    def _see(self, key: tuple, delta: int) -> None:
        if key[0] is not None:
            self.seen[key] = self.seen.get(key, 0) + delta

    def _add(self, shape: Shape, cls, lab, in_loop: bool) -> None:
        self.shapes.append(shape)
        self.classes.append(cls)
        self.labels.append(lab)
        self.loop_phase.append(in_loop)
        self.sigs.append((cls, shape, lab, in_loop))
        self.exts.append(self._extensions(len(self.shapes) - 1))

    def _pop(self) -> None:
        for lst in (self.shapes, self.classes, self.labels, self.loop_phase, self.sigs, self.exts):
            lst.pop()

    def _extensions(self, m: int) -> list[tuple]:
        gen = self.gen
        cache = gen._block_ops_cache
        sm = self.sigs[m]
        out = []
        for i in range(m + 1):
            ck = (self.loop, self.sigs[i], sm, i == m)
            entries = cache.get(ck)
            if entries is None:
                entries = cache[ck] = self._pair_ops([sm] if i == m else [self.sigs[i], sm])
            idx = (m,) if i == m else (i, m)
            for t, pos, attrs, res in entries:
                ins = tuple(idx[k] for k in pos)
                out.append((_rank(t, ins, attrs), t, ins, attrs) + res)
        if OpType.CONCAT_MATMUL in gen.block_pool:
            for t, ins, attrs in ops_with_max((OpType.CONCAT_MATMUL,), self.shapes, m):
                res = self._resolve(t, attrs, [self.sigs[i] for i in ins])
                if res is not None:
                    out.append((_rank(t, ins, attrs), t, ins, attrs) + res)
        out.sort(key=lambda e: e[0])
        return out

    def _pair_ops(self, sigs: list[tuple]) -> list[tuple]:
        """Operators over one or two tensors that use all of them, with their results."""
        gen, cfg = self.gen, self.cfg
        pool = tuple(t for t in gen.block_pool if t is not OpType.CONCAT_MATMUL)
        last = len(sigs) - 1
        out = []
        for t, pos, attrs in ops_with_max(pool, [sg[1] for sg in sigs], last, self.loop, cfg.concat_accum,
                                          cfg.reshape_targets, gen.sum_dims):
            if len(set(pos)) != len(sigs) and last > 0:
                continue
            res = self._resolve(t, attrs, [sigs[k] for k in pos])
            if res is not None:
                out.append((t, pos, attrs, res))
        return out

    def _resolve(self, t: OpType, attrs: dict, sigs: list[tuple]) -> tuple | None:
        gen = self.gen
        phases = {sg[3] for sg in sigs}
        if len(phases) != 1:
            return None
        in_loop = phases.pop()
        if t is OpType.ACCUM and not in_loop:
            return None
        local = tuple(range(len(sigs)))
        shapes = [sg[1] for sg in sigs]
        res = gen.construct_op(t, local, attrs, shapes, [sg[0] for sg in sigs], self.loop)
        if isinstance(res, str):
            return None
        shape, cls, nbytes = res
        try:
            lab = gen.label_of(t, local, attrs, shapes, [sg[2] for sg in sigs], shape)
        except LabelConflict:
            return None
        out_loop = in_loop and t is not OpType.ACCUM
        return shape, cls, lab, out_loop, nbytes

    def _dangling(self) -> tuple[int, int]:
        dl = dp = 0
        for i, c in enumerate(self.consumers):
            if c == 0:
                if self.loop_phase[i]:
                    dl += 1
                else:
                    dp += 1
        return dl, dp

    def _computes(self) -> bool:
        # a kernel that only copies its inputs never pays for itself
        return any(t is not OpType.ACCUM for t, _, _ in self.ops)

    def _dfs(self) -> None:
        gen = self.gen
        gen._count_block()
        dl, dp = self._dangling()
        if dl == 0 and 1 <= dp <= self.max_out and self._computes():
            outs = tuple(i for i, c in enumerate(self.consumers) if c == 0)
            self.templates.append(Template(
                tuple((t, ins, tuple(sorted(a.items()))) for t, ins, a in self.ops), outs,
                tuple(self.shapes[i] for i in outs), tuple(self.classes[i] for i in outs),
                tuple(self.labels[i] for i in outs)))
        remaining = self.cfg.max_block_ops - self.n_in - len(self.ops)
        if remaining <= 0:
            return
        if _ops_to_close(dl, dp, self.max_out, self.max_arity) > remaining:
            return
        last = self.ranks[-1] if self.ranks else None
        lo = 0 if last is None else last[0]
        prune = self.cfg.prune
        for m in range(lo, len(self.shapes)):
            for rank, t, ins, attrs, shape, cls, lab, out_loop, nbytes in self.exts[m]:
                if last is not None and m == lo and rank <= last:
                    continue
                if self.smem + nbytes > self.cfg.smem_limit:
                    gen.stats.pruned_memory += 1
                    continue
                key = (cls, shape, out_loop)
                if prune and self.seen.get(key):
                    gen.stats.pruned_redundant += 1
                    continue
                self._see(key, 1)
                for i in ins:
                    self.consumers[i] += 1
                self.consumers.append(0)
                self.ops.append((t, ins, attrs))
                self.ranks.append(rank)
                self.smem += nbytes
                self._add(shape, cls, lab, out_loop)
                try:
                    self._dfs()
                finally:
                    self._pop()
                    self._see(key, -1)
                    self.smem -= nbytes
                    self.ranks.pop()
                    self.ops.pop()
                    self.consumers.pop()
                    for i in ins:
                        self.consumers[i] -= 1


def _map_options(shape: Shape, grid: tuple[int, ...], loop: int) -> list[tuple[DimMap, DimMap, Shape]]:
    """Every (imap, fmap, tile) for one block input.

    Axes of extent 1 are left out of the maps: partitioning by one is the
    identity, so including them would only duplicate graphs.
    """
    axes = [(a, e) for a, e in zip(GRID_AXES, grid) if e > 1]
    rank = len(shape)
    imaps = []
    for choice in itertools.product([None] + list(range(rank)), repeat=len(axes)):
        dims = [d for d in choice if d is not None]
        if len(dims) != len(set(dims)):
            continue
        imaps.append(DimMap({a: d for (a, _), d in zip(axes, choice)}))
    out = []
    extents = dict(zip(GRID_AXES, grid))
    for im in imaps:
        try:
            block = partition_shape(shape, im, extents)
        except MuGraphError:
            continue
        fopts = [DimMap()] if loop == 1 else [DimMap({LOOP_AXIS: None})] + [
            DimMap({LOOP_AXIS: d}) for d in range(rank)]
        for fm in fopts:
            try:
                tile = partition_shape(block, fm, {LOOP_AXIS: loop})
            except MuGraphError:
                continue
            out.append((im, fm, tile))
    return out


def _omap_options(tile: Shape, grid: tuple[int, ...], labels: tuple | None = None,
                  axis_labels: dict | None = None) -> list[DimMap]:
    """Output maps; with labels, each axis goes to the dimension carrying its index."""
    axes = [a for a, e in zip(GRID_AXES, grid) if e > 1]
    if labels is not None and axis_labels is not None:
        m = {}
        for a in axes:
            dims = [d for d, lab in enumerate(labels) if lab == axis_labels[a]]
            if len(dims) != 1:
                return []
            m[a] = dims[0]
        return [DimMap(m)]
    out = []
    for dims in itertools.permutations(range(len(tile)), len(axes)):
        out.append(DimMap(dict(zip(axes, dims))))
    return out


def _partitions_something(combo, grid: tuple[int, ...], loop: int) -> bool:
    axes = [a for a, e in zip(GRID_AXES, grid) if e > 1]
    if any(all(m[0].get(a) is None for m in combo) for a in axes):
        return False
    return loop == 1 or any(m[1].get(LOOP_AXIS) is not None for m in combo)


def partition_options(shapes: Sequence[Shape], labels: Sequence[tuple | None], grid: tuple[int, ...],
                      loop: int, dims: DimInfo | None, concat_accum: bool = False) -> list[tuple[tuple, dict | None]]:
    """(per-input (imap, fmap, tile) combo, axis -> label) choices for a block.

    Every grid axis and the loop (when longer than one) must partition at
    least one input; otherwise all blocks or iterations do identical work.
    With ``dims``, partitioning additionally follows dimension labels.
    """
    extents = dict(zip(GRID_AXES, grid))
    axes = [a for a, e in zip(GRID_AXES, grid) if e > 1]
    if dims is None or any(lab is None for lab in labels):
        per_input = [_map_options(s, grid, loop) for s in shapes]
        return [(c, None) for c in itertools.product(*per_input) if _partitions_something(c, grid, loop)]
    present = sorted({x for lab in labels for x in lab if x is not None})
    if any(len([x for x in lab if x is not None]) != len({x for x in lab if x is not None})
           for lab in labels):
        return []
    grid_labels = [x for x in present if x in dims.parallel]
    loop_labels = [x for x in present if x in dims.reduced or (concat_accum and x in dims.parallel)]
    out = []
    for gl in itertools.permutations(grid_labels, len(axes)):
        for ll in ([None] if loop == 1 else loop_labels):
            combo = []
            try:
                for s, lab in zip(shapes, labels):
                    im = DimMap({a: (lab.index(x) if x in lab else None) for a, x in zip(axes, gl)})
                    fm = DimMap() if loop == 1 else DimMap({LOOP_AXIS: lab.index(ll) if ll in lab else None})
                    tile = partition_shape(partition_shape(s, im, extents), fm, {LOOP_AXIS: loop})
                    combo.append((im, fm, tile))
            except MuGraphError:
                continue
            out.append((tuple(combo), dict(zip(axes, gl))))
    return out


def build_block_graph(tmpl: Template, kernel_shapes: Sequence[Shape], grid: tuple[int, ...], loop: int,
                      maps: Sequence[tuple[DimMap, DimMap, Shape]], omaps: Sequence[DimMap]) -> BlockGraph:
    n = len(kernel_shapes)
    tensors: dict[int, Tensor] = {}
    ops: list[Op] = []
    for i, s in enumerate(kernel_shapes):
        tensors[i] = Tensor(i, tuple(s), Scope.DEVICE)
    for i, (_, _, tile) in enumerate(maps):
        tensors[n + i] = Tensor(n + i, tile, Scope.SHARED)
        ops.append(Op(len(ops), OpType.IN_ITER, (i,), (n + i,), {}))
    shapes = [m[2] for m in maps]
    for t, ins, attrs in tmpl.ops:
        a = dict(attrs)
        if t is OpType.ACCUM:
            shape = infer_output_shape(t, {**a, "loop": loop}, [shapes[i] for i in ins])
        else:
            shape = infer_output_shape(t, a, [shapes[i] for i in ins])
        shapes.append(shape)
        tid = n + len(shapes) - 1
        tensors[tid] = Tensor(tid, shape, Scope.SHARED)
        ops.append(Op(len(ops), t, tuple(n + i for i in ins), (tid,), a))
    outs = []
    next_id = n + len(shapes)
    for local, om in zip(tmpl.outputs, omaps):
        full = assemble_output_shape(shapes[local], om, grid)
        tensors[next_id] = Tensor(next_id, full, Scope.DEVICE)
        ops.append(Op(len(ops), OpType.OUT_SAVER, (n + local,), (next_id,), {}))
        outs.append(next_id)
        next_id += 1
    return BlockGraph(tensors, tuple(range(n)), tuple(ops), tuple(outs), grid=tuple(grid), forloop=loop,
                      imaps=tuple(m[0] for m in maps), fmaps=tuple(m[1] for m in maps),
                      omaps=tuple(omaps))


# ---------------------------------------------------------------------------
# kernel search


def default_pools(program: Graph) -> tuple[tuple[OpType, ...], tuple[OpType, ...]]:
    used = {op.type for op in program.ops}
    if {OpType.MATMUL, OpType.EW_ADD} <= used:
        # a sum of two matmuls can be one concatenated matmul
        used.add(OpType.CONCAT_MATMUL)
    used = sorted(used, key=lambda t: t.type_id)
    kernel = tuple(t for t in used if "K" in t.levels) + (OpType.GRAPH_DEF,)
    block = tuple(t for t in used if "B" in t.levels) + (OpType.ACCUM,)
    return kernel, tuple(sorted(set(block), key=lambda t: t.type_id))


class Generator:
    def __init__(self, program: Graph, cfg: SearchConfig = SearchConfig(),
                 collect_prefixes: bool = False, shard: tuple[int, int] = (0, 1)):
        self.program = program
        self.cfg = cfg
        self.shard = shard
        self._branch = 0
        kpool, bpool = default_pools(program)
        self.kernel_pool = tuple(cfg.kernel_pool) if cfg.kernel_pool is not None else kpool
        self.block_pool = tuple(cfg.block_pool) if cfg.block_pool is not None else bpool
        self.stats = SearchStats()
        self.program_exprs = graph_expr(program)
        self.oracle = ExprOracle(self.program_exprs, cfg.node_limit, cfg.iter_limit)
        self.collect_prefixes = collect_prefixes
        self.prefixes: list[KernelGraph] = []
        self._templates: dict[tuple, list[Template]] = {}
        self._block_ops_cache: dict[tuple, tuple | None] = {}
        self._found: dict[str, Candidate] = {}
        self.out_shapes = [program.shape(t) for t in program.outputs]
        self.max_block_outputs = (cfg.max_block_outputs if cfg.max_block_outputs is not None
                                  else len(program.outputs))
        self.dims = analyze(program) if cfg.consistent_dims else None
        self.sum_dims = (tuple(cfg.sum_dims) if cfg.sum_dims is not None else
                         tuple(sorted({op.attrs["dim"] for op in program.ops if op.type is OpType.SUM})))

    # -- checks ------------------------------------------------------------
    def label_of(self, t: OpType, ins, attrs, shapes, labels, out_shape) -> tuple | None:
        """Output dimension labels; LabelConflict if two different indices meet."""
        if self.dims is None:
            return None
        try:
            return propagate(t, attrs, [shapes[i] for i in ins], [labels[i] for i in ins], out_shape)
        except LabelConflict:
            self.stats.pruned_label += 1
            raise

    def _count_block(self) -> None:
        self.stats.block_prefixes += 1
        self._budget()

    def _budget(self) -> None:
        mp = self.cfg.max_prefixes
        if mp is not None and self.stats.prefixes > mp:
            self.stats.truncated = True
            raise _Stop()

    def construct_op(self, t: OpType, ins: tuple[int, ...], attrs: dict, shapes: Sequence[Shape],
                     classes: Sequence[int | None], loop: int = 1, smem: int | None = None):
        """Shape, class and byte size of a new operator, or an ``Invalid`` reason."""
        in_shapes = [shapes[i] for i in ins]
        cls = self.oracle.op_class(t, attrs, [classes[i] for i in ins], in_shapes, loop)
        self.stats.expr_queries += 1
        if self.cfg.prune and not self.oracle.in_target(cls):
            self.stats.pruned_expr += 1
            if cls is None and not self.oracle.ent.complete:
                self.stats.pruned_budget += 1
            return Invalid.EXPR
        try:
            a = {**attrs, "loop": loop} if t is OpType.ACCUM else attrs
            shape = infer_output_shape(t, a, in_shapes)
        except MuGraphError:
            self.stats.pruned_shape += 1
            return Invalid.SHAPE
        nbytes = math.prod(shape) * self.cfg.elem_bytes
        if smem is not None and smem + nbytes > self.cfg.smem_limit:
            self.stats.pruned_memory += 1
            return Invalid.MEMORY
        return shape, cls, nbytes

    # -- driver ------------------------------------------------------------
    def run(self) -> GenerationResult:
        p = self.program
        shapes = [p.shape(t) for t in p.inputs]
        classes = [self.oracle.var(p.input_name(i)) for i in range(len(p.inputs))]
        self._k_shapes = shapes
        self._k_classes = classes
        self._k_labels: list[tuple | None] = (list(self.dims.inputs) if self.dims is not None
                                              else [None] * len(shapes))
        self._k_consumers = [0] * len(shapes)
        self._k_ops: list[tuple] = []
        self._k_ranks: list[tuple] = []
        self._n_in = len(shapes)
        try:
            self._kernel_dfs()
        except _Stop:
            pass
        self.stats.expr_cache_hits = self.oracle.hits
        trivial = Candidate(p, list(self.program_exprs), canonical_key(p), True)
        found = dict(self._found)
        if trivial.key in found:
            found[trivial.key].trivial = True
        else:
            found[trivial.key] = trivial
        cands = sorted(found.values(), key=lambda c: c.key)
        self.stats.candidates = len(cands)
        return GenerationResult(cands, self.stats, self.prefixes)

    def _emit_kernel_graph(self, outputs: Sequence[int]) -> KernelGraph:
        tensors = {i: Tensor(i, s, Scope.DEVICE) for i, s in enumerate(self._k_shapes)}
        ops = []
        for j, (t, ins, attrs, sub, outs) in enumerate(self._k_ops):
            if isinstance(sub, tuple):
                sub = build_block_graph(*sub)
            ops.append(Op(j, t, ins, outs, dict(attrs), sub))
        return KernelGraph(tensors, tuple(range(self._n_in)), tuple(ops), tuple(outputs),
                           tuple(self.program.input_name(i) for i in range(self._n_in)))

    def _check_candidate(self) -> None:
        dangling = [i for i in range(self._n_in, len(self._k_shapes)) if self._k_consumers[i] == 0]
        n_out = len(self.out_shapes)
        if len(dangling) != n_out:
            return
        chosen = []
        for oc, os_ in zip(self.oracle.output_classes, self.out_shapes):
            match = [i for i in dangling if i not in chosen and self._k_shapes[i] == os_
                     and self.oracle.same(self._k_classes[i], oc)]
            if not match:
                return
            chosen.append(match[0])
        g = self._emit_kernel_graph(chosen)
        key = canonical_key(g)
        if key not in self._found:
            self._found[key] = Candidate(g, graph_expr(g), key)

    def _kernel_dfs(self) -> None:
        self.stats.kernel_prefixes += 1
        self._budget()
        if self.collect_prefixes:
            self.prefixes.append(self._emit_kernel_graph(
                [i for i in range(self._n_in, len(self._k_shapes)) if self._k_consumers[i] == 0]))
        self._check_candidate()
        remaining = self.cfg.max_kernel_ops - len(self._k_ops)
        if remaining <= 0:
            return
        last = self._k_ranks[-1] if self._k_ranks else None
        for t, ins, attrs in enumerate_ops(self.kernel_pool, self._k_shapes, last,
                                           reshape_targets=self.cfg.reshape_targets,
                                           sum_dims=self.sum_dims):
            if not self._mine():
                continue
            res = self.construct_op(t, ins, attrs, self._k_shapes, self._k_classes)
            if isinstance(res, str):
                continue
            shape, cls, _ = res
            if self._redundant([shape], [cls]):
                continue
            try:
                lab = self.label_of(t, ins, attrs, self._k_shapes, self._k_labels, shape)
            except LabelConflict:
                continue
            self._push(t, ins, attrs, None, [shape], [cls], [lab], _rank(t, ins, attrs))
        n_defs = sum(1 for op in self._k_ops if op[0] is OpType.GRAPH_DEF)
        if OpType.GRAPH_DEF in self.kernel_pool and n_defs < self.cfg.max_graphdefs:
            self._graphdef_extensions(last)

    def _completable(self) -> bool:
        """Lower bound on the operators still needed to reach the outputs."""
        remaining = self.cfg.max_kernel_ops - len(self._k_ops)
        dangling = [i for i in range(self._n_in, len(self._k_shapes)) if self._k_consumers[i] == 0]
        n_defs = sum(1 for op in self._k_ops if op[0] is OpType.GRAPH_DEF)
        arity = max([2 if t.arity == 2 else 4 if t is OpType.CONCAT_MATMUL else 1
                     for t in self.kernel_pool if t is not OpType.GRAPH_DEF] + [1])
        if OpType.GRAPH_DEF in self.kernel_pool and n_defs < self.cfg.max_graphdefs:
            arity = max(arity, self.cfg.max_graphdef_inputs)
        n_out = len(self.out_shapes)
        excess = len(dangling) - n_out
        need = -(-excess // (arity - 1)) if excess > 0 and arity > 1 else (remaining + 1 if excess > 0 else 0)
        if self.cfg.prune and need == 0:
            have = {(self.oracle.eg.find(self._k_classes[i]), self._k_shapes[i]) for i in dangling
                    if self._k_classes[i] is not None}
            if any((self.oracle.eg.find(c), sh) not in have
                   for c, sh in zip(self.oracle.output_classes, self.out_shapes) if c is not None):
                need = 1
        if need > remaining:
            self.stats.pruned_bound += 1
            return False
        return True

    def _redundant(self, shapes: Sequence[Shape], classes: Sequence[int | None]) -> bool:
        """True if some new tensor recomputes one the kernel graph already holds."""
        if not self.cfg.prune:
            return False
        have = {(self.oracle.eg.find(c), s) for c, s in zip(self._k_classes, self._k_shapes)
                if c is not None}
        for c, s in zip(classes, shapes):
            if c is not None and (self.oracle.eg.find(c), s) in have:
                self.stats.pruned_redundant += 1
                return True
        return False

    def _mine(self) -> bool:
        """Top-level branches are dealt round-robin to the shards."""
        if self._k_ops:
            return True
        self._branch += 1
        return (self._branch - 1) % self.shard[1] == self.shard[0]

    def _push(self, t, ins, attrs, sub, shapes, classes, labels, rank) -> None:
        start = len(self._k_shapes)
        outs = tuple(range(start, start + len(shapes)))
        self._k_shapes.extend(shapes)
        self._k_classes.extend(classes)
        self._k_labels.extend(labels)
        self._k_consumers.extend([0] * len(shapes))
        for i in ins:
            self._k_consumers[i] += 1
        self._k_ops.append((t, ins, attrs, sub, outs))
        self._k_ranks.append(rank)
        try:
            if self._completable():
                self._kernel_dfs()
        finally:
            self._k_ranks.pop()
            self._k_ops.pop()
            for i in ins:
                self._k_consumers[i] -= 1
            del self._k_shapes[start:], self._k_classes[start:], self._k_consumers[start:]
            del self._k_labels[start:]

    def _graphdef_extensions(self, last: tuple | None) -> None:
        n = self._n_in if self.cfg.graphdef_inputs == "program" else len(self._k_shapes)
        lo = -1 if last is None else last[0]
        for size in range(1, min(self.cfg.max_graphdef_inputs, n) + 1):
            for ins in itertools.combinations(range(n), size):
                if ins[-1] < lo:
                    continue
                if last is not None and (ins[-1], ins, OpType.GRAPH_DEF.type_id) < last[:3]:
                    continue
                if self.cfg.prune and not all(self.oracle.in_target(self._k_classes[i]) for i in ins):
                    continue
                for grid in self.cfg.grid_candidates:
                    for loop in self.cfg.loop_candidates:
                        if self._mine():
                            self._graphdefs_for(ins, tuple(grid), loop, last)

    def _graphdefs_for(self, ins: tuple[int, ...], grid: tuple[int, ...], loop: int,
                       last: tuple | None) -> None:
        kshapes = [self._k_shapes[i] for i in ins]
        kclasses = [self._k_classes[i] for i in ins]
        klabels = [self._k_labels[i] for i in ins]
        by_tiles: dict[tuple, list] = {}
        for combo, axis_labels in partition_options(kshapes, klabels, grid, loop, self.dims,
                                                    self.cfg.concat_accum):
            by_tiles.setdefault(tuple(m[2] for m in combo), []).append((combo, axis_labels))
        for tiles, combos in by_tiles.items():
            for tmpl in self._templates_for(loop, tiles, kclasses, klabels):
                body = tuple((t.type_id, i, a) for t, i, a in tmpl.ops)
                for combo, axis_labels in combos:
                    maps = tuple((m[0].key(), m[1].key()) for m in combo)
                    omap_opts = [_omap_options(s, grid, lab, axis_labels)
                                 for s, lab in zip(tmpl.shapes, tmpl.labels)]
                    for omaps in itertools.product(*omap_opts):
                        key = repr((grid, loop, maps, body, tmpl.outputs, tuple(o.key() for o in omaps)))
                        rank = (ins[-1], ins, OpType.GRAPH_DEF.type_id, (key,))
                        if last is not None and rank <= last:
                            continue
                        out_shapes = [assemble_output_shape(s, o, grid) for s, o in zip(tmpl.shapes, omaps)]
                        if self._redundant(out_shapes, tmpl.classes):
                            continue
                        self.stats.graphdefs += 1
                        lazy = (tmpl, tuple(kshapes), grid, loop, combo, omaps)
                        self._push(OpType.GRAPH_DEF, ins, {}, lazy, out_shapes, list(tmpl.classes),
                                   list(tmpl.labels), rank)

    def _templates_for(self, loop: int, tiles: tuple, classes: Sequence[int | None],
                       labels: Sequence[tuple | None]) -> list[Template]:
        labels = tuple(None if lab is None else tuple(x if n > 1 else None for x, n in zip(lab, tile))
                       for lab, tile in zip(labels, tiles))
        key = (loop, tiles, tuple(classes), labels)
        if key in self._templates:
            self.stats.template_cache_hits += 1
            return self._templates[key]
        self.stats.templates_searched += 1
        res = _BlockSearch(self, loop, tiles, classes, labels).run()
        self._templates[key] = res
        return res


def generate(program: Graph, cfg: SearchConfig = SearchConfig()) -> GenerationResult:
    """All canonical µGraphs reachable under ``cfg`` whose outputs match the program's."""
    for op in program.ops:
        if op.type is OpType.GRAPH_DEF:
            raise ConfigError("the input program must be a flat graph of pre-defined operators")
    if cfg.workers <= 1:
        return Generator(program, cfg).run()
    with ProcessPoolExecutor(cfg.workers) as pool:
        parts = list(pool.map(_run_shard, [(program, cfg, (k, cfg.workers)) for k in range(cfg.workers)]))
    return merge_results(parts)


def _run_shard(job: tuple) -> GenerationResult:
    program, cfg, shard = job
    return Generator(program, cfg, shard=shard).run()


def merge_results(parts: Sequence[GenerationResult]) -> GenerationResult:
    """Union of shard results; counters are summed (the root prefix once)."""
    found: dict[str, Candidate] = {}
    stats = SearchStats()
    for k, r in enumerate(parts):
        for c in r.candidates:
            if c.key not in found or c.trivial:
                found[c.key] = c
        for name in SearchStats.__dataclass_fields__:
            if name == "truncated":
                stats.truncated |= r.stats.truncated
            elif name != "candidates":
                setattr(stats, name, getattr(stats, name) + getattr(r.stats, name))
        if k:
            stats.kernel_prefixes -= 1
    cands = sorted(found.values(), key=lambda c: c.key)
    stats.candidates = len(cands)
    return GenerationResult(cands, stats)


def enumerate_prefixes(program: Graph, cfg: SearchConfig) -> list[KernelGraph]:
    """Every kernel-graph prefix the search visits (dangling tensors become outputs)."""
    gen = Generator(program, cfg, collect_prefixes=True)
    gen.run()
    return gen.prefixes


# ---------------------------------------------------------------------------
# thread graphs


THREAD_FUSIBLE = ELEMENTWISE


def construct_thread_graphs(g: KernelGraph, threads: int = 128) -> KernelGraph:
    """Fuse chains of elementwise block operators into thread graphs, to a fixpoint."""
    ops = []
    for op in g.ops:
        if op.type is OpType.GRAPH_DEF and op.graph is not None:
            op = Op(op.id, op.type, op.inputs, op.outputs, op.attrs, fuse_block_graph(op.graph, threads))
        ops.append(op)
    return KernelGraph(g.tensors, g.inputs, tuple(ops), g.outputs, g.names)


def fuse_block_graph(bg: BlockGraph, threads: int = 128) -> BlockGraph:
    loop_ops = bg.loop_phase()
    consumers = bg.consumers()
    producer = bg.producers()
    group = {op.id: op.id for op in bg.ops}

    def find(a):
        while group[a] != a:
            group[a] = group[group[a]]
            a = group[a]
        return a

    changed = True
    while changed:
        changed = False
        for op in bg.ops:
            if op.type not in THREAD_FUSIBLE:
                continue
            for t in op.inputs:
                p = producer.get(t)
                if (p is None or p.type not in THREAD_FUSIBLE or len(consumers[t]) != 1
                        or t in bg.outputs or (p.id in loop_ops) != (op.id in loop_ops)):
                    continue
                a, b = find(p.id), find(op.id)
                if a != b:
                    group[a] = b
                    changed = True
    members: dict[int, list[Op]] = {}
    for op in bg.ops:
        members.setdefault(find(op.id), []).append(op)
    if all(len(m) == 1 for m in members.values()):
        return bg
    tensors = dict(bg.tensors)
    new_ops: list[Op] = []
    by_sink = {}
    for root, ms in members.items():
        if len(ms) > 1:
            by_sink[ms[-1].id] = ms
    fused_ids = {op.id for ms in by_sink.values() for op in ms}
    for op in bg.ops:
        if op.id in by_sink:
            ms = by_sink[op.id]
            inner = {t for m in ms for t in m.outputs}
            ext: list[int] = []
            for m in ms:
                for t in m.inputs:
                    if t not in inner and t not in ext:
                        ext.append(t)
            sink = op.outputs[0]
            tt: dict[int, Tensor] = {}
            for t in ext:
                tt[t] = bg.tensors[t]
            for m in ms:
                for t in m.outputs:
                    scope = Scope.SHARED if t == sink else Scope.REGISTER
                    tt[t] = Tensor(t, bg.tensors[t].shape, scope)
                    if t != sink:
                        tensors.pop(t, None)
            tops = tuple(Op(i, m.type, m.inputs, m.outputs, dict(m.attrs)) for i, m in enumerate(ms))
            tg = ThreadGraph(tt, tuple(ext), tops, (sink,), block_dims=(threads,), forloop=1)
            new_ops.append(Op(len(new_ops), OpType.THREAD_GRAPH, tuple(ext), (sink,), {}, tg))
        elif op.id in fused_ids:
            continue
        else:
            new_ops.append(Op(len(new_ops), op.type, op.inputs, op.outputs, op.attrs, op.graph))
    return BlockGraph(tensors, bg.inputs, tuple(new_ops), bg.outputs, grid=bg.grid, forloop=bg.forloop,
                      imaps=bg.imaps, fmaps=bg.fmaps, omaps=bg.omaps)
