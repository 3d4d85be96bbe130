"""Hierarchical graph model: kernel, block and thread graphs.

Tensors are identified by integer ids that are unique within one graph level.
A graph-defined kernel operator binds its input/output kernel tensors
positionally to the inputs/outputs of its block graph; the same holds for a
thread-graph operator inside a block graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

Shape = tuple[int, ...]

GRID_AXES = ("x", "y", "z")
LOOP_AXIS = "i"
MAX_RANK = 4
DEFAULT_ELEM_BYTES = 2
DEFAULT_SMEM_LIMIT = 48 * 1024
DEFAULT_REG_LIMIT = 512


class MuGraphError(Exception):
    pass


class ShapeMismatch(MuGraphError):
    pass


class Unsupported(MuGraphError):
    pass


class NotDivisible(MuGraphError):
    def __init__(self, axis: str, dim: int, size: int, extent: int):
        super().__init__(f"dim {dim} (size {size}) not divisible by axis {axis} extent {extent}")
        self.axis = axis
        self.dim = dim


class ReplicaInOmap(MuGraphError):
    pass


class Scope(str, Enum):
    DEVICE = "device"
    SHARED = "shared"
    REGISTER = "register"


class OpType(Enum):
    IN_ITER = "InIter"
    OUT_SAVER = "OutSaver"
    MATMUL = "Matmul"
    SUM = "Sum"
    EW_ADD = "EwAdd"
    EW_MUL = "EwMul"
    EW_DIV = "EwDiv"
    EW_EXP = "EwExp"
    REPEAT = "Repeat"
    RESHAPE = "Reshape"
    SQR = "Sqr"
    SQRT = "Sqrt"
    SILU = "SiLU"
    ACCUM = "Accum"
    CONCAT_MATMUL = "ConcatMatmul"
    GRAPH_DEF = "GraphDef"
    THREAD_GRAPH = "ThreadGraph"

    @property
    def levels(self) -> frozenset[str]:
        return _LEVELS[self]

    @property
    def arity(self) -> int:
        return _ARITY[self]

    @property
    def type_id(self) -> int:
        return _TYPE_IDS[self]


_LEVELS = {
    OpType.IN_ITER: frozenset("B"),
    OpType.OUT_SAVER: frozenset("B"),
    OpType.MATMUL: frozenset("KBT"),
    OpType.SUM: frozenset("KBT"),
    OpType.EW_ADD: frozenset("KBT"),
    OpType.EW_MUL: frozenset("KBT"),
    OpType.EW_DIV: frozenset("KBT"),
    OpType.EW_EXP: frozenset("KBT"),
    OpType.REPEAT: frozenset("KB"),
    OpType.RESHAPE: frozenset("KB"),
    OpType.SQR: frozenset("KBT"),
    OpType.SQRT: frozenset("KBT"),
    OpType.SILU: frozenset("KBT"),
    OpType.ACCUM: frozenset("B"),
    OpType.CONCAT_MATMUL: frozenset("KB"),
    OpType.GRAPH_DEF: frozenset("K"),
    OpType.THREAD_GRAPH: frozenset("B"),
}
_ARITY = {t: 1 for t in OpType}
_ARITY.update({OpType.MATMUL: 2, OpType.EW_ADD: 2, OpType.EW_MUL: 2, OpType.EW_DIV: 2,
               OpType.CONCAT_MATMUL: 4, OpType.GRAPH_DEF: -1, OpType.THREAD_GRAPH: -1})
_TYPE_IDS = {t: i for i, t in enumerate(OpType)}

ELEMENTWISE = frozenset({OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV, OpType.EW_EXP,
                         OpType.SQR, OpType.SQRT, OpType.SILU})
COMMUTATIVE_OPS = frozenset({OpType.EW_ADD, OpType.EW_MUL})
# Sqrt and SiLU are accepted alongside the multi-linear/div/exp operators: the
# verifier gives sqrt a field rule and treats silu as an opaque function.
LAX_OPS = frozenset({OpType.MATMUL, OpType.SUM, OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV,
                     OpType.EW_EXP, OpType.REPEAT, OpType.RESHAPE, OpType.SQR, OpType.SQRT,
                     OpType.SILU, OpType.CONCAT_MATMUL})


class DimMap:
    """Map from axis label to a data dimension, or ``None`` for the replica φ."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, int | None] | Iterable[tuple[str, int | None]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries = tuple(sorted((str(a), d) for a, d in items))
        dims = [d for _, d in self._entries if d is not None]
        if len(dims) != len(set(dims)):
            raise ValueError(f"two axes map to the same dimension: {dict(self._entries)}")

    def get(self, axis: str) -> int | None:
        for a, d in self._entries:
            if a == axis:
                return d
        return None

    def items(self):
        return self._entries

    def axes(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self._entries)

    def __contains__(self, axis: str) -> bool:
        return any(a == axis for a, _ in self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, DimMap) and self._entries == other._entries

    def __hash__(self) -> int:
        return hash(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{a}↔{'φ' if d is None else d}" for a, d in self._entries)
        return "{" + inner + "}"

    def key(self) -> tuple:
        return tuple((a, -1 if d is None else d) for a, d in self._entries)

    def to_json(self) -> dict:
        return {a: ("phi" if d is None else d) for a, d in self._entries}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DimMap":
        return cls({a: (None if d == "phi" else int(d)) for a, d in obj.items()})


@dataclass(frozen=True, slots=True)
class Tensor:
    id: int
    shape: Shape
    scope: Scope

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Op:
    id: int
    type: OpType
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    attrs: Mapping = field(default_factory=dict)
    graph: "Graph | None" = None


@dataclass(frozen=True)
class Graph:
    tensors: Mapping[int, Tensor]
    inputs: tuple[int, ...]
    ops: tuple[Op, ...]
    outputs: tuple[int, ...]
    names: tuple[str, ...] = ()

    level = "?"
    forloop = 1

    def input_name(self, i: int) -> str:
        return self.names[i] if i < len(self.names) else f"in{i}"

    def shape(self, t: int) -> Shape:
        return self.tensors[t].shape

    def producers(self) -> dict[int, Op]:
        return {t: op for op in self.ops for t in op.outputs}

    def consumers(self) -> dict[int, list[Op]]:
        out: dict[int, list[Op]] = {t: [] for t in self.tensors}
        for op in self.ops:
            for t in op.inputs:
                out[t].append(op)
        return out


@dataclass(frozen=True)
class KernelGraph(Graph):
    level = "K"


@dataclass(frozen=True)
class BlockGraph(Graph):
    grid: tuple[int, ...] = (1,)
    forloop: int = 1
    imaps: tuple[DimMap, ...] = ()
    fmaps: tuple[DimMap, ...] = ()
    omaps: tuple[DimMap, ...] = ()
    level = "B"

    def grid_extents(self) -> dict[str, int]:
        return dict(zip(GRID_AXES, self.grid))

    def loop_phase(self) -> set[int]:
        """Ids of ops executed inside the for-loop body."""
        in_loop: set[int] = set()
        loop_tensors: set[int] = set()
        for op in self.ops:
            if op.type is OpType.IN_ITER or (
                    op.type is not OpType.ACCUM and any(t in loop_tensors for t in op.inputs)):
                in_loop.add(op.id)
                loop_tensors.update(op.outputs)
            elif op.type is OpType.ACCUM:
                in_loop.add(op.id)
        return in_loop


@dataclass(frozen=True)
class ThreadGraph(Graph):
    block_dims: tuple[int, ...] = (1,)
    forloop: int = 1
    level = "T"


# ---------------------------------------------------------------------------
# shapes


def _check_shape(shape: Sequence[int]) -> Shape:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= MAX_RANK or any(d < 1 for d in shape):
        raise ShapeMismatch(f"invalid shape {shape}")
    return shape


def broadcast_shape(a: Shape, b: Shape) -> Shape:
    if len(a) != len(b):
        raise ShapeMismatch(f"rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeMismatch(f"cannot broadcast {a} with {b}")
        out.append(max(x, y))
    return tuple(out)


def _matmul_shape(a: Shape, b: Shape) -> Shape:
    if len(a) < 2 or len(a) != len(b):
        raise ShapeMismatch(f"matmul needs equal ranks >= 2, got {a} and {b}")
    if a[:-2] != b[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a} vs {b}")
    if a[-1] != b[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a} vs {b}")
    return a[:-1] + (b[-1],)


def infer_output_shape(op: OpType, attrs: Mapping, shapes: Sequence[Shape],
                       level: str | None = None) -> Shape:
    """Output shape of a pre-defined operator applied to ``shapes``."""
    if not shapes:
        raise ShapeMismatch("operator needs at least one input")
    if level is not None and level not in op.levels:
        raise Unsupported(f"{op.value} not allowed at level {level}")
    if op.arity > 0 and len(shapes) != op.arity:
        raise ShapeMismatch(f"{op.value} takes {op.arity} inputs, got {len(shapes)}")
    shapes = [tuple(s) for s in shapes]
    if op is OpType.MATMUL:
        return _matmul_shape(shapes[0], shapes[1])
    if op is OpType.CONCAT_MATMUL:
        w, x, y, z = shapes
        left = _matmul_shape(w, y)
        if _matmul_shape(x, z) != left:
            raise ShapeMismatch(f"concat-matmul halves disagree: {shapes}")
        return left
    if op in (OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV):
        return broadcast_shape(shapes[0], shapes[1])
    if op in (OpType.EW_EXP, OpType.SQR, OpType.SQRT, OpType.SILU, OpType.IN_ITER,
              OpType.OUT_SAVER):
        return shapes[0]
    if op is OpType.SUM:
        d, k = attrs["dim"], attrs["k"]
        s = list(shapes[0])
        if not 0 <= d < len(s):
            raise ShapeMismatch(f"sum dim {d} out of range for {shapes[0]}")
        if k < 1 or s[d] % k:
            raise ShapeMismatch(f"sum extent {k} does not divide dim {d} of {shapes[0]}")
        s[d] //= k
        return tuple(s)
    if op is OpType.ACCUM:
        m = attrs.get("fmap")
        if m is None:
            return shapes[0]
        s = list(shapes[0])
        s[m] *= attrs["loop"]
        return tuple(s)
    if op is OpType.REPEAT:
        target = _check_shape(attrs["shape"])
        src = (1,) * (len(target) - len(shapes[0])) + shapes[0]
        if len(src) != len(target) or any(t % s for s, t in zip(src, target)):
            raise ShapeMismatch(f"cannot repeat {shapes[0]} to {target}")
        return target
    if op is OpType.RESHAPE:
        target = _check_shape(attrs["shape"])
        if math.prod(target) != math.prod(shapes[0]):
            raise ShapeMismatch(f"cannot reshape {shapes[0]} to {target}")
        return target
    raise Unsupported(f"no shape rule for {op.value}")


def partition_shape(shape: Shape, dmap: DimMap, extents: Mapping[str, int]) -> Shape:
    """Per-block (imap) or per-iteration (fmap) shape of a partitioned tensor."""
    s = list(shape)
    for axis, d in dmap.items():
        if d is None:
            continue
        e = extents.get(axis, 1)
        if s[d] % e:
            raise NotDivisible(axis, d, s[d], e)
        s[d] //= e
    return tuple(s)


def assemble_output_shape(tile: Shape, omap: DimMap, grid: Mapping[str, int] | Sequence[int]) -> Shape:
    if not isinstance(grid, Mapping):
        grid = dict(zip(GRID_AXES, grid))
    s = list(tile)
    for axis, d in omap.items():
        if d is None:
            raise ReplicaInOmap(f"omap maps axis {axis} to the replica dimension")
        s[d] *= grid.get(axis, 1)
    return tuple(s)


# ---------------------------------------------------------------------------
# validity and memory


@dataclass(frozen=True)
class Violation:
    condition: int
    message: str


@dataclass
class ValidityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def add(self, condition: int, message: str) -> None:
        self.violations.append(Violation(condition, message))


_LEVEL_SCOPE = {"K": Scope.DEVICE, "B": Scope.SHARED, "T": Scope.REGISTER}


def memory_usage(g: Graph, elem_bytes: int = DEFAULT_ELEM_BYTES) -> dict[Scope, int]:
    """Bytes per scope, summing every tensor that lives at the graph's own scope.

    Lifetimes are ignored; for a kernel graph the shared/register figures are
    the maximum over its block graphs (kernels run one at a time).
    """
    own = _LEVEL_SCOPE[g.level]
    usage = {Scope.DEVICE: 0, Scope.SHARED: 0, Scope.REGISTER: 0}
    for t in g.tensors.values():
        if t.scope is own:
            usage[own] += t.numel * elem_bytes
    for op in g.ops:
        if op.graph is not None:
            sub = memory_usage(op.graph, elem_bytes)
            for scope in (Scope.SHARED, Scope.REGISTER):
                if scope is not own:
                    usage[scope] = max(usage[scope], sub[scope])
    return usage


def thread_register_elements(tg: ThreadGraph) -> int:
    threads = math.prod(tg.block_dims)
    return sum(-(-t.numel // threads) for t in tg.tensors.values() if t.scope is Scope.REGISTER)


def validate(g: Graph, smem_limit: int = DEFAULT_SMEM_LIMIT, reg_limit: int = DEFAULT_REG_LIMIT,
             elem_bytes: int = DEFAULT_ELEM_BYTES) -> ValidityReport:
    """Check operator specs (1), memory capacities (2) and the loop path rule (3)."""
    report = ValidityReport()
    _validate(g, report, smem_limit, reg_limit, elem_bytes)
    return report


def _validate(g: Graph, report: ValidityReport, smem_limit: int, reg_limit: int,
              elem_bytes: int) -> None:
    level = g.level
    own = _LEVEL_SCOPE[level]
    known = set(g.inputs)
    for t in g.inputs:
        if t not in g.tensors:
            report.add(1, f"input {t} has no tensor record")
    for op in g.ops:
        if level not in op.type.levels:
            report.add(1, f"op {op.id} {op.type.value} not allowed in a {level} graph")
        missing = [t for t in op.inputs if t not in known]
        if missing:
            report.add(1, f"op {op.id} reads tensors {missing} before they are produced")
        known.update(op.outputs)
        _check_op(g, op, report)
        if op.graph is not None:
            _validate(op.graph, report, smem_limit, reg_limit, elem_bytes)
    for t in g.outputs:
        if t not in known:
            report.add(1, f"output {t} is never produced")
    # scopes: block/thread graph inputs and outputs are the parent's tensors
    boundary = set(g.inputs) | set(g.outputs) if level != "K" else set()
    parent_scope = {"B": Scope.DEVICE, "T": Scope.SHARED}.get(level)
    for t in g.tensors.values():
        expected = parent_scope if t.id in boundary else own
        if t.scope is not expected:
            report.add(1, f"tensor {t.id} has scope {t.scope.value}, expected {expected.value}")
    if level == "B":
        used = memory_usage(g, elem_bytes)[Scope.SHARED]
        if used > smem_limit:
            report.add(2, f"shared memory {used} B exceeds limit {smem_limit} B")
        _check_loop_paths(g, report)
    elif level == "T":
        regs = thread_register_elements(g)
        if regs > reg_limit:
            report.add(2, f"register footprint {regs} elements exceeds limit {reg_limit}")
        for op in g.ops:
            if op.type not in ELEMENTWISE:
                report.add(1, f"thread graph op {op.id} {op.type.value} is not a thread operator")


def _check_op(g: Graph, op: Op, report: ValidityReport) -> None:
    try:
        shapes = [g.tensors[t].shape for t in op.inputs]
    except KeyError as e:
        report.add(1, f"op {op.id} references unknown tensor {e}")
        return
    if op.type is OpType.GRAPH_DEF or op.type is OpType.THREAD_GRAPH:
        sub = op.graph
        if sub is None:
            report.add(1, f"op {op.id} has no attached graph")
            return
        if len(sub.inputs) != len(op.inputs) or len(sub.outputs) != len(op.outputs):
            report.add(1, f"op {op.id} arity does not match its graph")
            return
        for a, b in zip(op.inputs, sub.inputs):
            if g.shape(a) != sub.shape(b):
                report.add(1, f"op {op.id} input shape {g.shape(a)} != {sub.shape(b)}")
        for a, b in zip(op.outputs, sub.outputs):
            if g.shape(a) != sub.shape(b):
                report.add(1, f"op {op.id} output shape {g.shape(a)} != {sub.shape(b)}")
        return
    try:
        if op.type is OpType.IN_ITER:
            bg: BlockGraph = g  # type: ignore[assignment]
            pos = bg.inputs.index(op.inputs[0])
            tile = partition_shape(shapes[0], bg.imaps[pos], bg.grid_extents())
            expected = partition_shape(tile, bg.fmaps[pos], {LOOP_AXIS: bg.forloop})
        elif op.type is OpType.OUT_SAVER:
            bg = g  # type: ignore[assignment]
            pos = bg.outputs.index(op.outputs[0])
            expected = assemble_output_shape(shapes[0], bg.omaps[pos], bg.grid)
        else:
            attrs = dict(op.attrs)
            if op.type is OpType.ACCUM:
                attrs["loop"] = g.forloop
            expected = infer_output_shape(op.type, attrs, shapes)
    except (MuGraphError, ValueError, IndexError) as e:
        report.add(1, f"op {op.id} {op.type.value}: {e}")
        return
    got = g.shape(op.outputs[0])
    if got != expected:
        report.add(1, f"op {op.id} {op.type.value} output shape {got}, expected {expected}")


def _check_loop_paths(g: BlockGraph, report: ValidityReport) -> None:
    """Every input→output path passes exactly one InIter, one Accum, one OutSaver."""
    producers = g.producers()
    memo: dict[int, set[tuple[int, int, int]]] = {}

    def counts(t: int) -> set[tuple[int, int, int]]:
        # multiset of (initer, accum, outsaver) counts over paths from inputs to t
        if t in memo:
            return memo[t]
        if t in g.inputs:
            memo[t] = {(0, 0, 0)}
            return memo[t]
        op = producers.get(t)
        if op is None:
            memo[t] = set()
            return memo[t]
        inc = (op.type is OpType.IN_ITER, op.type is OpType.ACCUM, op.type is OpType.OUT_SAVER)
        out = set()
        for src in op.inputs:
            for a, b, c in counts(src):
                out.add((a + inc[0], b + inc[1], c + inc[2]))
        memo[t] = out
        return out

    for t in g.outputs:
        paths = counts(t)
        if not paths:
            report.add(3, f"output {t} is not reachable from any input")
        for p in paths:
            if p != (1, 1, 1):
                report.add(3, f"a path to output {t} crosses InIter/Accum/OutSaver {p} times")
                break


# ---------------------------------------------------------------------------
# Lax fragment


def lax_violations(g: Graph) -> list[str]:
    """Reasons ``g`` is outside the Lax fragment (empty list if it is inside)."""
    problems = []
    for op in g.ops:
        if op.type not in LAX_OPS:
            problems.append(f"op {op.id} {op.type.value} is not a Lax operator")
    producers = g.producers()
    memo: dict[int, int] = {}

    def max_exps(t: int) -> int:
        if t not in memo:
            op = producers.get(t)
            if op is None:
                memo[t] = 0
            else:
                memo[t] = (op.type is OpType.EW_EXP) + max((max_exps(s) for s in op.inputs), default=0)
        return memo[t]

    for t in g.outputs:
        if max_exps(t) > 1:
            problems.append(f"a path to output {t} contains {max_exps(t)} exponentiations")
    return problems


def is_lax(g: Graph) -> bool:
    return not lax_violations(g)


# ---------------------------------------------------------------------------
# builders


class _Builder:
    level = "K"

    def __init__(self):
        self.tensors: dict[int, Tensor] = {}
        self.ops: list[Op] = []
        self.inputs: list[int] = []
        self.names: list[str] = []

    def _tensor(self, shape: Shape, scope: Scope) -> int:
        tid = len(self.tensors)
        self.tensors[tid] = Tensor(tid, _check_shape(shape), scope)
        return tid

    def _scope(self) -> Scope:
        return _LEVEL_SCOPE[self.level]

    def op(self, op_type: OpType, inputs: Sequence[int], **attrs) -> int:
        shapes = [self.tensors[t].shape for t in inputs]
        a = dict(attrs)
        if op_type is OpType.ACCUM:
            a["loop"] = getattr(self, "forloop", 1)
        shape = infer_output_shape(op_type, a, shapes, self.level)
        out = self._tensor(shape, self._scope())
        self.ops.append(Op(len(self.ops), op_type, tuple(inputs), (out,), dict(attrs)))
        return out


class KernelBuilder(_Builder):
    level = "K"

    def input(self, shape: Sequence[int], name: str | None = None) -> int:
        tid = self._tensor(tuple(shape), Scope.DEVICE)
        self.inputs.append(tid)
        self.names.append(name or f"in{len(self.inputs) - 1}")
        return tid

    def graph_def(self, block: "BlockBuilder | BlockGraph", inputs: Sequence[int]) -> tuple[int, ...]:
        bg = block.build() if isinstance(block, BlockBuilder) else block
        for a, b in zip(inputs, bg.inputs):
            if self.tensors[a].shape != bg.shape(b):
                raise ShapeMismatch(f"graph-def input {a} shape {self.tensors[a].shape} != {bg.shape(b)}")
        outs = tuple(self._tensor(bg.shape(t), Scope.DEVICE) for t in bg.outputs)
        self.ops.append(Op(len(self.ops), OpType.GRAPH_DEF, tuple(inputs), outs, {}, bg))
        return outs

    def build(self, outputs: Sequence[int]) -> KernelGraph:
        return KernelGraph(dict(self.tensors), tuple(self.inputs), tuple(self.ops), tuple(outputs),
                           tuple(self.names))


class BlockBuilder(_Builder):
    level = "B"

    def __init__(self, grid: Sequence[int] = (1,), forloop: int = 1):
        super().__init__()
        self.grid = tuple(grid)
        self.forloop = forloop
        self.imaps: list[DimMap] = []
        self.fmaps: list[DimMap] = []
        self.outputs: list[int] = []
        self.omaps: list[DimMap] = []

    def input(self, shape: Sequence[int], imap: Mapping | DimMap = (), fmap: Mapping | DimMap = ()) -> int:
        """Declare a block input and return the id of its InIter output."""
        imap = imap if isinstance(imap, DimMap) else DimMap(imap)
        fmap = fmap if isinstance(fmap, DimMap) else DimMap(fmap)
        src = self._tensor(tuple(shape), Scope.DEVICE)
        self.inputs.append(src)
        self.imaps.append(imap)
        self.fmaps.append(fmap)
        tile = partition_shape(tuple(shape), imap, dict(zip(GRID_AXES, self.grid)))
        tile = partition_shape(tile, fmap, {LOOP_AXIS: self.forloop})
        out = self._tensor(tile, Scope.SHARED)
        self.ops.append(Op(len(self.ops), OpType.IN_ITER, (src,), (out,), {}))
        return out

    def thread_graph(self, tg: ThreadGraph, inputs: Sequence[int]) -> tuple[int, ...]:
        outs = tuple(self._tensor(tg.shape(t), Scope.SHARED) for t in tg.outputs)
        self.ops.append(Op(len(self.ops), OpType.THREAD_GRAPH, tuple(inputs), outs, {}, tg))
        return outs

    def output(self, t: int, omap: Mapping | DimMap) -> int:
        omap = omap if isinstance(omap, DimMap) else DimMap(omap)
        shape = assemble_output_shape(self.tensors[t].shape, omap, self.grid)
        out = self._tensor(shape, Scope.DEVICE)
        self.ops.append(Op(len(self.ops), OpType.OUT_SAVER, (t,), (out,), {}))
        self.outputs.append(out)
        self.omaps.append(omap)
        return out

    def build(self) -> BlockGraph:
        return BlockGraph(dict(self.tensors), tuple(self.inputs), tuple(self.ops), tuple(self.outputs),
                          grid=self.grid, forloop=self.forloop, imaps=tuple(self.imaps),
                          fmaps=tuple(self.fmaps), omaps=tuple(self.omaps))


# ---------------------------------------------------------------------------
# JSON


def _attrs_to_json(attrs: Mapping) -> dict:
    out = {}
    for k, v in attrs.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _attrs_from_json(obj: Mapping) -> dict:
    out = {}
    for k, v in obj.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def _body_to_json(g: Graph) -> dict:
    ops = []
    for op in g.ops:
        o = {"id": op.id, "type": op.type.value, "attrs": _attrs_to_json(op.attrs),
             "inputs": list(op.inputs), "outputs": list(op.outputs)}
        if isinstance(op.graph, BlockGraph):
            o["blockGraph"] = to_json(op.graph)
        elif isinstance(op.graph, ThreadGraph):
            o["threadGraph"] = to_json(op.graph)
        ops.append(o)
    return {"tensors": [{"id": t.id, "shape": list(t.shape), "scope": t.scope.value}
                        for t in sorted(g.tensors.values(), key=lambda t: t.id)],
            "ops": ops}


def to_json(g: Graph) -> dict:
    """Serialize a graph of any level to plain JSON-compatible data."""
    body = _body_to_json(g)
    if isinstance(g, BlockGraph):
        body["gridDims"] = list(g.grid)
        body["forloopDim"] = g.forloop
        body["inputs"] = [{"id": t, "imap": m.to_json(), "fmap": f.to_json()}
                          for t, m, f in zip(g.inputs, g.imaps, g.fmaps)]
        body["outputs"] = [{"id": t, "omap": m.to_json()} for t, m in zip(g.outputs, g.omaps)]
        return {"level": "block", **body}
    if isinstance(g, ThreadGraph):
        return {"level": "thread", "blockDims": list(g.block_dims), "forloopDim": g.forloop,
                **body, "inputs": list(g.inputs), "outputs": list(g.outputs)}
    return {"level": "kernel", "names": list(g.names), **body, "inputs": list(g.inputs),
            "outputs": list(g.outputs)}


def from_json(obj: Mapping) -> Graph:
    tensors = {int(t["id"]): Tensor(int(t["id"]), tuple(t["shape"]), Scope(t["scope"]))
               for t in obj["tensors"]}
    ops = []
    for o in obj["ops"]:
        sub = None
        if "blockGraph" in o:
            sub = from_json(o["blockGraph"])
        elif "threadGraph" in o:
            sub = from_json(o["threadGraph"])
        ops.append(Op(int(o["id"]), OpType(o["type"]), tuple(o["inputs"]), tuple(o["outputs"]),
                      _attrs_from_json(o.get("attrs", {})), sub))
    level = obj.get("level", "kernel")
    if level == "block":
        return BlockGraph(tensors, tuple(i["id"] for i in obj["inputs"]), tuple(ops),
                          tuple(o["id"] for o in obj["outputs"]), grid=tuple(obj["gridDims"]),
                          forloop=int(obj["forloopDim"]),
                          imaps=tuple(DimMap.from_json(i["imap"]) for i in obj["inputs"]),
                          fmaps=tuple(DimMap.from_json(i["fmap"]) for i in obj["inputs"]),
                          omaps=tuple(DimMap.from_json(o["omap"]) for o in obj["outputs"]))
    if level == "thread":
        return ThreadGraph(tensors, tuple(obj["inputs"]), tuple(ops), tuple(obj["outputs"]),
                           block_dims=tuple(obj["blockDims"]), forloop=int(obj["forloopDim"]))
    return KernelGraph(tensors, tuple(obj["inputs"]), tuple(ops), tuple(obj["outputs"]),
                       tuple(obj.get("names", ())))


def canonical_key(g: Graph) -> str:
    return json.dumps(to_json(g), sort_keys=True, separators=(",", ":"))
