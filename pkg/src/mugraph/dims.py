"""Dimension labels: which tensor dimensions range over the same index.

Every dimension of a program tensor gets a label; operators unify the labels
of the dimensions they align (elementwise operands, matmul rows, columns and
contractions). A label is *parallel* if it reaches a program output and
*reduced* if a Sum or a matmul contracts it and it never reaches an output.
Size-1 dimensions carry no label.

The generator uses labels to keep grid and loop partitioning consistent: a
grid axis splits one parallel index in every input that carries it, and the
loop slices one reduced index in every input that carries it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .ir import Graph, OpType, Shape

Label = "int | None"
Labels = tuple


class LabelConflict(Exception):
    pass


def strict_unify(a: int | None, b: int | None) -> int | None:
    if a is None:
        return b
    if b is None or a == b:
        return a
    raise LabelConflict(f"index {a} aligned with index {b}")


def _align(a, b, sa: int, sb: int, unify) -> int | None:
    if sa == 1:
        return b if sb > 1 else None
    if sb == 1:
        return a
    return unify(a, b)


def _matmul(a: Labels, b: Labels, sa: Shape, sb: Shape, unify, reduce) -> Labels:
    reduce(_align(a[-1], b[-2], sa[-1], sb[-2], unify))
    batch = tuple(_align(x, y, p, q, unify) for x, y, p, q in zip(a[:-2], b[:-2], sa[:-2], sb[:-2]))
    return batch + (a[-2], b[-1])


def propagate(op: OpType, attrs, shapes: Sequence[Shape], labels: Sequence[Labels | None],
              out_shape: Shape, unify: Callable = strict_unify,
              reduce: Callable = lambda lab: None) -> Labels | None:
    """Output labels of an operator, or None when they cannot be tracked.

    Raises LabelConflict (from ``unify``) when two different indices meet.
    """
    if op in (OpType.REPEAT, OpType.RESHAPE) or any(lab is None for lab in labels):
        return None
    if op in (OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV):
        (a, b), (sa, sb) = labels, shapes
        out = tuple(_align(x, y, p, q, unify) for x, y, p, q in zip(a, b, sa, sb))
    elif op is OpType.MATMUL:
        out = _matmul(labels[0], labels[1], shapes[0], shapes[1], unify, reduce)
    elif op is OpType.CONCAT_MATMUL:
        w, x, y, z = labels
        sw, sx, sy, sz = shapes
        left = _matmul(w, y, sw, sy, unify, reduce)
        right = _matmul(x, z, sx, sz, unify, reduce)
        out = tuple(_align(p, q, 2, 2, unify) for p, q in zip(left, right))
    elif op is OpType.SUM:
        reduce(labels[0][attrs["dim"]])
        out = tuple(labels[0])
    else:  # unary elementwise, InIter, Accum, OutSaver
        out = tuple(labels[0])
    return tuple(None if s == 1 else lab for lab, s in zip(out, out_shape))


class _UF:
    def __init__(self):
        self.parent: list[int] = []

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int | None, b: int | None) -> int | None:
        if a is None or b is None:
            return b if a is None else a
        a, b = self.find(a), self.find(b)
        lo, hi = min(a, b), max(a, b)
        self.parent[hi] = lo
        return lo


@dataclass(frozen=True)
class DimInfo:
    inputs: tuple[Labels | None, ...]
    outputs: tuple[Labels | None, ...]
    parallel: frozenset[int]
    reduced: frozenset[int]

    @property
    def tracked(self) -> bool:
        return all(lab is not None for lab in self.inputs + self.outputs)


def analyze(program: Graph) -> DimInfo:
    """Labels of the program's inputs and outputs."""
    uf = _UF()
    reduced: list[int] = []
    env: dict[int, Labels | None] = {}
    for t in program.inputs:
        env[t] = tuple(uf.make() if s > 1 else None for s in program.shape(t))
    for op in program.ops:
        lab = propagate(op.type, op.attrs, [program.shape(t) for t in op.inputs],
                        [env[t] for t in op.inputs], program.shape(op.outputs[0]), uf.union,
                        lambda x: reduced.append(x) if x is not None else None)
        for t in op.outputs:
            env[t] = lab

    def canon(lab):
        return None if lab is None else tuple(None if x is None else uf.find(x) for x in lab)

    outs = tuple(canon(env[t]) for t in program.outputs)
    parallel = frozenset(x for lab in outs if lab is not None for x in lab if x is not None)
    red = frozenset(uf.find(x) for x in reduced) - parallel
    return DimInfo(tuple(canon(env[t]) for t in program.inputs), outs, parallel, red)
