"""Abstract expressions: terms that abstract the tensor function at a graph edge.

Terms are built from ``var``, ``add``, ``mul``, ``div``, ``exp``, ``sqrt``,
``silu`` and ``sum(k, .)``. Two tensors that differ only in which elements of
an input they combine share an abstract expression; the integer ``k`` of a
reduction is kept.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

from .ir import OpType, Shape, Unsupported

BINARY = ("add", "mul", "div")
UNARY = ("exp", "sqrt", "silu")
COMMUTATIVE = ("add", "mul")


@dataclass(frozen=True, slots=True)
class Expr:
    op: str
    args: tuple["Expr", ...] = ()
    k: int = 0
    name: str = ""

    def __repr__(self) -> str:
        return to_string(self)

    def size(self) -> int:
        return 1 + sum(a.size() for a in self.args)


def var(name) -> Expr:
    return Expr("var", name=str(name))


def add(a: Expr, b: Expr) -> Expr:
    return Expr("add", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    return Expr("div", (a, b))


def exp(a: Expr) -> Expr:
    return Expr("exp", (a,))


def sqrt(a: Expr) -> Expr:
    return Expr("sqrt", (a,))


def silu(a: Expr) -> Expr:
    return Expr("silu", (a,))


def sum_(k: int, a: Expr) -> Expr:
    if k < 1:
        raise ValueError(f"reduction extent must be positive, got {k}")
    return Expr("sum", (a,), k=k)


def to_string(e: Expr) -> str:
    """Human-friendly notation: ``e^a``, ``Σ_k a``, ``a/b``, ``a*b``, ``a+b``."""
    if e.op == "var":
        return e.name
    if e.op == "add":
        return f"({to_string(e.args[0])}+{to_string(e.args[1])})"
    if e.op == "mul":
        return f"({to_string(e.args[0])}*{to_string(e.args[1])})"
    if e.op == "div":
        return f"({to_string(e.args[0])}/{to_string(e.args[1])})"
    if e.op == "exp":
        return f"e^{to_string(e.args[0])}"
    if e.op == "sum":
        return f"Σ_{e.k} {to_string(e.args[0])}"
    return f"{e.op}({to_string(e.args[0])})"


def to_sexpr(e: Expr) -> str:
    if e.op == "var":
        return f"var({e.name})"
    if e.op == "sum":
        return f"sum({e.k},{to_sexpr(e.args[0])})"
    return f"{e.op}({','.join(to_sexpr(a) for a in e.args)})"


_OP_ORDER = {"var": 0, "sum": 1, "exp": 2, "sqrt": 3, "silu": 4, "div": 5, "mul": 6, "add": 7}


def term_order(e: Expr) -> tuple:
    return (_OP_ORDER[e.op], e.name, e.k, tuple(term_order(a) for a in e.args))


def _flatten(op: str, e: Expr, out: list[Expr]) -> None:
    if e.op == op:
        for a in e.args:
            _flatten(op, a, out)
    else:
        out.append(e)


def normalize(e: Expr) -> Expr:
    """Flatten and sort add/mul chains, merge nested sums, drop ``sum(1, .)``."""
    if e.op == "var":
        return e
    args = tuple(normalize(a) for a in e.args)
    if e.op == "sum":
        inner = args[0]
        k = e.k
        while inner.op == "sum":
            k *= inner.k
            inner = inner.args[0]
        return inner if k == 1 else Expr("sum", (inner,), k=k)
    if e.op in COMMUTATIVE:
        flat: list[Expr] = []
        for a in args:
            _flatten(e.op, a, flat)
        flat.sort(key=term_order)
        out = flat[-1]
        for a in reversed(flat[:-1]):
            out = Expr(e.op, (a, out))
        return out
    return Expr(e.op, args)


def expr_key(e: Expr) -> str:
    """Stable key of the normalized term (used to key the entailment cache)."""
    return hashlib.sha1(to_sexpr(normalize(e)).encode()).hexdigest()


def variables(e: Expr) -> set[str]:
    if e.op == "var":
        return {e.name}
    out: set[str] = set()
    for a in e.args:
        out |= variables(a)
    return out


def subterms(e: Expr) -> Iterable[Expr]:
    yield e
    for a in e.args:
        yield from subterms(a)


def infer_expr(op: OpType, attrs: dict, inputs: Sequence[Expr],
               shapes: Sequence[Shape]) -> list[Expr]:
    """Output abstract expressions of a pre-defined operator."""
    if op in (OpType.IN_ITER, OpType.OUT_SAVER, OpType.REPEAT, OpType.RESHAPE):
        return [inputs[0]]
    if op is OpType.MATMUL:
        return [sum_(shapes[0][-1], mul(inputs[0], inputs[1]))]
    if op is OpType.CONCAT_MATMUL:
        w, x, y, z = inputs
        return [add(sum_(shapes[0][-1], mul(w, y)), sum_(shapes[1][-1], mul(x, z)))]
    if op is OpType.SUM:
        return [sum_(attrs["k"], inputs[0])]
    if op is OpType.EW_ADD:
        return [add(inputs[0], inputs[1])]
    if op is OpType.EW_MUL:
        return [mul(inputs[0], inputs[1])]
    if op is OpType.EW_DIV:
        return [div(inputs[0], inputs[1])]
    if op is OpType.EW_EXP:
        return [exp(inputs[0])]
    if op is OpType.SQR:
        return [mul(inputs[0], inputs[0])]
    if op is OpType.SQRT:
        return [sqrt(inputs[0])]
    if op is OpType.SILU:
        return [silu(inputs[0])]
    if op is OpType.ACCUM:
        if attrs.get("fmap") is None:
            return [sum_(attrs["loop"], inputs[0])]
        return [inputs[0]]
    raise Unsupported(f"no abstract expression rule for {op}")


def graph_expr(graph, input_exprs: Sequence[Expr] | None = None) -> list[Expr]:
    """Expressions of a graph's outputs, with graph-defined operators inlined.

    Graph inputs default to ``var(<tensor name>)``.
    """
    if input_exprs is None:
        input_exprs = [var(graph.input_name(i)) for i in range(len(graph.inputs))]
    env: dict[int, Expr] = dict(zip(graph.inputs, input_exprs))
    for op in graph.ops:
        ins = [env[t] for t in op.inputs]
        if op.graph is not None:
            outs = _inline(op, ins)
        else:
            shapes = [graph.tensors[t].shape for t in op.inputs]
            attrs = dict(op.attrs)
            if op.type is OpType.ACCUM:
                attrs["loop"] = graph.forloop
            outs = infer_expr(op.type, attrs, ins, shapes)
        env.update(zip(op.outputs, outs))
    return [env[t] for t in graph.outputs]


def _inline(op, ins: list[Expr]) -> list[Expr]:
    sub = op.graph
    return graph_expr(sub, ins)
