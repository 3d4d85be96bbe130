"""Structural comparisons and predicates over µGraphs.

``structural_key`` hashes a graph bottom-up from its inputs. Graph inputs
are identified by position and every tensor by its producer, so two graphs
get the same key exactly when they are isomorphic (commutative operands are
unordered; dead operators count as a multiset).

The predicates take a graph or its JSON form and return a list of failed
checks, so an empty list means the structure is present.
"""

from __future__ import annotations

import hashlib
from typing import Mapping

from .ir import COMMUTATIVE_OPS, BlockGraph, Graph, Op, OpType, Scope, Tensor, ThreadGraph, from_json


def _h(*parts) -> str:
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:20]


def _as_graph(g: Graph | Mapping) -> Graph:
    return g if isinstance(g, Graph) else from_json(g)


def structural_key(g: Graph | Mapping, expand_threads: bool = True) -> str:
    g = _as_graph(g)
    if expand_threads and isinstance(g, BlockGraph):
        g = inline_thread_graphs(g)
    env: dict[int, str] = {}
    for pos, t in enumerate(g.inputs):
        extra = ()
        if isinstance(g, BlockGraph):
            extra = (g.imaps[pos].key(), g.fmaps[pos].key())
        env[t] = _h("in", pos, g.shape(t), extra)
    op_keys = []
    for op in _topological(g):
        ins = [env[t] for t in op.inputs]
        if op.type in COMMUTATIVE_OPS:
            ins.sort()
        sub = ""
        if op.graph is not None:
            sub = structural_key(op.graph, expand_threads)
        attrs = tuple(sorted((k, repr(v)) for k, v in op.attrs.items()))
        k = _h(op.type.value, attrs, tuple(ins), sub)
        op_keys.append(k)
        for j, t in enumerate(op.outputs):
            env[t] = _h(k, j, g.shape(t))
    outs = [env[t] for t in g.outputs]
    extra = ()
    if isinstance(g, BlockGraph):
        outs = [_h(o, m.key()) for o, m in zip(outs, g.omaps)]
        extra = (tuple(g.grid), g.forloop)
    elif isinstance(g, ThreadGraph):
        extra = (tuple(g.block_dims), g.forloop)
    ins = tuple(env[t] for t in g.inputs)
    return _h(g.level, extra, ins, tuple(outs), tuple(sorted(op_keys)))


def isomorphic(a: Graph | Mapping, b: Graph | Mapping) -> bool:
    return structural_key(a) == structural_key(b)


def _topological(g: Graph) -> list[Op]:
    ready = set(g.inputs)
    pending = list(g.ops)
    out = []
    while pending:
        rest = []
        for op in pending:
            if all(t in ready for t in op.inputs):
                out.append(op)
                ready.update(op.outputs)
            else:
                rest.append(op)
        if len(rest) == len(pending):
            raise ValueError("graph has a cycle or a dangling input")
        pending = rest
    return out


def inline_thread_graphs(bg: BlockGraph) -> BlockGraph:
    """The same block graph with every thread-graph operator expanded in place."""
    if not any(op.type is OpType.THREAD_GRAPH for op in bg.ops):
        return bg
    tensors = dict(bg.tensors)
    next_t = max(tensors) + 1
    ops: list[Op] = []
    for op in bg.ops:
        if op.type is not OpType.THREAD_GRAPH:
            ops.append(op)
            continue
        tg = op.graph
        env = dict(zip(tg.inputs, op.inputs)) | dict(zip(tg.outputs, op.outputs))
        for inner in tg.ops:
            for t in inner.outputs:
                if t not in env:
                    env[t] = next_t
                    tensors[next_t] = Tensor(next_t, tg.shape(t), Scope.SHARED)
                    next_t += 1
            ops.append(Op(len(ops), inner.type, tuple(env[t] for t in inner.inputs),
                          tuple(env[t] for t in inner.outputs), dict(inner.attrs)))
    ops = [Op(i, o.type, o.inputs, o.outputs, o.attrs, o.graph) for i, o in enumerate(ops)]
    return BlockGraph(tensors, bg.inputs, tuple(ops), bg.outputs, bg.names, grid=bg.grid,
                      forloop=bg.forloop, imaps=bg.imaps, fmaps=bg.fmaps, omaps=bg.omaps)


def graph_defs(g: Graph | Mapping) -> list[BlockGraph]:
    g = _as_graph(g)
    return [inline_thread_graphs(op.graph) for op in g.ops if isinstance(op.graph, BlockGraph)]


def _ancestors(g: Graph, t: int) -> set[int]:
    """Ids of operators that ``t`` depends on."""
    prod = g.producers()
    seen: set[int] = set()
    stack = [t]
    while stack:
        op = prod.get(stack.pop())
        if op is None or op.id in seen:
            continue
        seen.add(op.id)
        stack.extend(op.inputs)
    return seen


def origin(g: Graph, t: int, names: Mapping[int, str] | None = None):
    """Where a tensor's data comes from, as a nested tuple over input names.

    Data movement (InIter, OutSaver, Accum) is transparent; Matmul becomes
    ``("mm", a, b)`` and other operators ``(type, *inputs)``.
    """
    prod = g.producers()
    if names is None:
        names = {t: g.input_name(i) for i, t in enumerate(g.inputs)}
    op = prod.get(t)
    if op is None:
        return names.get(t, f"t{t}")
    if op.type in (OpType.IN_ITER, OpType.OUT_SAVER, OpType.ACCUM):
        return origin(g, op.inputs[0], names)
    if op.type is OpType.GRAPH_DEF:
        bg = inline_thread_graphs(op.graph)
        inner = {bt: origin(g, kt, names) for bt, kt in zip(bg.inputs, op.inputs)}
        return _origin_inner(bg, bg.outputs[op.outputs.index(t)], inner)
    ins = tuple(origin(g, i, names) for i in op.inputs)
    return ("mm",) + ins if op.type is OpType.MATMUL else (op.type.value,) + ins


def _origin_inner(g: Graph, t: int, inputs: Mapping[int, object]):
    prod = g.producers()
    op = prod.get(t)
    if op is None:
        return inputs.get(t, f"t{t}")
    if op.type in (OpType.IN_ITER, OpType.OUT_SAVER, OpType.ACCUM):
        return _origin_inner(g, op.inputs[0], inputs)
    ins = tuple(_origin_inner(g, i, inputs) for i in op.inputs)
    return ("mm",) + ins if op.type is OpType.MATMUL else (op.type.value,) + ins


# ---------------------------------------------------------------------------
# predicates


def rmsnorm_structure(g: Graph | Mapping) -> list[str]:
    """One graph-defined kernel holding two independent loop accumulations
    (matmul and sum of squares) combined after the loop by Sqrt and Div."""
    g = _as_graph(g)
    fails = []
    if len(g.ops) != 1 or g.ops[0].type is not OpType.GRAPH_DEF:
        return [f"expected one GraphDef kernel, got {[op.type.value for op in g.ops]}"]
    bg = inline_thread_graphs(g.ops[0].graph)
    accs = [op for op in bg.ops if op.type is OpType.ACCUM]
    if len(accs) != 2 or any(op.attrs.get("fmap") is not None for op in accs):
        return [f"expected two replica accumulators, got {len(accs)}"]
    if bg.forloop < 2:
        fails.append("the for-loop is not used")
    cones = []
    for acc in accs:
        cone = {i for i in _ancestors(bg, acc.inputs[0])
                if bg.ops[_index(bg, i)].type is not OpType.IN_ITER}
        cones.append(cone)
    if cones[0] & cones[1]:
        fails.append("accumulator chains share computation")
    producers = {o.id: o for o in bg.ops}
    kinds = [producers[i].type for i in cones[0] | cones[1]]
    if OpType.MATMUL not in kinds:
        fails.append("no matmul inside the loop")
    loop_ops = bg.loop_phase()
    post = [op for op in bg.ops if op.id not in loop_ops and op.type is not OpType.OUT_SAVER]
    post_types = {op.type for op in post}
    for need in (OpType.SQRT, OpType.EW_DIV):
        if need not in post_types:
            fails.append(f"no post-loop {need.value}")
    out_cone = _ancestors(bg, bg.outputs[0])
    if not all(acc.id in out_cone for acc in accs):
        fails.append("output does not combine both accumulators")
    return fails


def _index(g: Graph, op_id: int) -> int:
    for k, op in enumerate(g.ops):
        if op.id == op_id:
            return k
    raise KeyError(op_id)


def _contains(node, target) -> bool:
    if node == target:
        return True
    return isinstance(node, tuple) and any(_contains(c, target) for c in node[1:])


def lora_structure(g: Graph | Mapping) -> list[str]:
    """A ConcatMatmul computing ``(W ‖ B) × (X ‖ A×X)``."""
    g = _as_graph(g)
    names = {t: g.input_name(i) for i, t in enumerate(g.inputs)}
    found = []
    for op in g.ops:
        graphs = [(g, None)]
        if isinstance(op.graph, BlockGraph):
            bg = inline_thread_graphs(op.graph)
            inner = {bt: origin(g, kt, names) for bt, kt in zip(bg.inputs, op.inputs)}
            graphs = [(bg, inner)]
        for h, inner in graphs:
            for cm in h.ops:
                if cm.type is not OpType.CONCAT_MATMUL:
                    continue
                if inner is None:
                    w, x, y, z = (origin(h, t, names) for t in cm.inputs)
                else:
                    w, x, y, z = (_origin_inner(h, t, inner) for t in cm.inputs)
                found.append(frozenset({(w, y), (x, z)}))
    if not found:
        return ["no ConcatMatmul in the graph"]
    want = frozenset({("W", "X"), ("B", ("mm", "A", "X"))})
    if want not in found:
        return [f"ConcatMatmul operands {sorted(map(sorted, found))} do not realize (W|B)x(X|AX)"]
    return []


def gatedmlp_structure(g: Graph | Mapping) -> list[str]:
    """One block graph holding both matmuls with SiLU and Mul applied in place."""
    g = _as_graph(g)
    defs = [op for op in g.ops if isinstance(op.graph, BlockGraph)]
    if len(g.ops) != 1 or len(defs) != 1:
        return [f"expected a single graph-defined kernel, got {[op.type.value for op in g.ops]}"]
    bg = inline_thread_graphs(defs[0].graph)
    names = {t: g.input_name(i) for i, t in enumerate(g.inputs)}
    inner = {bt: origin(g, kt, names) for bt, kt in zip(bg.inputs, defs[0].inputs)}
    fails = []
    mms = {_origin_inner(bg, op.outputs[0], inner) for op in bg.ops if op.type is OpType.MATMUL}
    for want in (("mm", "X", "W1"), ("mm", "X", "W2")):
        if want not in mms:
            fails.append(f"missing {want} in the block graph")
    types = {op.type for op in bg.ops}
    for need in (OpType.SILU, OpType.EW_MUL):
        if need not in types:
            fails.append(f"no {need.value} in the block graph")
    out = _origin_inner(bg, bg.outputs[0], inner)
    if not (_contains(out, ("SiLU", ("mm", "X", "W1"))) and _contains(out, ("mm", "X", "W2"))):
        fails.append(f"output {out} is not silu(X W1) * (X W2)")
    return fails
