from __future__ import annotations

import numpy as np
import pytest

from mugraph import fixtures
from mugraph.egraph import Entailment, equivalent
from mugraph.expr import graph_expr, infer_expr, mul, var
from mugraph.generator import (ConfigError, Generator, Invalid, SearchConfig, _rank, construct_thread_graphs,
                               enumerate_ops, enumerate_prefixes, fuse_block_graph, generate)
from mugraph.interp import eval_mugraph, random_inputs
from mugraph.ir import BlockBuilder, KernelBuilder, OpType, Scope, canonical_key, validate
from mugraph.structure import isomorphic

KERNEL_ONLY = dict(max_kernel_ops=3, max_graphdefs=0, consistent_dims=False,
                   kernel_pool=(OpType.EW_ADD, OpType.EW_MUL))


def xz_yz_program():
    """X*Z + Y*Z over small square tensors."""
    kb = KernelBuilder()
    x, y, z = kb.input((2, 2), "X"), kb.input((2, 2), "Y"), kb.input((2, 2), "Z")
    xz = kb.op(OpType.EW_MUL, [x, z])
    yz = kb.op(OpType.EW_MUL, [y, z])
    return kb.build([kb.op(OpType.EW_ADD, [xz, yz])])


def op_exprs(g):
    env = {t: var(g.input_name(i)) for i, t in enumerate(g.inputs)}
    for op in g.ops:
        (env[op.outputs[0]],) = infer_expr(op.type, op.attrs, [env[t] for t in op.inputs],
                                           [g.shape(t) for t in op.inputs])
    return [env[op.outputs[0]] for op in g.ops]


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(workers=0), dict(max_kernel_ops=0), dict(grid_candidates=()),
                                 dict(loop_candidates=(0,)), dict(graphdef_inputs="some"),
                                 dict(grid_candidates=((1, 1, 1, 1),))])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        SearchConfig(**bad)


def test_graphdef_program_rejected():
    with pytest.raises(ConfigError):
        generate(fixtures.rmsnorm_fused(), SearchConfig(max_kernel_ops=1))


# -- base cases ------------------------------------------------------------------


def test_single_matmul_program():
    kb = KernelBuilder()
    a, b = kb.input((4, 8), "A"), kb.input((8, 4), "B")
    p = kb.build([kb.op(OpType.MATMUL, [a, b])])
    res = generate(p, SearchConfig(max_kernel_ops=1, max_graphdefs=0))
    assert [c.trivial for c in res.candidates] == [True]
    assert canonical_key(res.candidates[0].graph) == canonical_key(p)


def test_candidates_are_valid_and_equivalent_in_expression():
    p = fixtures.gatedmlp_program()
    res = generate(p, SearchConfig(max_kernel_ops=2, max_block_ops=8, grid_candidates=((1,), (2,)),
                                   loop_candidates=(1, 2)))
    assert len(res.candidates) > 1
    (target,) = graph_expr(p)
    for c in res.candidates:
        assert validate(c.graph).valid
        assert equivalent(graph_expr(c.graph)[0], target)


# -- expression pruning ------------------------------------------------------------


def test_xz_yz_never_multiplies_x_by_y():
    prefixes = enumerate_prefixes(xz_yz_program(), SearchConfig(**KERNEL_ONLY))
    xy = mul(var("X"), var("Y"))
    for g in prefixes:
        assert not any(equivalent(e, xy) for e in op_exprs(g))
    res = generate(xz_yz_program(), SearchConfig(**KERNEL_ONLY))
    assert any(c.graph.ops[0].type is OpType.EW_ADD for c in res.candidates)


def test_pruned_candidates_match_filtered_exhaustive_search():
    p = xz_yz_program()
    on = generate(p, SearchConfig(**KERNEL_ONLY))
    off = generate(p, SearchConfig(prune=False, **KERNEL_ONLY))
    ent = Entailment(graph_expr(p))

    def admissible(g):
        exprs = op_exprs(g) + [var(n) for n in g.names]
        if not all(ent(e) for e in op_exprs(g)):
            return False
        return not any(equivalent(a, b) for i, a in enumerate(exprs) for b in exprs[i + 1:])

    assert off.stats.prefixes > on.stats.prefixes
    assert {c.key for c in off.candidates if admissible(c.graph)} == {c.key for c in on.candidates}


def test_pruned_prefixes_are_subset_of_unpruned():
    p = xz_yz_program()
    on = {canonical_key(g) for g in enumerate_prefixes(p, SearchConfig(**KERNEL_ONLY))}
    off = {canonical_key(g) for g in enumerate_prefixes(p, SearchConfig(prune=False, **KERNEL_ONLY))}
    assert on < off


def test_construct_op_reasons():
    p = xz_yz_program()
    gen = Generator(p, SearchConfig(**KERNEL_ONLY))
    shapes = [(2, 2)] * 3
    classes = [gen.oracle.var(n) for n in ("X", "Y", "Z")]
    assert gen.construct_op(OpType.EW_MUL, (0, 1), {}, shapes, classes) == Invalid.EXPR
    assert not isinstance(gen.construct_op(OpType.EW_ADD, (0, 1), {}, shapes, classes), str)
    loose = Generator(p, SearchConfig(prune=False, **KERNEL_ONLY))
    assert loose.construct_op(OpType.MATMUL, (0, 1), {}, [(2, 3), (2, 3), (2, 2)], classes) == Invalid.SHAPE
    big = loose.construct_op(OpType.EW_ADD, (0, 1), {}, shapes, classes, smem=loose.cfg.smem_limit - 4)
    assert big == Invalid.MEMORY


# -- canonical order ---------------------------------------------------------------


def test_enumerate_ops_respects_rank():
    pool = (OpType.EW_ADD, OpType.EW_MUL, OpType.MATMUL)
    shapes = [(2, 2)] * 4
    all_ops = list(enumerate_ops(pool, shapes, None))
    assert len({(t, i) for t, i, _ in all_ops}) == len(all_ops)
    last = _rank(OpType.EW_MUL, (1, 2), {})
    for t, ins, attrs in enumerate_ops(pool, shapes, last):
        assert _rank(t, ins, attrs) > last


def test_commutative_inputs_are_sorted():
    for t, ins, _ in enumerate_ops((OpType.EW_ADD, OpType.EW_MUL), [(2, 2)] * 3, None):
        assert list(ins) == sorted(ins)


def test_generated_candidates_are_pairwise_non_isomorphic():
    res = generate(fixtures.gatedmlp_program(), SearchConfig(max_kernel_ops=2, max_block_ops=8,
                                                             grid_candidates=((1,), (2,)), loop_candidates=(1, 2)))
    graphs = [c.graph for c in res.candidates]
    for i, a in enumerate(graphs):
        for b in graphs[i + 1:]:
            assert not isomorphic(a, b)


# -- workers -------------------------------------------------------------------------


def test_workers_find_the_same_candidates():
    p = fixtures.gatedmlp_program()
    cfg = SearchConfig(max_kernel_ops=2, max_block_ops=8, grid_candidates=((1,), (2,)), loop_candidates=(1, 2))
    one = generate(p, cfg)
    two = generate(p, SearchConfig(**{**cfg.__dict__, "workers": 2}))
    assert [c.key for c in one.candidates] == [c.key for c in two.candidates]
    assert two.stats.candidates == one.stats.candidates


# -- thread graphs -------------------------------------------------------------------


def _post_loop_chain():
    """Accum a, b; then Div(a, Sqrt(Mul(a, b))) after the loop."""
    kb = KernelBuilder()
    X, Y = kb.input((4, 8), "X"), kb.input((4, 8), "Y")
    bb = BlockBuilder(grid=(2,), forloop=2)
    x = bb.input((4, 8), {"x": 0}, {"i": 1})
    y = bb.input((4, 8), {"x": 0}, {"i": 1})
    a = bb.op(OpType.ACCUM, [bb.op(OpType.SUM, [x], dim=1, k=4)], fmap=None)
    b = bb.op(OpType.ACCUM, [bb.op(OpType.SUM, [y], dim=1, k=4)], fmap=None)
    m = bb.op(OpType.EW_MUL, [a, b])
    s = bb.op(OpType.SQRT, [m])
    bb.output(bb.op(OpType.EW_DIV, [a, s]), {"x": 0})
    (out,) = kb.graph_def(bb, [X, Y])
    return kb.build([out])


def _fan_out():
    """Exp feeds both Sqrt and Div, so it cannot join their thread graph."""
    kb = KernelBuilder()
    X = kb.input((4, 8), "X")
    bb = BlockBuilder(grid=(1,), forloop=1)
    x = bb.input((4, 8), {}, {})
    a = bb.op(OpType.ACCUM, [x], fmap=None)
    e = bb.op(OpType.EW_EXP, [a])
    bb.output(bb.op(OpType.EW_DIV, [e, bb.op(OpType.SQRT, [e])]), {"x": 0})
    (out,) = kb.graph_def(bb, [X])
    return kb.build([out])


def _thread_ops(bg):
    return [op for op in bg.ops if op.type is OpType.THREAD_GRAPH]


def _check_registers_single_consumer(bg):
    for tg in (op.graph for op in _thread_ops(bg)):
        cons = tg.consumers()
        for t in tg.tensors.values():
            if t.scope is Scope.REGISTER:
                assert len(cons[t.id]) == 1


def _same_values(a, b):
    xs = [np.abs(x) + 0.1 for x in random_inputs(a, np.random.default_rng(0))]
    for u, v in zip(eval_mugraph(a, xs), eval_mugraph(b, xs)):
        assert np.allclose(u, v, rtol=1e-12, atol=0)


def test_mul_sqrt_div_fuse_into_one_thread_graph():
    g = _post_loop_chain()
    fused = construct_thread_graphs(g)
    bg = fused.ops[0].graph
    (tg,) = _thread_ops(bg)
    assert [op.type for op in tg.graph.ops] == [OpType.EW_MUL, OpType.SQRT, OpType.EW_DIV]
    assert validate(fused).valid
    _check_registers_single_consumer(bg)
    _same_values(g, fused)


def test_no_adjacent_elementwise_is_unchanged():
    bg = fixtures.rmsnorm_unfused_kernels().ops[1].graph
    assert fuse_block_graph(bg) is bg


def test_fan_out_stops_fusion():
    g = _fan_out()
    fused = construct_thread_graphs(g)
    bg = fused.ops[0].graph
    (tg,) = _thread_ops(bg)
    assert [op.type for op in tg.graph.ops] == [OpType.SQRT, OpType.EW_DIV]
    assert OpType.EW_EXP in [op.type for op in bg.ops]
    _check_registers_single_consumer(bg)
    _same_values(g, fused)


def test_loop_and_post_loop_ops_never_share_a_thread_graph():
    g = construct_thread_graphs(fixtures.rmsnorm_fused())
    bg = g.ops[0].graph
    (tg,) = _thread_ops(bg)
    assert [op.type for op in tg.graph.ops] == [OpType.SQRT, OpType.EW_DIV]
    assert validate(g).valid
    _same_values(fixtures.rmsnorm_fused(), g)


def test_fusion_reaches_fixpoint():
    g = construct_thread_graphs(_post_loop_chain())
    assert canonical_key(construct_thread_graphs(g)) == canonical_key(g)
