from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, strategies as st

from mugraph import fixtures
from mugraph.dims import analyze
from mugraph.egraph import EGraph, Entailment, Verdict, equivalent, is_subexpr
from mugraph.expr import (add, div, exp, expr_key, graph_expr, infer_expr, mul, normalize, silu, sqrt, sum_,
                          var)
from mugraph.ir import OpType, Unsupported

X, Y, Z, W = (var(i) for i in range(4))


# -- scalar model ------------------------------------------------------------
# Every axiom holds when a variable is a positive real and sum(k, x) is k·x,
# so terms the e-graph merges must agree numerically under it.

def _silu(x: float) -> float:
    return x / (1.0 + math.exp(-x))


def scalar(e, env) -> float:
    if e.op == "var":
        return env[e.name]
    a = [scalar(x, env) for x in e.args]
    return {"add": lambda: a[0] + a[1], "mul": lambda: a[0] * a[1], "div": lambda: a[0] / a[1],
            "exp": lambda: math.exp(a[0]), "sqrt": lambda: math.sqrt(a[0]), "silu": lambda: _silu(a[0]),
            "sum": lambda: e.k * a[0]}[e.op]()


def close(a: float, b: float) -> bool:
    if not (math.isfinite(a) and math.isfinite(b)):
        return True
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)


def node_value(eg: EGraph, node, vals, env) -> float:
    op = node[0]
    if op == "var":
        return env[node[1]]
    a = [vals[eg.find(c)] for c in node[2:]]
    if op == "sum":
        return node[1] * a[0]
    return {"add": lambda: a[0] + a[1], "mul": lambda: a[0] * a[1], "div": lambda: a[0] / a[1],
            "exp": lambda: math.exp(min(a[0], 700.0)), "sqrt": lambda: math.sqrt(a[0]),
            "silu": lambda: _silu(a[0])}[op]()


def check_class_consistency(eg: EGraph, env) -> None:
    """Evaluate each class bottom-up from one node, then require every node to agree."""
    vals: dict[int, float] = {}
    changed = True
    while changed:
        changed = False
        for cid, nodes in eg.classes.items():
            if cid in vals:
                continue
            for n in sorted(nodes):
                if n[0] == "var" or all(eg.find(c) in vals for c in n[2:]):
                    vals[cid] = node_value(eg, n, vals, env)
                    changed = True
                    break
    for cid, nodes in eg.classes.items():
        for n in nodes:
            if n[0] == "var" or all(eg.find(c) in vals for c in n[2:]):
                assert close(node_value(eg, n, vals, env), vals[cid]), (cid, n)


# -- strategies ----------------------------------------------------------------

LEAVES = st.sampled_from([X, Y, Z])


def _extend(children):
    return st.one_of(
        st.builds(add, children, children),
        st.builds(mul, children, children),
        st.builds(div, children, children),
        st.builds(sqrt, children),
        st.builds(exp, children),
        st.builds(sum_, st.sampled_from([2, 3, 4, 8]), children),
    )


EXPRS = st.recursive(LEAVES, _extend, max_leaves=6)
ENVS = st.fixed_dictionaries({str(i): st.floats(0.5, 1.5) for i in range(4)})


# -- inference -----------------------------------------------------------------

def test_matmul_expression():
    assert infer_expr(OpType.MATMUL, {}, [X, Y], [(16, 1024), (1024, 32)]) == [sum_(1024, mul(X, Y))]


def test_data_movement_is_identity():
    for op in (OpType.IN_ITER, OpType.OUT_SAVER, OpType.REPEAT, OpType.RESHAPE):
        assert infer_expr(op, {}, [X], [(4, 4)]) == [X]


def test_concat_matmul_is_sum_of_matmuls():
    (e,) = infer_expr(OpType.CONCAT_MATMUL, {}, [W, X, Y, Z], [(8, 16), (8, 4), (16, 2), (4, 2)])
    assert e == add(sum_(16, mul(W, Y)), sum_(4, mul(X, Z)))


def test_elementwise_and_reductions():
    assert infer_expr(OpType.SUM, {"k": 4}, [X], [(8, 16)]) == [sum_(4, X)]
    assert infer_expr(OpType.SQR, {}, [X], [(4,)]) == [mul(X, X)]
    assert infer_expr(OpType.EW_DIV, {}, [X, Y], [(4,), (4,)]) == [div(X, Y)]
    assert infer_expr(OpType.SILU, {}, [X], [(4,)]) == [silu(X)]
    assert infer_expr(OpType.ACCUM, {"fmap": None, "loop": 4}, [X], [(4,)]) == [sum_(4, X)]
    assert infer_expr(OpType.ACCUM, {"fmap": 0, "loop": 4}, [X], [(4,)]) == [X]


def test_unknown_operator_rule():
    with pytest.raises(Unsupported):
        infer_expr(OpType.GRAPH_DEF, {}, [X], [(4,)])


def test_sum_extent_must_be_positive():
    with pytest.raises(ValueError):
        sum_(0, X)


# -- normalization -------------------------------------------------------------

def test_normalize_merges_nested_sums():
    assert normalize(sum_(4, sum_(8, X))) == sum_(32, X)
    assert normalize(sum_(1, X)) == X


def test_normalize_sorts_commutative_chains():
    assert normalize(add(Z, add(Y, X))) == normalize(add(add(X, Y), Z))
    assert normalize(mul(Y, X)) == normalize(mul(X, Y))
    assert normalize(div(Y, X)) != normalize(div(X, Y))


@given(EXPRS, ENVS)
def test_normalize_is_sound(e, env):
    assert close(scalar(e, env), scalar(normalize(e), env))


@given(EXPRS)
def test_normalize_idempotent_and_key_stable(e):
    n = normalize(e)
    assert normalize(n) == n
    assert expr_key(e) == expr_key(n)


# -- entailment ----------------------------------------------------------------

def test_variable_inside_reduction():
    assert is_subexpr(X, [sum_(64, mul(X, Y))])


def test_distributivity_entails_product_of_sums():
    assert is_subexpr(mul(add(X, Y), Z), [add(mul(X, Z), mul(Y, Z))])


def test_unrelated_product_not_entailed():
    assert not is_subexpr(mul(X, Y), [add(mul(X, Z), mul(Y, Z))])


def test_split_reduction_entailed():
    # a loop-partitioned reduction is a sub-expression of the full one
    assert is_subexpr(sum_(16, mul(X, Y)), [sum_(64, mul(X, Y))])
    assert not is_subexpr(sum_(3, mul(X, Y)), [sum_(64, mul(X, Y))])


def test_cache_hits_on_normalized_key():
    ent = Entailment([add(mul(X, Z), mul(Y, Z))])
    assert ent.check(mul(Z, X)) == Verdict.TRUE
    assert ent.check(mul(X, Z)) == Verdict.TRUE
    assert ent.stats.queries == 2 and ent.stats.cache_hits == 1


def test_budget_exhaustion_is_reported():
    target = sum_(64, mul(exp(add(X, Y)), div(add(X, Z), sqrt(mul(Y, Z)))))
    ent = Entailment([target], node_limit=20, iter_limit=8)
    assert not ent.complete
    assert ent.check(mul(W, W)) == Verdict.BUDGET
    assert ent.stats.budget_exhausted == 1


def test_equivalence_examples():
    assert equivalent(exp(add(X, Y)), mul(exp(X), exp(Y)))
    assert equivalent(sqrt(mul(X, Y)), mul(sqrt(X), sqrt(Y)))
    assert equivalent(sum_(32, X), sum_(4, sum_(8, X)))
    assert not equivalent(mul(X, Y), div(X, Y))


@pytest.mark.parametrize("name", ["rmsnorm", "lora", "gatedmlp", "qknorm", "attention"])
def test_fused_fixture_expression_matches_program(name):
    prog = getattr(fixtures, f"{name}_program")()
    fused = getattr(fixtures, f"{name}_fused")()
    ins = [var(i) for i in range(len(prog.inputs))]
    for a, b in zip(graph_expr(prog, ins), graph_expr(fused, ins)):
        assert equivalent(a, b)


@given(EXPRS, ENVS)
def test_egraph_classes_are_sound(e, env):
    eg = EGraph()
    eg.add_expr(e)
    eg.saturate(node_limit=600, iter_limit=3)
    check_class_consistency(eg, env)


@given(EXPRS, EXPRS, ENVS)
def test_equivalent_implies_equal_values(a, b, env):
    if equivalent(a, b, node_limit=600, iter_limit=3):
        assert close(scalar(a, env), scalar(b, env))


@given(EXPRS)
def test_term_entails_itself_and_its_subterms(e):
    ent = Entailment([e], node_limit=600, iter_limit=3)
    assert ent(e)
    for a in e.args:
        assert ent(a)


# -- dimension labels ----------------------------------------------------------

def test_rmsnorm_labels():
    info = analyze(fixtures.rmsnorm_program(4, 64, 64))
    x, g, w = info.inputs
    (out,) = info.outputs
    assert info.tracked
    # rows and output columns are parallel; the hidden dimension is reduced
    assert x[0] == out[0] and w[1] == out[1]
    assert x[1] == g[1] == w[0]
    assert x[1] in info.reduced and x[0] in info.parallel and w[1] in info.parallel
    assert g[0] is None


def test_random_scalar_model_distinguishes_non_axioms():
    rng = random.Random(0)
    env = {str(i): rng.uniform(0.5, 1.5) for i in range(4)}
    assert not close(scalar(mul(X, Y), env), scalar(add(X, Y), env))


def test_no_cancellation():
    assert not equivalent(div(mul(X, Y), Y), X)


AXIOMS = {"add-comm", "add-assoc", "mul-comm", "mul-assoc", "mul-add-distrib", "div-add", "mul-div", "div-div",
          "sum-add", "sum-mul", "sum-div", "sum-sum", "exp-add", "sqrt-mul", "congruence"}


@given(EXPRS)
def test_every_rewrite_is_a_named_axiom(e):
    eg = EGraph()
    eg.add_expr(e)
    eg.saturate(node_limit=600, iter_limit=3)
    assert set(eg.axiom_log) <= AXIOMS


def test_attention_expression():
    g = fixtures.attention_program(64, 64)
    a = sum_(64, mul(X, Y))
    expected = sum_(64, mul(div(exp(a), sum_(64, exp(a))), Z))
    assert graph_expr(g, [X, Y, Z]) == [expected]


def test_single_op_graph_matches_infer_expr():
    from mugraph.ir import KernelBuilder
    kb = KernelBuilder()
    a, b = kb.input((4, 8)), kb.input((8, 2))
    g = kb.build([kb.op(OpType.MATMUL, [a, b])])
    assert graph_expr(g, [X, Y]) == infer_expr(OpType.MATMUL, {}, [X, Y], [(4, 8), (8, 2)])


@st.composite
def random_programs(draw):
    """Small elementwise/matmul programs over three square inputs."""
    from mugraph.ir import KernelBuilder
    kb = KernelBuilder()
    ts = [kb.input((4, 4)) for _ in range(3)]
    for _ in range(draw(st.integers(1, 4))):
        op = draw(st.sampled_from([OpType.MATMUL, OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV, OpType.SQRT]))
        ins = [draw(st.sampled_from(ts)) for _ in range(op.arity)]
        ts.append(kb.op(op, ins))
    return kb.build([ts[-1]])


@given(random_programs())
def test_prefix_expressions_are_subexpressions(g):
    ins = [var(i) for i in range(len(g.inputs))]
    (target,) = graph_expr(g, ins)
    ent = Entailment([target], node_limit=2000, iter_limit=4)
    producers = g.producers()
    live, stack = set(), list(g.outputs)
    while stack:
        t = stack.pop()
        if t in producers and t not in live:
            live.add(t)
            stack.extend(producers[t].inputs)
    env = dict(zip(g.inputs, ins))
    for op in g.ops:
        (env[op.outputs[0]],) = infer_expr(op.type, op.attrs, [env[t] for t in op.inputs],
                                           [g.shape(t) for t in op.inputs])
        if op.outputs[0] in live:
            assert ent.check(env[op.outputs[0]]) != Verdict.FALSE
