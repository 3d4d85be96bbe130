from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mugraph import fixtures
from mugraph.ff import (DEFAULT_FIELD, FFTensor, FFValue, FieldContext, ff_add, ff_div, ff_exp, ff_mul, ff_sqrt,
                        sample_inputs)
from mugraph.interp import eval_program
from mugraph.ir import KernelBuilder, OpType, ShapeMismatch
from mugraph.verifier import (EQUIVALENT, INCONCLUSIVE, NOT_EQUIVALENT, VerifyConfig, ff_eval,
                              float_stability_filter, random_test_equivalence, rounds_for_confidence)

P, Q = DEFAULT_FIELD.p, DEFAULT_FIELD.q


def binary(op, a_shape, b_shape, swap=False):
    kb = KernelBuilder()
    a, b = kb.input(a_shape, "A"), kb.input(b_shape, "B")
    return kb.build([kb.op(op, [b, a] if swap else [a, b])])


def matmul_chain(left: bool):
    kb = KernelBuilder()
    a, b, c = (kb.input((3, 3), n) for n in "ABC")
    if left:
        out = kb.op(OpType.MATMUL, [kb.op(OpType.MATMUL, [a, b]), c])
    else:
        out = kb.op(OpType.MATMUL, [a, kb.op(OpType.MATMUL, [b, c])])
    return kb.build([out])


def ctx(omega=1):
    return FieldContext(DEFAULT_FIELD, omega)


# -- verdicts ------------------------------------------------------------------


def test_commuted_add_is_equivalent():
    g1 = binary(OpType.EW_ADD, (4, 4), (4, 4))
    g2 = binary(OpType.EW_ADD, (4, 4), (4, 4), swap=True)
    for seed in range(20):
        assert random_test_equivalence(g1, g2, VerifyConfig(4, seed)).status == EQUIVALENT


def test_transposed_matmul_is_rejected_with_witness():
    g1 = binary(OpType.MATMUL, (4, 4), (4, 4))
    g2 = binary(OpType.MATMUL, (4, 4), (4, 4), swap=True)
    v = random_test_equivalence(g1, g2, VerifyConfig(4, 0))
    assert v.status == NOT_EQUIVALENT
    assert set(v.witness) >= {"seed", "omega", "index", "round"}
    assert v.to_json()["verdict"] == NOT_EQUIVALENT


def test_identical_graphs_always_pass():
    g = fixtures.attention_program()
    for seed in range(10):
        assert random_test_equivalence(g, g, VerifyConfig(2, seed)).equivalent


def test_shape_mismatch_before_sampling():
    with pytest.raises(ShapeMismatch):
        random_test_equivalence(binary(OpType.EW_ADD, (2, 2), (2, 2)), binary(OpType.EW_ADD, (3, 3), (3, 3)))


def test_inconclusive_when_every_draw_divides_by_zero():
    # 256 divisor entries: some entry is zero in one of the fields on ~97% of draws
    g = binary(OpType.EW_DIV, (16, 16), (16, 16))
    v = random_test_equivalence(g, g, VerifyConfig(1, 0, max_resamples=2))
    assert v.status == INCONCLUSIVE and v.resamples == 3


@pytest.mark.parametrize("name", ["rmsnorm", "lora", "gatedmlp", "qknorm", "attention"])
def test_fused_fixtures_match_programs(name):
    prog = getattr(fixtures, f"{name}_program")()
    fused = getattr(fixtures, f"{name}_fused")()
    assert random_test_equivalence(fused, prog, VerifyConfig(4, 1)).status == EQUIVALENT


def test_rounds_for_confidence():
    assert rounds_for_confidence(1e-6) == math.ceil(math.log(1e6) / math.log(113))
    assert rounds_for_confidence(1e-6, k=2) > rounds_for_confidence(1e-6, k=1)


# -- field evaluation ------------------------------------------------------------


def test_identity_graph_returns_inputs():
    kb = KernelBuilder()
    a = kb.input((2, 3), "A")
    g = kb.build([a])
    x = sample_inputs([(2, 3)], np.random.default_rng(0))[0]
    (y,) = ff_eval(g, [x], ctx())
    assert (y.xp == x.xp).all() and (y.xq == x.xq).all()


def test_matmul_associativity_by_modular_arithmetic():
    rng = np.random.default_rng(3)
    xs = sample_inputs([(3, 3)] * 3, rng)
    (l,) = ff_eval(matmul_chain(True), xs, ctx())
    (r,) = ff_eval(matmul_chain(False), xs, ctx())
    a, b, c = (x.xp.astype(object) for x in xs)
    direct = np.vectorize(lambda v: v % P)(a.dot(b).dot(c))
    assert (l.xp == direct.astype(np.int64)).all() and (r.xp == l.xp).all() and (r.xq == l.xq).all()


def test_fused_rmsnorm_field_outputs_identical():
    rng = np.random.default_rng(5)
    prog, fused = fixtures.rmsnorm_program(), fixtures.rmsnorm_fused()
    xs = sample_inputs([prog.shape(t) for t in prog.inputs], rng)
    c = ctx(pow(4, 7, P))
    (a,), (b,) = ff_eval(prog, xs, c), ff_eval(fused, xs, c)
    assert (a.xp == b.xp).all() and (a.xq == b.xq).all()


SCALAR_OPS = [
    (OpType.EW_ADD, lambda a, b: ff_add(a, b)),
    (OpType.EW_MUL, lambda a, b: ff_mul(a, b)),
    (OpType.EW_DIV, lambda a, b: ff_div(a, b)),
]


@given(st.sampled_from(SCALAR_OPS), st.integers(1, P - 1), st.integers(1, Q - 1), st.integers(1, P - 1),
       st.integers(1, Q - 1))
def test_binary_ops_are_scalar_homomorphic(case, ap, aq, bp, bq):
    op, scalar = case
    g = binary(op, (1, 1), (1, 1))
    x = [FFTensor(np.array([[ap]]), np.array([[aq]])), FFTensor(np.array([[bp]]), np.array([[bq]]))]
    (y,) = ff_eval(g, x, ctx())
    assert y.value((0, 0)) == scalar(FFValue(ap, aq), FFValue(bp, bq))


@given(st.integers(0, P - 1), st.integers(0, Q - 1), st.integers(0, Q - 1))
def test_exp_is_scalar_homomorphic(ap, aq, k):
    kb = KernelBuilder()
    a = kb.input((1, 1), "A")
    g = kb.build([kb.op(OpType.EW_EXP, [a])])
    omega = pow(4, k, P)
    (y,) = ff_eval(g, [FFTensor(np.array([[ap]]), np.array([[aq]]))], ctx(omega))
    assert int(y.xp[0, 0]) == ff_exp(FFValue(ap, aq), omega).xp
    assert not y.q_valid


def test_sqrt_of_residue_is_scalar_homomorphic():
    kb = KernelBuilder()
    a = kb.input((1, 1), "A")
    g = kb.build([kb.op(OpType.SQRT, [a])])
    for r in range(0, 30):
        v = FFValue(r * r % P, r * r % Q)
        (y,) = ff_eval(g, [FFTensor(np.array([[v.xp]]), np.array([[v.xq]]))], ctx())
        assert y.value((0, 0)) == ff_sqrt(v)


@pytest.mark.parametrize("name", ["rmsnorm", "lora", "gatedmlp"])
def test_exp_free_results_do_not_depend_on_omega(name):
    prog = getattr(fixtures, f"{name}_program")()
    xs = sample_inputs([prog.shape(t) for t in prog.inputs], np.random.default_rng(2))
    c1, c2 = ctx(pow(4, 3, P)), ctx(pow(4, 90, P))
    c2.silu = c1.silu_table()
    for a, b in zip(ff_eval(prog, xs, c1), ff_eval(prog, xs, c2)):
        assert (a.xp == b.xp).all() and (a.xq == b.xq).all()


def test_exp_results_depend_on_omega():
    prog = fixtures.attention_program()
    xs = sample_inputs([prog.shape(t) for t in prog.inputs], np.random.default_rng(2))
    (a,), (b,) = ff_eval(prog, xs, ctx(pow(4, 3, P))), ff_eval(prog, xs, ctx(pow(4, 90, P)))
    assert not (a.xp == b.xp).all()


# -- stability filter -------------------------------------------------------------


def test_program_passes_its_own_filter():
    p = fixtures.rmsnorm_program()
    assert float_stability_filter(p, p, trials=3, tol=0.0)


def test_overflowing_exp_is_filtered():
    kb = KernelBuilder()
    a, b = kb.input((4, 64), "A"), kb.input((64, 4), "B")
    g = kb.build([kb.op(OpType.EW_EXP, [kb.op(OpType.MATMUL, [a, b])])])
    assert not float_stability_filter(g, g, trials=1, scale=100.0)


def test_reassociated_sum_passes():
    kb = KernelBuilder()
    x = kb.input((1, 4096), "X")
    flat = kb.build([kb.op(OpType.SUM, [x], dim=1, k=4096)])
    kb = KernelBuilder()
    x = kb.input((1, 4096), "X")
    partial = kb.op(OpType.SUM, [x], dim=1, k=64)
    two = kb.build([kb.op(OpType.SUM, [partial], dim=1, k=64)])
    assert float_stability_filter(two, flat, trials=3)
    xs = [np.random.default_rng(9).standard_normal((1, 4096))]
    exact = math.fsum(xs[0].ravel())
    (got,) = eval_program(two, xs)
    assert abs(got[0, 0] - exact) <= 1e-9 * max(1.0, abs(exact))


def test_wrong_candidate_fails_filter():
    g1 = binary(OpType.MATMUL, (4, 4), (4, 4))
    g2 = binary(OpType.MATMUL, (4, 4), (4, 4), swap=True)
    assert not float_stability_filter(g2, g1)
