from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mugraph import fixtures
from mugraph.generator import construct_thread_graphs
from mugraph.interp import eval_mugraph, eval_program, max_relative_error, random_inputs
from mugraph.ir import BlockBuilder, KernelBuilder, OpType, ShapeMismatch, Unsupported, from_json, to_json

rng = np.random.default_rng


def test_rmsnorm_formula():
    # the gain carries sqrt(h), so G' = sqrt(2)·[1, 1] gives the mean-based RMS
    g = fixtures.rmsnorm_program(1, 2, 2)
    (y,) = eval_program(g, [np.array([[3.0, 4.0]]), np.full((1, 2), math.sqrt(2)), np.eye(2)])
    r = math.sqrt((9 + 16) / 2)
    assert np.allclose(y, [[3 / r, 4 / r]], rtol=1e-14)


def test_add_zero_is_identity():
    kb = KernelBuilder()
    a, z = kb.input((3, 3), "A"), kb.input((3, 3), "Z")
    g = kb.build([kb.op(OpType.EW_ADD, [a, z])])
    x = rng(0).standard_normal((3, 3))
    (y,) = eval_program(g, [x, np.zeros((3, 3))])
    assert (y == x).all()


def test_concat_matmul_is_two_matmuls_plus_add():
    kb = KernelBuilder()
    w, x, y, z = kb.input((4, 6), "W"), kb.input((4, 3), "X"), kb.input((6, 5), "Y"), kb.input((3, 5), "Z")
    g = kb.build([kb.op(OpType.CONCAT_MATMUL, [w, x, y, z])])
    xs = random_inputs(g, rng(1))
    (out,) = eval_program(g, xs)
    expected = xs[0] @ xs[2] + xs[1] @ xs[3]
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_silu_and_sqr():
    kb = KernelBuilder()
    a = kb.input((2, 2), "A")
    g = kb.build([kb.op(OpType.SILU, [a]), kb.op(OpType.SQR, [a])])
    x = np.array([[0.0, 1.0], [-2.0, 3.0]])
    s, q = eval_program(g, [x])
    assert np.allclose(s, x / (1 + np.exp(-x)), rtol=1e-15)
    assert (q == x * x).all()


def test_sum_groups_consecutive_elements():
    kb = KernelBuilder()
    a = kb.input((2, 8), "A")
    g = kb.build([kb.op(OpType.SUM, [a], dim=1, k=4)])
    x = np.arange(16.0).reshape(2, 8)
    (y,) = eval_program(g, [x])
    # Sum(k) maps [.., n] to [.., n/k] by adding every k consecutive elements
    expected = np.array([[sum(x[i, j * 4:(j + 1) * 4]) for j in range(2)] for i in range(2)])
    assert (y == expected).all()


def test_shape_errors():
    g = fixtures.rmsnorm_program(1, 2, 2)
    with pytest.raises(ShapeMismatch):
        eval_program(g, [np.ones((1, 3)), np.ones((1, 2)), np.eye(2)])
    with pytest.raises(ShapeMismatch):
        eval_program(g, [np.ones((1, 2))])
    with pytest.raises(Unsupported):
        eval_program(fixtures.rmsnorm_fused(), random_inputs(fixtures.rmsnorm_program(), rng(0)))


def test_single_op_graph_def_equals_program():
    kb = KernelBuilder()
    A, B = kb.input((4, 8), "A"), kb.input((8, 4), "B")
    prog = kb.build([kb.op(OpType.MATMUL, [A, B])])
    kb = KernelBuilder()
    A, B = kb.input((4, 8), "A"), kb.input((8, 4), "B")
    bb = BlockBuilder(grid=(1,), forloop=1)
    a, b = bb.input((4, 8), {}, {}), bb.input((8, 4), {}, {})
    bb.output(bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [a, b])], fmap=None), {"x": 0})
    (out,) = kb.graph_def(bb, [A, B])
    wrapped = kb.build([out])
    xs = random_inputs(prog, rng(2))
    assert (eval_mugraph(wrapped, xs)[0] == eval_program(prog, xs)[0]).all()


def _replicated(grid: int):
    kb = KernelBuilder()
    X, W = kb.input((4, 6), "X"), kb.input((6, 8), "W")
    bb = BlockBuilder(grid=(grid,), forloop=1)
    x = bb.input((4, 6), {"x": None}, {})
    w = bb.input((6, 8), {"x": 1}, {})
    bb.output(bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [x, w])], fmap=None), {"x": 1})
    (out,) = kb.graph_def(bb, [X, W])
    return kb.build([out])


def test_replicated_input_grid_matches_single_block():
    xs = random_inputs(_replicated(1), rng(3))
    (one,) = eval_mugraph(_replicated(1), xs)
    (two,) = eval_mugraph(_replicated(2), xs)
    assert np.allclose(one, two, rtol=1e-14, atol=0)
    assert np.allclose(two, xs[0] @ xs[1], rtol=1e-12)


def _fused_pairs():
    return [(fixtures.rmsnorm_program(), fixtures.rmsnorm_fused()),
            (fixtures.rmsnorm_program(), fixtures.rmsnorm_unfused_kernels()),
            (fixtures.rmsnorm_program(16, 1024, 256), fixtures.rmsnorm_fused(16, 1024, 256, grid=8, loop=16)),
            (fixtures.lora_program(), fixtures.lora_fused()),
            (fixtures.gatedmlp_program(), fixtures.gatedmlp_fused()),
            (fixtures.qknorm_program(), fixtures.qknorm_fused()),
            (fixtures.attention_program(), fixtures.attention_fused())]


@pytest.mark.parametrize("k", range(7))
def test_fused_graphs_match_programs(k):
    prog, fused = _fused_pairs()[k]
    for seed in range(3):
        xs = random_inputs(prog, rng(seed))
        for a, b in zip(eval_mugraph(fused, xs), eval_program(prog, xs)):
            assert max_relative_error(a, b) <= 1e-10
        for a, b in zip(eval_mugraph(construct_thread_graphs(fused), xs), eval_program(prog, xs)):
            assert max_relative_error(a, b) <= 1e-10


def test_deterministic_and_json_stable():
    g = fixtures.attention_fused()
    xs = random_inputs(g, rng(4))
    a = eval_mugraph(g, xs)
    b = eval_mugraph(g, xs)
    c = eval_mugraph(from_json(to_json(g)), xs)
    assert all((u == v).all() and (u == w).all() for u, v, w in zip(a, b, c))


def test_float32_mode():
    g = fixtures.rmsnorm_fused()
    xs = random_inputs(g, rng(5))
    (lo,) = eval_mugraph(g, xs, np.float32)
    (hi,) = eval_mugraph(g, xs)
    assert lo.dtype == np.float32
    assert 0 < max_relative_error(lo.astype(np.float64), hi) < 1e-4


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_relative_error_properties(vals):
    b = np.array(vals)
    assert max_relative_error(b, b) == 0.0
    assert max_relative_error(b, np.append(b, 1.0)) == math.inf
    bad = b.copy()
    bad[0] = np.nan
    assert max_relative_error(bad, b) == math.inf
