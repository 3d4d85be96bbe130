"""Benchmark programs at desk-scale shapes, plus hand-built fused µGraphs.

There is no constant operator, so RMSNorm's 1/h mean factor is folded into
the gain: with ``G' = G * sqrt(h)`` the program below computes
``X G / RMS(X)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir import BlockBuilder, KernelBuilder, KernelGraph, OpType


def rmsnorm_program(b: int = 4, h: int = 64, d: int = 64) -> KernelGraph:
    """RMSNorm followed by a matmul: ``(X*G / sqrt(sum_h X²)) @ W``."""
    kb = KernelBuilder()
    x = kb.input((b, h), "X")
    g = kb.input((1, h), "G")
    w = kb.input((h, d), "W")
    sq = kb.op(OpType.SQR, [x])
    ss = kb.op(OpType.SUM, [sq], dim=1, k=h)
    rms = kb.op(OpType.SQRT, [ss])
    xg = kb.op(OpType.EW_MUL, [x, g])
    y = kb.op(OpType.EW_DIV, [xg, rms])
    z = kb.op(OpType.MATMUL, [y, w])
    return kb.build([z])


def rmsnorm_fused(b: int = 4, h: int = 64, d: int = 64, grid: int = 4, loop: int = 4) -> KernelGraph:
    """Single graph-defined kernel: the matmul and the sum of squares share one loop."""
    kb = KernelBuilder()
    X = kb.input((b, h), "X")
    G = kb.input((1, h), "G")
    W = kb.input((h, d), "W")
    bb = BlockBuilder(grid=(grid,), forloop=loop)
    x = bb.input((b, h), {"x": None}, {"i": 1})
    g = bb.input((1, h), {"x": None}, {"i": 1})
    w = bb.input((h, d), {"x": 1}, {"i": 0})
    xg = bb.op(OpType.EW_MUL, [x, g])
    mm = bb.op(OpType.MATMUL, [xg, w])
    acc_mm = bb.op(OpType.ACCUM, [mm], fmap=None)
    sq = bb.op(OpType.SQR, [x])
    ss = bb.op(OpType.SUM, [sq], dim=1, k=h // loop)
    acc_ss = bb.op(OpType.ACCUM, [ss], fmap=None)
    rms = bb.op(OpType.SQRT, [acc_ss])
    out = bb.op(OpType.EW_DIV, [acc_mm, rms])
    bb.output(out, {"x": 1})
    (z,) = kb.graph_def(bb, [X, G, W])
    return kb.build([z])


def rmsnorm_unfused_kernels(b: int = 4, h: int = 64, d: int = 64, grid: int = 4) -> KernelGraph:
    """Two graph-defined kernels: RMSNorm writes Y to device memory, then a matmul kernel."""
    kb = KernelBuilder()
    X = kb.input((b, h), "X")
    G = kb.input((1, h), "G")
    W = kb.input((h, d), "W")
    b1 = BlockBuilder(grid=(1,), forloop=1)
    x = b1.input((b, h), {"x": None}, {})
    g = b1.input((1, h), {"x": None}, {})
    ax = b1.op(OpType.ACCUM, [x], fmap=None)
    ag = b1.op(OpType.ACCUM, [g], fmap=None)
    ss = b1.op(OpType.SUM, [b1.op(OpType.SQR, [ax])], dim=1, k=h)
    y = b1.op(OpType.EW_DIV, [b1.op(OpType.EW_MUL, [ax, ag]), b1.op(OpType.SQRT, [ss])])
    b1.output(y, {"x": 0})
    (Y,) = kb.graph_def(b1, [X, G])
    b2 = BlockBuilder(grid=(grid,), forloop=1)
    yy = b2.input((b, h), {"x": None}, {})
    ww = b2.input((h, d), {"x": 1}, {})
    z = b2.op(OpType.ACCUM, [b2.op(OpType.MATMUL, [yy, ww])], fmap=None)
    b2.output(z, {"x": 1})
    (Z,) = kb.graph_def(b2, [Y, W])
    return kb.build([Z])


def lora_program(dout: int = 16, din: int = 32, r: int = 4, n: int = 8) -> KernelGraph:
    """``W@X + B@(A@X)``."""
    kb = KernelBuilder()
    w = kb.input((dout, din), "W")
    bm = kb.input((dout, r), "B")
    a = kb.input((r, din), "A")
    x = kb.input((din, n), "X")
    wx = kb.op(OpType.MATMUL, [w, x])
    ax = kb.op(OpType.MATMUL, [a, x])
    bax = kb.op(OpType.MATMUL, [bm, ax])
    return kb.build([kb.op(OpType.EW_ADD, [wx, bax])])


def lora_fused(dout: int = 16, din: int = 32, r: int = 4, n: int = 8, loop: int = 4) -> KernelGraph:
    """``(W ‖ B) @ (X ‖ A@X)`` with the din reduction split over the loop."""
    kb = KernelBuilder()
    W = kb.input((dout, din), "W")
    B = kb.input((dout, r), "B")
    A = kb.input((r, din), "A")
    X = kb.input((din, n), "X")
    bb = BlockBuilder(grid=(1,), forloop=loop)
    w = bb.input((dout, din), {"x": None}, {"i": 1})
    bm = bb.input((dout, r), {"x": None}, {})
    a = bb.input((r, din), {"x": None}, {"i": 1})
    x = bb.input((din, n), {"x": None}, {"i": 0})
    ax = bb.op(OpType.MATMUL, [a, x])
    cm = bb.op(OpType.CONCAT_MATMUL, [w, bm, x, ax])
    bb.output(bb.op(OpType.ACCUM, [cm], fmap=None), {"x": 0})
    (o,) = kb.graph_def(bb, [W, B, A, X])
    return kb.build([o])


def gatedmlp_program(b: int = 4, h: int = 32, f: int = 32) -> KernelGraph:
    """``silu(X@W1) * (X@W2)``."""
    kb = KernelBuilder()
    x = kb.input((b, h), "X")
    w1 = kb.input((h, f), "W1")
    w2 = kb.input((h, f), "W2")
    g = kb.op(OpType.SILU, [kb.op(OpType.MATMUL, [x, w1])])
    u = kb.op(OpType.MATMUL, [x, w2])
    return kb.build([kb.op(OpType.EW_MUL, [g, u])])


def gatedmlp_fused(b: int = 4, h: int = 32, f: int = 32, grid: int = 2, loop: int = 2) -> KernelGraph:
    kb = KernelBuilder()
    X = kb.input((b, h), "X")
    W1 = kb.input((h, f), "W1")
    W2 = kb.input((h, f), "W2")
    bb = BlockBuilder(grid=(grid,), forloop=loop)
    x = bb.input((b, h), {"x": None}, {"i": 1})
    w1 = bb.input((h, f), {"x": 1}, {"i": 0})
    w2 = bb.input((h, f), {"x": 1}, {"i": 0})
    a1 = bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [x, w1])], fmap=None)
    a2 = bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [x, w2])], fmap=None)
    out = bb.op(OpType.EW_MUL, [bb.op(OpType.SILU, [a1]), a2])
    bb.output(out, {"x": 1})
    (o,) = kb.graph_def(bb, [X, W1, W2])
    return kb.build([o])


def qknorm_program(s: int = 8, d: int = 16) -> KernelGraph:
    """Normalize Q rows and Kᵀ columns by their RMS, then ``Qn @ Ktn``.

    Gains absorb the 1/d mean factor as in the RMSNorm fixture.
    """
    kb = KernelBuilder()
    q = kb.input((s, d), "Q")
    gq = kb.input((1, d), "Gq")
    kt = kb.input((d, s), "Kt")
    gk = kb.input((d, 1), "Gk")
    rq = kb.op(OpType.SQRT, [kb.op(OpType.SUM, [kb.op(OpType.SQR, [q])], dim=1, k=d)])
    qn = kb.op(OpType.EW_DIV, [kb.op(OpType.EW_MUL, [q, gq]), rq])
    rk = kb.op(OpType.SQRT, [kb.op(OpType.SUM, [kb.op(OpType.SQR, [kt])], dim=0, k=d)])
    kn = kb.op(OpType.EW_DIV, [kb.op(OpType.EW_MUL, [kt, gk]), rk])
    return kb.build([kb.op(OpType.MATMUL, [qn, kn])])


def qknorm_fused(s: int = 8, d: int = 16) -> KernelGraph:
    """One block graph: row/column norms and the score matmul in a single kernel."""
    kb = KernelBuilder()
    Q = kb.input((s, d), "Q")
    Gq = kb.input((1, d), "Gq")
    Kt = kb.input((d, s), "Kt")
    Gk = kb.input((d, 1), "Gk")
    bb = BlockBuilder(grid=(1,), forloop=1)
    q = bb.input((s, d), {"x": None}, {})
    gq = bb.input((1, d), {"x": None}, {})
    kt = bb.input((d, s), {"x": None}, {})
    gk = bb.input((d, 1), {"x": None}, {})
    qn = bb.op(OpType.EW_DIV, [bb.op(OpType.EW_MUL, [q, gq]),
                               bb.op(OpType.SQRT, [bb.op(OpType.SUM, [bb.op(OpType.SQR, [q])], dim=1, k=d)])])
    kn = bb.op(OpType.EW_DIV, [bb.op(OpType.EW_MUL, [kt, gk]),
                               bb.op(OpType.SQRT, [bb.op(OpType.SUM, [bb.op(OpType.SQR, [kt])], dim=0, k=d)])])
    out = bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [qn, kn])], fmap=None)
    bb.output(out, {"x": 0})
    (o,) = kb.graph_def(bb, [Q, Gq, Kt, Gk])
    return kb.build([o])


def attention_program(s: int = 8, d: int = 8) -> KernelGraph:
    """``softmax(Q @ Kt) @ V`` without max-subtraction (one exponentiation per path)."""
    kb = KernelBuilder()
    q = kb.input((s, d), "Q")
    kt = kb.input((d, s), "Kt")
    v = kb.input((s, d), "V")
    e = kb.op(OpType.EW_EXP, [kb.op(OpType.MATMUL, [q, kt])])
    den = kb.op(OpType.SUM, [e], dim=1, k=s)
    p = kb.op(OpType.EW_DIV, [e, den])
    return kb.build([kb.op(OpType.MATMUL, [p, v])])


def attention_fused(s: int = 8, d: int = 8, loop: int = 2) -> KernelGraph:
    """Loop over key blocks, accumulating the numerator and the normalizer; divide once."""
    kb = KernelBuilder()
    Q = kb.input((s, d), "Q")
    Kt = kb.input((d, s), "Kt")
    V = kb.input((s, d), "V")
    bb = BlockBuilder(grid=(1,), forloop=loop)
    q = bb.input((s, d), {"x": None}, {})
    kt = bb.input((d, s), {"x": None}, {"i": 1})
    v = bb.input((s, d), {"x": None}, {"i": 0})
    e = bb.op(OpType.EW_EXP, [bb.op(OpType.MATMUL, [q, kt])])
    num = bb.op(OpType.ACCUM, [bb.op(OpType.MATMUL, [e, v])], fmap=None)
    den = bb.op(OpType.ACCUM, [bb.op(OpType.SUM, [e], dim=1, k=s // loop)], fmap=None)
    bb.output(bb.op(OpType.EW_DIV, [num, den]), {"x": 0})
    (o,) = kb.graph_def(bb, [Q, Kt, V])
    return kb.build([o])


@dataclass(frozen=True)
class Suite:
    name: str
    program: KernelGraph
    reference: KernelGraph  # a hand-built fused µGraph for the same function


def suites() -> dict[str, Suite]:
    return {
        "rmsnorm": Suite("rmsnorm", rmsnorm_program(), rmsnorm_fused()),
        "lora": Suite("lora", lora_program(), lora_fused()),
        "gatedmlp": Suite("gatedmlp", gatedmlp_program(), gatedmlp_fused()),
        "qknorm": Suite("qknorm", qknorm_program(), qknorm_fused()),
        "attention": Suite("attention", attention_program(), attention_fused()),
    }


def elementwise_chain_block(n: int = 8) -> KernelGraph:
    """A block graph whose post-loop part is the chain ``Mul -> Sqrt -> Div``."""
    kb = KernelBuilder()
    A = kb.input((n, n), "A")
    B = kb.input((n, n), "B")
    C = kb.input((n, 1), "C")
    bb = BlockBuilder(grid=(1,), forloop=1)
    a = bb.op(OpType.ACCUM, [bb.input((n, n), {"x": None}, {})], fmap=None)
    b = bb.op(OpType.ACCUM, [bb.input((n, n), {"x": None}, {})], fmap=None)
    c = bb.op(OpType.ACCUM, [bb.input((n, 1), {"x": None}, {})], fmap=None)
    out = bb.op(OpType.EW_DIV, [c, bb.op(OpType.SQRT, [bb.op(OpType.EW_MUL, [a, b])])])
    bb.output(out, {"x": 0})
    (o,) = kb.graph_def(bb, [A, B, C])
    return kb.build([o])
