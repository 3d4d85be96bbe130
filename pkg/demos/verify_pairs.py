"""Finite-field equivalence checks on a few hand-written graph pairs."""

from __future__ import annotations

from mugraph import fixtures
from mugraph.ir import KernelBuilder, OpType
from mugraph.verifier import VerifyConfig, random_test_equivalence


def matmul(swap: bool):
    kb = KernelBuilder()
    a, b = kb.input((8, 8), "A"), kb.input((8, 8), "B")
    return kb.build([kb.op(OpType.MATMUL, [b, a] if swap else [a, b])])


def exp_of_sum(expand: bool):
    kb = KernelBuilder()
    a, b = kb.input((4, 4), "A"), kb.input((4, 4), "B")
    if expand:
        out = kb.op(OpType.EW_MUL, [kb.op(OpType.EW_EXP, [a]), kb.op(OpType.EW_EXP, [b])])
    else:
        out = kb.op(OpType.EW_EXP, [kb.op(OpType.EW_ADD, [a, b])])
    return kb.build([out])


PAIRS = {
    "RMSNorm program vs fused kernel": (fixtures.rmsnorm_program(), fixtures.rmsnorm_fused()),
    "attention program vs fused kernel": (fixtures.attention_program(), fixtures.attention_fused()),
    "exp(a+b) vs exp(a)*exp(b)": (exp_of_sum(False), exp_of_sum(True)),
    "A@B vs B@A": (matmul(False), matmul(True)),
}


def main() -> None:
    cfg = VerifyConfig(num_tests=4, seed=1)
    for name, (g1, g2) in PAIRS.items():
        v = random_test_equivalence(g1, g2, cfg)
        print(f"{v.status:<15} {name}")


if __name__ == "__main__":
    main()
