"""Probabilistic equivalence checking by random evaluation over Z_p × Z_q."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ff import (DEFAULT_FIELD, DivByZero, FFTensor, FieldContext, FieldParams, NonResidue,
                 sample_inputs, sample_omega)
from .interp import eval_mugraph, max_relative_error
from .ir import Graph, ShapeMismatch
from .semantics import FieldBackend, run_graph

EQUIVALENT = "equivalent"
NOT_EQUIVALENT = "not-equivalent"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class VerifyConfig:
    num_tests: int = 1
    seed: int = 0
    max_resamples: int = 16
    float_tolerance: float = 1e-3
    field: FieldParams = DEFAULT_FIELD
    sqrt_policy: str = "extend"

    def __post_init__(self) -> None:
        if self.num_tests < 1:
            raise ValueError("num_tests must be at least 1")


@dataclass
class Verdict:
    status: str
    witness: dict | None = None
    tests: int = 0
    resamples: int = 0

    @property
    def equivalent(self) -> bool:
        return self.status == EQUIVALENT

    def to_json(self) -> dict:
        return {"verdict": self.status, "witness": self.witness, "tests": self.tests,
                "resamples": self.resamples}


def ff_eval(g: Graph, inputs: Sequence[FFTensor], ctx: FieldContext) -> list[FFTensor]:
    """Evaluate ``g`` over the field; block structure is simulated exactly."""
    return run_graph(g, list(inputs), FieldBackend(ctx))


def _check_signature(g1: Graph, g2: Graph) -> None:
    s1 = [g1.shape(t) for t in g1.inputs]
    s2 = [g2.shape(t) for t in g2.inputs]
    if s1 != s2:
        raise ShapeMismatch(f"input shapes differ: {s1} vs {s2}")
    o1 = [g1.shape(t) for t in g1.outputs]
    o2 = [g2.shape(t) for t in g2.outputs]
    if o1 != o2:
        raise ShapeMismatch(f"output shapes differ: {o1} vs {o2}")


def random_test_equivalence(g1: Graph, g2: Graph, cfg: VerifyConfig = VerifyConfig()) -> Verdict:
    """Compare ``g1`` and ``g2`` on ``cfg.num_tests`` random field points.

    Round ``r`` draws from its own stream ``(seed, r)``; a draw that hits an
    undefined operation (zero divisor, or a non-residue under the resample
    policy) is replaced by a fresh draw from the same stream.
    """
    _check_signature(g1, g2)
    shapes = [g1.shape(t) for t in g1.inputs]
    fp = cfg.field
    resamples = 0
    for r in range(cfg.num_tests):
        rng = np.random.default_rng([cfg.seed, r])
        for _ in range(cfg.max_resamples + 1):
            inputs = sample_inputs(shapes, rng, fp)
            omega = sample_omega(rng, fp)
            ctx = FieldContext(fp, omega, None, cfg.sqrt_policy,
                               np.random.default_rng(int(rng.integers(2 ** 63))))
            try:
                out1 = ff_eval(g1, inputs, ctx)
                out2 = ff_eval(g2, inputs, ctx)
            except (DivByZero, NonResidue):
                resamples += 1
                continue
            break
        else:
            return Verdict(INCONCLUSIVE, {"seed": cfg.seed, "round": r,
                                          "reason": "undefined operation on every draw"},
                           r, resamples)
        for i, (a, b) in enumerate(zip(out1, out2)):
            same = a.same(b)
            if not same.all():
                idx = tuple(int(v) for v in np.argwhere(~same)[0])
                return Verdict(NOT_EQUIVALENT, {"seed": cfg.seed, "round": r, "omega": omega,
                                                "output": i, "index": list(idx),
                                                "lhs": [int(a.xp[idx]), int(a.xq[idx]) if a.q_valid else None],
                                                "rhs": [int(b.xp[idx]), int(b.xq[idx]) if b.q_valid else None]},
                               r + 1, resamples)
    return Verdict(EQUIVALENT, None, cfg.num_tests, resamples)


def float_stability_filter(g: Graph, program: Graph, trials: int = 2, tol: float = 1e-3,
                           seed: int = 0, scale: float = 1.0, dtype=np.float64) -> bool:
    """True iff ``g`` tracks ``program`` on random normal inputs without NaN/Inf."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        xs = [rng.standard_normal(program.shape(t)) * scale for t in program.inputs]
        ref = eval_mugraph(program, xs, np.float64)
        got = eval_mugraph(g, xs, dtype)
        for a, b in zip(got, ref):
            if max_relative_error(np.asarray(a, dtype=np.float64), b) > tol:
                return False
    return True


def rounds_for_confidence(delta: float, k: int = 1, q: int = 113) -> int:
    """Order of magnitude of tests for false-accept probability ``delta``: (k²/ln q)·ln(1/δ)."""
    return max(1, math.ceil(k * k / math.log(q) * math.log(1.0 / delta)))
