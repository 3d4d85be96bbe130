"""Reference floating-point interpreter for flat programs and full µGraphs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .ir import Graph, OpType, Unsupported
from .semantics import FloatBackend, run_graph


def _prepare(g: Graph, inputs: Sequence, dtype) -> list[np.ndarray]:
    return [np.asarray(x, dtype=dtype) for x in inputs]


def eval_program(g: Graph, inputs: Sequence, dtype=np.float64) -> list[np.ndarray]:
    """Forward evaluation of a flat graph of pre-defined kernel operators."""
    for op in g.ops:
        if op.type is OpType.GRAPH_DEF:
            raise Unsupported("eval_program takes a flat program; use eval_mugraph")
    return run_graph(g, _prepare(g, inputs, dtype), FloatBackend(dtype))


def eval_mugraph(g: Graph, inputs: Sequence, dtype=np.float64) -> list[np.ndarray]:
    """Evaluate a kernel graph, simulating every block of every graph-defined operator."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return run_graph(g, _prepare(g, inputs, dtype), FloatBackend(dtype))


def random_inputs(g: Graph, rng: np.random.Generator, scale: float = 1.0) -> list[np.ndarray]:
    return [rng.standard_normal(g.shape(t)) * scale for t in g.inputs]


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max|b|, inf if shapes differ or either side holds NaN/Inf.

    Normalizing by the largest reference magnitude keeps elements that are
    near zero by cancellation from dominating the figure.
    """
    if a.shape != b.shape or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return float("inf")
    if not a.size:
        return 0.0
    scale = float(np.max(np.abs(b)))
    diff = float(np.max(np.abs(a - b)))
    return diff / scale if scale > 0 else diff
