"""One executor for kernel/block/thread graphs, parameterized by a value backend.

Block graphs are simulated literally: every grid coordinate is visited
(x fastest, then y, then z), each input is sliced by its imap, the loop body
runs ``forloop`` times on fmap slices, accumulators either sum (replica) or
concatenate (data dimension) across iterations, the post-loop ops run once on
the accumulated values, and each output tile is written to the slot selected
by its omap.
"""

from __future__ import annotations

import itertools
from typing import Protocol, Sequence

import numpy as np

from .ff import DivByZero, FFTensor, FieldContext, NonResidue, PoisonedExponent
from .ir import (GRID_AXES, LOOP_AXIS, BlockGraph, DimMap, Graph, OpType, ShapeMismatch,
                 Unsupported)


class Backend(Protocol):
    def shape(self, x) -> tuple[int, ...]: ...
    def take(self, x, dim: int, start: int, stop: int): ...
    def concat(self, xs: Sequence, dim: int): ...
    def zeros(self, shape): ...
    def put(self, dst, index, tile): ...
    def unary(self, op: OpType, x, attrs): ...
    def binary(self, op: OpType, a, b): ...
    def matmul(self, a, b): ...


def _grouped_sum(x: np.ndarray, dim: int, k: int) -> np.ndarray:
    s = x.shape
    return x.reshape(s[:dim] + (s[dim] // k, k) + s[dim + 1:]).sum(axis=dim + 1)


def _repeat(x: np.ndarray, target) -> np.ndarray:
    src = (1,) * (len(target) - x.ndim) + x.shape
    return np.tile(x.reshape(src), tuple(t // s for s, t in zip(src, target)))


class FloatBackend:
    def __init__(self, dtype=np.float64):
        self.dtype = dtype

    def shape(self, x):
        return x.shape

    def take(self, x, dim, start, stop):
        idx = [slice(None)] * x.ndim
        idx[dim] = slice(start, stop)
        return x[tuple(idx)]

    def concat(self, xs, dim):
        return np.concatenate(xs, axis=dim)

    def zeros(self, shape):
        return np.zeros(shape, dtype=self.dtype)

    def put(self, dst, index, tile):
        dst[index] = tile

    def unary(self, op, x, attrs):
        if op is OpType.EW_EXP:
            return np.exp(x)
        if op is OpType.SQR:
            return x * x
        if op is OpType.SQRT:
            return np.sqrt(x)
        if op is OpType.SILU:
            return x / (1.0 + np.exp(-x))
        if op is OpType.SUM:
            return _grouped_sum(x, attrs["dim"], attrs["k"])
        if op is OpType.REPEAT:
            return _repeat(x, tuple(attrs["shape"]))
        if op is OpType.RESHAPE:
            return x.reshape(tuple(attrs["shape"]))
        raise Unsupported(f"no float rule for {op.value}")

    def binary(self, op, a, b):
        if op is OpType.EW_ADD:
            return a + b
        if op is OpType.EW_MUL:
            return a * b
        if op is OpType.EW_DIV:
            return a / b
        raise Unsupported(f"no float rule for {op.value}")

    def matmul(self, a, b):
        return np.matmul(a, b)

    def accumulate(self, acc, x):
        return x.copy() if acc is None else acc + x


class FieldBackend:
    """Element-wise Table-style field semantics over FFTensor values."""

    def __init__(self, ctx: FieldContext):
        self.ctx = ctx
        self.p = ctx.fp.p
        self.q = ctx.fp.q
        self.tables = ctx.fp.tables

    def shape(self, x):
        return x.shape

    def take(self, x, dim, start, stop):
        idx = [slice(None)] * x.xp.ndim
        idx[dim] = slice(start, stop)
        idx = tuple(idx)
        return FFTensor(x.xp[idx], x.xq[idx], x.q_valid)

    def concat(self, xs, dim):
        return FFTensor(np.concatenate([x.xp for x in xs], axis=dim),
                        np.concatenate([x.xq for x in xs], axis=dim),
                        all(x.q_valid for x in xs))

    def zeros(self, shape):
        return FFTensor(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64), True)

    def put(self, dst, index, tile):
        dst.xp[index] = tile.xp
        dst.xq[index] = tile.xq
        if not tile.q_valid:
            object.__setattr__(dst, "q_valid", False)

    def _mk(self, xp, xq, valid):
        return FFTensor(np.mod(xp, self.p), np.mod(xq, self.q), valid)

    def unary(self, op, x, attrs):
        if op is OpType.EW_EXP:
            if not x.q_valid:
                raise PoisonedExponent("exponent depends on the result of another exponentiation")
            powers = np.array([pow(self.ctx.omega, e, self.p) for e in range(self.q)], dtype=np.int64)
            return FFTensor(powers[x.xq], np.zeros_like(x.xq), False)
        if op is OpType.SQR:
            return self._mk(x.xp * x.xp, x.xq * x.xq, x.q_valid)
        if op is OpType.SQRT:
            return self._sqrt(x)
        if op is OpType.SILU:
            t = self.ctx.silu_table()
            qi = x.xq if x.q_valid else np.zeros_like(x.xq)
            return FFTensor(t.tp[x.xp, qi], t.tq[x.xp, qi], x.q_valid)
        if op is OpType.SUM:
            d, k = attrs["dim"], attrs["k"]
            return self._mk(_grouped_sum(x.xp, d, k), _grouped_sum(x.xq, d, k), x.q_valid)
        if op is OpType.REPEAT:
            s = tuple(attrs["shape"])
            return FFTensor(_repeat(x.xp, s), _repeat(x.xq, s), x.q_valid)
        if op is OpType.RESHAPE:
            s = tuple(attrs["shape"])
            return FFTensor(x.xp.reshape(s), x.xq.reshape(s), x.q_valid)
        raise Unsupported(f"no field rule for {op.value}")

    def _sqrt(self, x):
        t = self.tables
        rp = self._root(t.sqrt_p, t.nonres_p, x.xp, self.p, "p")
        if not x.q_valid:
            return FFTensor(rp, np.zeros_like(x.xq), False)
        rq = self._root(t.sqrt_q, t.nonres_q, x.xq, self.q, "q")
        return FFTensor(rp, rq, True)

    def _root(self, table, nonres, v, m, name):
        r = table[v]
        bad = r < 0
        if bad.any():
            if self.ctx.sqrt_policy == "resample":
                raise NonResidue(name, int(v[bad].flat[0]))
            # fixed extension: a non-residue v maps to the root of nonres * v
            r = np.where(bad, table[(v * nonres) % m], r)
        return r

    def binary(self, op, a, b):
        valid = a.q_valid and b.q_valid
        if op is OpType.EW_ADD:
            return self._mk(a.xp + b.xp, a.xq + b.xq, valid)
        if op is OpType.EW_MUL:
            return self._mk(a.xp * b.xp, a.xq * b.xq, valid)
        if op is OpType.EW_DIV:
            if (b.xp == 0).any():
                raise DivByZero("p")
            if b.q_valid and (b.xq == 0).any():
                raise DivByZero("q")
            inv_q = self.tables.inv_q[b.xq] if b.q_valid else np.zeros_like(b.xq)
            return self._mk(a.xp * self.tables.inv_p[b.xp], a.xq * inv_q, valid)
        raise Unsupported(f"no field rule for {op.value}")

    def matmul(self, a, b):
        return self._mk(np.matmul(a.xp, b.xp) % self.p, np.matmul(a.xq, b.xq) % self.q,
                        a.q_valid and b.q_valid)

    def accumulate(self, acc, x):
        if acc is None:
            return FFTensor(x.xp.copy(), x.xq.copy(), x.q_valid)
        return self._mk(acc.xp + x.xp, acc.xq + x.xq, acc.q_valid and x.q_valid)


# ---------------------------------------------------------------------------


def apply_op(be, op_type: OpType, attrs, args):
    if op_type in (OpType.EW_ADD, OpType.EW_MUL, OpType.EW_DIV):
        return be.binary(op_type, args[0], args[1])
    if op_type is OpType.MATMUL:
        return be.matmul(args[0], args[1])
    if op_type is OpType.CONCAT_MATMUL:
        w, x, y, z = args
        return be.binary(OpType.EW_ADD, be.matmul(w, y), be.matmul(x, z))
    return be.unary(op_type, args[0], attrs)


def run_graph(g: Graph, inputs: Sequence, be) -> list:
    """Evaluate a kernel or thread graph (no loop structure) on backend values."""
    if len(inputs) != len(g.inputs):
        raise ShapeMismatch(f"expected {len(g.inputs)} inputs, got {len(inputs)}")
    env = {}
    for t, v in zip(g.inputs, inputs):
        if tuple(be.shape(v)) != g.shape(t):
            raise ShapeMismatch(f"input {t} has shape {tuple(be.shape(v))}, expected {g.shape(t)}")
        env[t] = v
    for op in g.ops:
        args = [env[t] for t in op.inputs]
        if op.type is OpType.GRAPH_DEF:
            outs = run_block_graph(op.graph, args, be)
        elif op.type is OpType.THREAD_GRAPH:
            outs = run_graph(op.graph, args, be)
        else:
            outs = [apply_op(be, op.type, op.attrs, args)]
        env.update(zip(op.outputs, outs))
    return [env[t] for t in g.outputs]


def _slices(shape, dmap: DimMap, coords: dict[str, int], extents: dict[str, int]):
    out = []
    for axis, d in dmap.items():
        if d is None or extents.get(axis, 1) == 1:
            continue
        size = shape[d] // extents[axis]
        out.append((d, coords[axis] * size, (coords[axis] + 1) * size))
    return out


def run_block_graph(bg: BlockGraph, inputs: Sequence, be) -> list:
    grid = bg.grid_extents()
    loop_ops = bg.loop_phase()
    outputs = [be.zeros(bg.shape(t)) for t in bg.outputs]
    out_pos = {t: i for i, t in enumerate(bg.outputs)}
    in_pos = {t: i for i, t in enumerate(bg.inputs)}
    ranges = [range(grid.get(a, 1)) for a in GRID_AXES[:len(bg.grid)]]
    for coord in itertools.product(*reversed(ranges)):
        coords = dict(zip(reversed(GRID_AXES[:len(bg.grid)]), coord))
        tiles = []
        for pos, v in enumerate(inputs):
            for d, a, b in _slices(be.shape(v), bg.imaps[pos], coords, grid):
                v = be.take(v, d, a, b)
            tiles.append(v)
        env: dict[int, object] = {}
        acc: dict[int, list | object] = {}
        for it in range(bg.forloop):
            for op in bg.ops:
                if op.id not in loop_ops:
                    continue
                if op.type is OpType.IN_ITER:
                    pos = in_pos[op.inputs[0]]
                    v = tiles[pos]
                    for d, a, b in _slices(be.shape(v), bg.fmaps[pos], {LOOP_AXIS: it},
                                           {LOOP_AXIS: bg.forloop}):
                        v = be.take(v, d, a, b)
                    env[op.outputs[0]] = v
                elif op.type is OpType.ACCUM:
                    x = env[op.inputs[0]]
                    if op.attrs.get("fmap") is None:
                        acc[op.id] = be.accumulate(acc.get(op.id), x)
                    else:
                        acc.setdefault(op.id, []).append(x)
                else:
                    _exec(op, env, be)
        for op in bg.ops:
            if op.type is OpType.ACCUM:
                v = acc[op.id]
                env[op.outputs[0]] = be.concat(v, op.attrs["fmap"]) if isinstance(v, list) else v
            elif op.id in loop_ops:
                continue
            elif op.type is OpType.OUT_SAVER:
                pos = out_pos[op.outputs[0]]
                tile = env[op.inputs[0]]
                index = [slice(None)] * len(bg.shape(op.outputs[0]))
                for axis, d in bg.omaps[pos].items():
                    size = be.shape(tile)[d]
                    index[d] = slice(coords.get(axis, 0) * size, (coords.get(axis, 0) + 1) * size)
                be.put(outputs[pos], tuple(index), tile)
            else:
                _exec(op, env, be)
    return outputs


def _exec(op, env, be) -> None:
    args = [env[t] for t in op.inputs]
    if op.type is OpType.THREAD_GRAPH:
        outs = run_graph(op.graph, args, be)
    else:
        outs = [apply_op(be, op.type, op.attrs, args)]
    env.update(zip(op.outputs, outs))
