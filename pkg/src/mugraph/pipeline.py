"""End-to-end flow: generate, verify, filter, optimize; plus bench and describe."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import fixtures
from .generator import Candidate, SearchConfig, generate
from .ir import (BlockGraph, Graph, KernelGraph, MuGraphError, Op, OpType, Scope, Tensor, ThreadGraph,
                 canonical_key, from_json, lax_violations, to_json)
from .optimizer import CostWeights, DoesNotFit, Infeasible, Plan, optimize_candidate
from .verifier import VerifyConfig, float_stability_filter, random_test_equivalence


class ParseError(MuGraphError):
    pass


class NotLax(MuGraphError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("program is outside the Lax fragment: " + "; ".join(problems))
        self.problems = list(problems)


class UnknownSuite(MuGraphError):
    pass


def load_graph(src: str | Path | Mapping) -> Graph:
    """A graph from a JSON file path, a JSON string, or parsed JSON."""
    try:
        if isinstance(src, Mapping):
            obj = src
        else:
            text = str(src)
            if not text.lstrip().startswith("{"):
                text = Path(text).read_text()
            obj = json.loads(text)
        return from_json(obj)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ParseError(f"cannot read graph: {e}") from e


@dataclass(frozen=True)
class PipelineConfig:
    search: SearchConfig = SearchConfig()
    weights: CostWeights = CostWeights()
    num_tests: int = 1  # random tests per candidate while screening
    verify_rounds: int = 8  # tests on a fresh seed before a winner is accepted
    seed: int = 0
    stability_trials: int = 2
    stability_tol: float = 1e-3
    split_lax: bool = True
    verify_all: bool = False  # verify every candidate instead of stopping at the cheapest passing one

    def verify_config(self, seed: int | None = None) -> VerifyConfig:
        return VerifyConfig(num_tests=self.num_tests, seed=self.seed if seed is None else seed)


@dataclass
class PipelineReport:
    generated: int = 0
    verified: int = 0
    stable: int = 0
    examined: int = 0
    best_key: str = ""
    best_cost: float = 0.0
    trivial_cost: float = 0.0
    cost: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    segments: int = 1
    final_rejections: int = 0

    def to_json(self) -> dict:
        return {"counts": {"generated": self.generated, "examined": self.examined,
                           "verified": self.verified, "stable": self.stable,
                           "finalRejections": self.final_rejections},
                "best": {"key": self.best_key, "cost": self.best_cost, "trivialCost": self.trivial_cost},
                "cost": self.cost, "plan": self.plan, "search": self.search, "timings": self.timings,
                "segments": self.segments}


@dataclass
class OptimizeResult:
    graph: KernelGraph
    plan: Plan
    report: PipelineReport
    candidates: list[Candidate]
    verified: list[Candidate]


def _plan_or_none(g: KernelGraph, cfg: PipelineConfig) -> Plan | None:
    try:
        return optimize_candidate(g, cfg.weights, cfg.search.smem_limit)
    except (DoesNotFit, Infeasible):
        return None


def optimize_lax(program: KernelGraph, cfg: PipelineConfig = PipelineConfig()) -> OptimizeResult:
    """Best verified µGraph for a Lax program.

    Candidates are costed first and then verified cheapest first, so only
    the ones that can still win are tested (unless ``verify_all``).
    """
    rep = PipelineReport()
    t0 = time.perf_counter()
    gen = generate(program, cfg.search)
    t1 = time.perf_counter()
    rep.generated = len(gen.candidates)
    rep.search = gen.stats.to_json()
    scored = []
    for c in gen.candidates:
        plan = _plan_or_none(c.graph, cfg)
        if plan is not None:
            scored.append((plan.cost.total, len(c.graph.ops), c.key, c, plan))
    scored.sort(key=lambda s: (round(s[0], 9), s[1], s[2]))
    t2 = time.perf_counter()
    verified: list[Candidate] = []
    best = None
    vcfg = cfg.verify_config()
    for _, _, _, c, plan in scored:
        rep.examined += 1
        if c.trivial:
            ok = True
        else:
            ok = random_test_equivalence(c.graph, program, vcfg).equivalent
        if not ok:
            continue
        rep.verified += 1
        if not c.trivial and not float_stability_filter(c.graph, program, cfg.stability_trials,
                                                        cfg.stability_tol, cfg.seed):
            continue
        rep.stable += 1
        verified.append(c)
        if best is None and not c.trivial:
            final = random_test_equivalence(c.graph, program, VerifyConfig(cfg.verify_rounds, cfg.seed + 1))
            if not final.equivalent:
                rep.final_rejections += 1
                continue
        if best is None:
            best = (c, plan)
            if not cfg.verify_all:
                break
    t3 = time.perf_counter()
    if best is None:
        # the trivial µGraph is the program itself; fall back to it unconditionally
        c = next(c for c in gen.candidates if c.trivial)
        best = (c, optimize_candidate(c.graph, cfg.weights, cfg.search.smem_limit))
    c, plan = best
    trivial = next(s for s in scored if s[3].trivial) if any(s[3].trivial for s in scored) else None
    rep.best_key = c.key
    rep.best_cost = plan.cost.total
    rep.trivial_cost = trivial[0] if trivial else plan.cost.total
    rep.cost = plan.cost.to_json()
    rep.plan = plan.to_json()
    rep.timings = {"generate": t1 - t0, "optimize": t2 - t1, "verify": t3 - t2, "total": t3 - t0}
    return OptimizeResult(plan.graph, plan, rep, gen.candidates, verified)


# ---------------------------------------------------------------------------
# Lax splitting


def split_lax(program: KernelGraph) -> list[tuple[KernelGraph, list[int], list[int]]]:
    """Cut a program into consecutive Lax segments.

    Returns ``(segment, input tensors, output tensors)`` triples in terms of
    the original program's tensor ids. Operators are taken in order and a new
    segment starts whenever the next one would put two exponentiations on one
    path inside the current segment.
    """
    segments: list[list[Op]] = [[]]
    exps: dict[int, int] = {}
    produced: set[int] = set()
    for op in program.ops:
        count = (op.type is OpType.EW_EXP) + max((exps.get(t, 0) for t in op.inputs if t in produced),
                                                 default=0)
        if count > 1:
            segments.append([])
            produced = set()
            count = int(op.type is OpType.EW_EXP)
        segments[-1].append(op)
        for t in op.outputs:
            exps[t] = count
            produced.add(t)
    consumers_after: dict[int, int] = {}
    for k, seg in enumerate(segments):
        for op in seg:
            for t in op.inputs:
                consumers_after[t] = max(consumers_after.get(t, -1), k)
    out = []
    finals = set(program.outputs)
    for k, seg in enumerate(segments):
        made = [t for op in seg for t in op.outputs]
        made_set = set(made)
        ins = []
        for op in seg:
            for t in op.inputs:
                if t not in made_set and t not in ins:
                    ins.append(t)
        outs = [t for t in made if t in finals or consumers_after.get(t, -1) > k]
        out.append((_subgraph(program, seg, ins, outs), ins, outs))
    return out


def _subgraph(program: KernelGraph, ops: Sequence[Op], ins: Sequence[int], outs: Sequence[int]) -> KernelGraph:
    ids = {t: i for i, t in enumerate(ins)}
    for op in ops:
        for t in op.outputs:
            ids[t] = len(ids)
    tensors = {ids[t]: Tensor(ids[t], program.shape(t), Scope.DEVICE) for t in ids}
    new_ops = tuple(Op(j, op.type, tuple(ids[t] for t in op.inputs), tuple(ids[t] for t in op.outputs),
                       dict(op.attrs)) for j, op in enumerate(ops))
    names = tuple(program.input_name(program.inputs.index(t)) if t in program.inputs else f"t{t}"
                  for t in ins)
    return KernelGraph(tensors, tuple(range(len(ins))), new_ops, tuple(ids[t] for t in outs), names)


def stitch(program: KernelGraph, parts: Sequence[tuple[KernelGraph, list[int], list[int]]]) -> KernelGraph:
    """Reassemble optimized segments into one kernel graph over the program's inputs."""
    tensors = {t: program.tensors[t] for t in program.inputs}
    nxt = max(program.tensors) + 1
    ops: list[Op] = []
    for g, ins, outs in parts:
        env = dict(zip(g.inputs, ins)) | dict(zip(g.outputs, outs))
        for op in g.ops:
            for t in op.outputs:
                if t not in env:
                    env[t] = nxt
                    nxt += 1
                tensors[env[t]] = Tensor(env[t], g.shape(t), Scope.DEVICE)
            ops.append(Op(len(ops), op.type, tuple(env[t] for t in op.inputs),
                          tuple(env[t] for t in op.outputs), dict(op.attrs), op.graph))
    return KernelGraph(tensors, program.inputs, tuple(ops), program.outputs, program.names)


def optimize(program: KernelGraph, cfg: PipelineConfig = PipelineConfig()) -> OptimizeResult:
    """Optimize a program, splitting it into Lax segments when needed."""
    for op in program.ops:
        if op.type is OpType.GRAPH_DEF:
            raise ParseError("the input program must be a flat graph of pre-defined operators")
    problems = lax_violations(program)
    if not problems:
        return optimize_lax(program, cfg)
    if not cfg.split_lax:
        raise NotLax(problems)
    parts = split_lax(program)
    results = [(optimize_lax(seg, cfg), ins, outs) for seg, ins, outs in parts]
    g = stitch(program, [(r.graph, ins, outs) for r, ins, outs in results])
    plan = optimize_candidate(g, cfg.weights, cfg.search.smem_limit, fuse=False)
    rep = PipelineReport(segments=len(parts))
    for r, _, _ in results:
        rep.generated += r.report.generated
        rep.examined += r.report.examined
        rep.verified += r.report.verified
        rep.stable += r.report.stable
    rep.best_key = canonical_key(g)
    rep.best_cost = plan.cost.total
    rep.trivial_cost = optimize_candidate(program, cfg.weights, cfg.search.smem_limit).cost.total
    rep.cost = plan.cost.to_json()
    rep.plan = plan.to_json()
    rep.timings = {"total": sum(r.report.timings["total"] for r, _, _ in results)}
    return OptimizeResult(g, plan, rep, [], [])


# ---------------------------------------------------------------------------
# benchmarks

# desk-scale search settings per suite
SUITE_SEARCH = {
    "rmsnorm": SearchConfig(grid_candidates=((1,), (2,), (4,)), loop_candidates=(1, 2, 4),
                            max_kernel_ops=5, max_block_ops=11),
    "lora": SearchConfig(grid_candidates=((1,),), loop_candidates=(1, 4), max_kernel_ops=2, max_block_ops=7,
                         concat_accum=False),
    "gatedmlp": SearchConfig(grid_candidates=((1,), (2,)), loop_candidates=(1, 2), max_kernel_ops=2,
                             max_block_ops=8),
    # one block graph per normalized operand, then the score matmul
    "qknorm": SearchConfig(grid_candidates=((1,),), loop_candidates=(1,), max_kernel_ops=3, max_block_ops=8,
                           max_graphdefs=2, kernel_pool=(OpType.MATMUL, OpType.GRAPH_DEF)),
    "attention": SearchConfig(grid_candidates=((1,),), loop_candidates=(1, 2), max_kernel_ops=2,
                              max_block_ops=8),
}


def suite_config(name: str, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    if name not in SUITE_SEARCH:
        raise UnknownSuite(f"unknown suite {name!r}; known: {', '.join(sorted(SUITE_SEARCH))}")
    return replace(base, search=SUITE_SEARCH[name])


def bench(name: str, base: PipelineConfig = PipelineConfig()) -> list[dict]:
    """Trivial and best cost for one suite (or ``all``)."""
    table = fixtures.suites()
    names = sorted(table) if name == "all" else [name]
    rows = []
    for n in names:
        if n not in table:
            raise UnknownSuite(f"unknown suite {n!r}; known: {', '.join(sorted(table))}")
        cfg = suite_config(n, base)
        res = optimize(table[n].program, cfg)
        r = res.report
        rows.append({"suite": n, "trivialCost": r.trivial_cost, "bestCost": r.best_cost,
                     "ratio": r.best_cost / r.trivial_cost if r.trivial_cost else 1.0,
                     "kernels": len(res.graph.ops), "generated": r.generated, "verified": r.verified,
                     "seconds": round(r.timings.get("total", 0.0), 3)})
    return rows


# ---------------------------------------------------------------------------
# describe


def _fmt_map(m) -> str:
    return "{" + ", ".join(f"{a}:{'φ' if d is None else d}" for a, d in m.items()) + "}"


def describe(g: Graph, weights: CostWeights = CostWeights()) -> str:
    """Pseudo-kernel listing: per kernel, its grid, loop, maps, scheduled body and memory offsets."""
    if not g.ops:
        return ""
    from .optimizer import plan_memory, schedule_ops

    lines = []
    for j, op in enumerate(g.ops):
        ins = ", ".join(f"t{t}{list(g.shape(t))}" for t in op.inputs)
        outs = ", ".join(f"t{t}{list(g.shape(t))}" for t in op.outputs)
        if not isinstance(op.graph, BlockGraph):
            lines.append(f"kernel {j}: {op.type.value}({ins}) -> {outs}")
            continue
        bg = op.graph
        lines.append(f"kernel {j}: graph-defined ({ins}) -> {outs}")
        lines.append(f"  grid {list(bg.grid)} ({math.prod(bg.grid)} blocks), for-loop i={bg.forloop}")
        for k, (t, im, fm) in enumerate(zip(bg.inputs, bg.imaps, bg.fmaps)):
            lines.append(f"  input {k} t{t}{list(bg.shape(t))}: imap {_fmt_map(im)} fmap {_fmt_map(fm)}")
        for k, (t, om) in enumerate(zip(bg.outputs, bg.omaps)):
            lines.append(f"  output {k} t{t}{list(bg.shape(t))}: omap {_fmt_map(om)}")
        accs = sum(1 for b in bg.ops if b.type is OpType.ACCUM)
        lines.append(f"  accumulators {accs}")
        sched = schedule_ops(bg)
        try:
            mem = plan_memory(bg, sched).offsets
        except DoesNotFit:
            mem = {}
        loop_ops = bg.loop_phase()
        ops_by_id = {b.id: b for b in bg.ops}
        for pos, oid in enumerate(sched.order):
            if pos in sched.syncs:
                lines.append("    __syncthreads()")
            b = ops_by_id[oid]
            where = "loop" if oid in loop_ops else "post"
            attrs = "".join(f" {k}={v}" for k, v in sorted(b.attrs.items()))
            placed = ", ".join(f"t{t}@{mem[t]}" if t in mem else f"t{t}" for t in b.outputs)
            desc = f"    [{where}] {b.type.value}{attrs}({', '.join(f't{t}' for t in b.inputs)}) -> {placed}"
            if isinstance(b.graph, ThreadGraph):
                desc += " {" + "; ".join(o.type.value for o in b.graph.ops) + "}"
            lines.append(desc)
    return "\n".join(lines) + "\n"


def graph_json(g: Graph) -> dict:
    return to_json(g)
