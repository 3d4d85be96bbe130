"""Command-line interface: optimize, verify, eval, bench, describe.

Exit codes: 0 success, 1 verification failure, 2 input error (and 2 for an
inconclusive ``verify``). Output is JSON unless ``--pretty`` is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .ff import DEFAULT_FIELD, FieldParams
from .generator import ConfigError, SearchConfig
from .interp import eval_mugraph
from .ir import MuGraphError, ShapeMismatch, to_json
from .optimizer import CostWeights
from .verifier import EQUIVALENT, NOT_EQUIVALENT, VerifyConfig, random_test_equivalence, rounds_for_confidence

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

# config-file keys and the flags they mirror
_SEARCH_KEYS = {"maxKernelOps": "max_kernel_ops", "maxBlockOps": "max_block_ops",
                "gridCandidates": "grid_candidates", "loopCandidates": "loop_candidates",
                "workers": "workers", "smemLimit": "smem_limit", "maxGraphdefInputs": "max_graphdef_inputs",
                "maxGraphdefs": "max_graphdefs", "prune": "prune", "maxPrefixes": "max_prefixes",
                "concatAccum": "concat_accum", "nodeLimit": "node_limit", "iterLimit": "iter_limit"}
_PIPE_KEYS = {"seed": "seed", "numTests": "num_tests", "verifyRounds": "verify_rounds",
              "stabilityTrials": "stability_trials", "stabilityTol": "stability_tol", "splitLax": "split_lax"}


class InputError(Exception):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _grids(values) -> tuple[tuple[int, ...], ...]:
    out = []
    for v in values:
        if isinstance(v, int):
            out.append((v,))
        elif isinstance(v, str):
            out.append(tuple(int(x) for x in v.split("x")))
        else:
            out.append(tuple(int(x) for x in v))
    return tuple(out)


def _emit(obj, pretty: bool, text: str | None = None) -> None:
    if pretty and text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        json.dump(obj, sys.stdout, indent=2 if pretty else None, default=str)
        sys.stdout.write("\n")


def build_config(args) -> pipeline.PipelineConfig:
    """Defaults, then the config file, then explicit flags."""
    search: dict = {}
    pipe: dict = {}
    weights = CostWeights()
    if getattr(args, "config", None):
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise InputError(f"cannot read config: {e}") from e
        unknown = set(conf) - set(_SEARCH_KEYS) - set(_PIPE_KEYS) - {"weights"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        for k, v in conf.items():
            if k in _SEARCH_KEYS:
                search[_SEARCH_KEYS[k]] = v
            elif k in _PIPE_KEYS:
                pipe[_PIPE_KEYS[k]] = v
        if "weights" in conf:
            w = conf["weights"]
            weights = CostWeights.parse(",".join(f"{k}={v}" for k, v in w.items()) if isinstance(w, dict) else w)
    for flag, key in (("max_kernel_ops", "max_kernel_ops"), ("max_block_ops", "max_block_ops"),
                      ("grid_candidates", "grid_candidates"), ("loop_candidates", "loop_candidates"),
                      ("workers", "workers"), ("max_prefixes", "max_prefixes")):
        v = getattr(args, flag, None)
        if v is not None:
            search[key] = v
    if getattr(args, "no_prune", False):
        search["prune"] = False
    for flag in ("seed", "verify_rounds"):
        v = getattr(args, flag, None)
        if v is not None:
            pipe[flag] = v
    if getattr(args, "no_split", False):
        pipe["split_lax"] = False
    if getattr(args, "weights", None):
        weights = CostWeights.parse(args.weights, weights)
    if "grid_candidates" in search:
        search["grid_candidates"] = _grids(search["grid_candidates"])
    if "loop_candidates" in search:
        search["loop_candidates"] = tuple(int(v) for v in search["loop_candidates"])
    try:
        return pipeline.PipelineConfig(search=SearchConfig(**search), weights=weights, **pipe)
    except (ConfigError, TypeError, ValueError) as e:
        raise InputError(str(e)) from e


# ---------------------------------------------------------------------------
# subcommands


def cmd_optimize(args) -> int:
    cfg = build_config(args)
    program = pipeline.load_graph(args.program)
    res = pipeline.optimize(program, cfg)
    check = random_test_equivalence(res.graph, program, VerifyConfig(cfg.verify_rounds, cfg.seed + 7))
    report = res.report.to_json()
    report["finalCheck"] = check.to_json()
    if not args.dump_pruned_stats:
        report["search"] = {k: report["search"][k] for k in ("prefixesExpanded", "candidates")
                            if k in report["search"]}
    out = {"graph": to_json(res.graph), "report": report}
    if args.output:
        Path(args.output).write_text(json.dumps(to_json(res.graph), indent=2))
    text = None
    if args.pretty:
        r = res.report
        text = (f"generated {r.generated}, examined {r.examined}, verified {r.verified}, stable {r.stable}\n"
                f"cost {r.best_cost:.1f} (trivial {r.trivial_cost:.1f}), "
                f"{len(res.graph.ops)} kernel(s), final check {check.status}\n\n"
                + pipeline.describe(res.graph, cfg.weights))
    _emit(out, args.pretty, text)
    return EXIT_OK if check.equivalent else EXIT_FAIL


def cmd_verify(args) -> int:
    g1 = pipeline.load_graph(args.first)
    g2 = pipeline.load_graph(args.second)
    try:
        if (args.p, args.q) == (DEFAULT_FIELD.p, DEFAULT_FIELD.q):
            fp = DEFAULT_FIELD
        else:
            fp = FieldParams.with_root(args.p, args.q)
    except ValueError as e:
        raise InputError(str(e)) from e
    cfg = VerifyConfig(num_tests=args.rounds, seed=args.seed, field=fp)
    verdict = random_test_equivalence(g1, g2, cfg)
    out = verdict.to_json()
    out["field"] = {"p": fp.p, "q": fp.q, "omegaBase": fp.omega_base}
    out["roundsFor1e-6"] = rounds_for_confidence(1e-6, q=fp.q)
    _emit(out, args.pretty, f"{verdict.status} after {verdict.tests} test(s)")
    if verdict.status == EQUIVALENT:
        return EXIT_OK
    return EXIT_FAIL if verdict.status == NOT_EQUIVALENT else EXIT_INPUT


def load_tensors(path: str) -> list[np.ndarray]:
    """``[{"shape": [...], "data": [...]}, ...]`` or ``{"inputs": [...]}``."""
    try:
        obj = json.loads(Path(path).read_text())
        items = obj["inputs"] if isinstance(obj, dict) else obj
        out = []
        for it in items:
            arr = np.asarray(it["data"], dtype=np.float64)
            out.append(arr.reshape(tuple(it["shape"])))
        return out
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise InputError(f"cannot read tensors: {e}") from e


def cmd_eval(args) -> int:
    g = pipeline.load_graph(args.graph)
    xs = load_tensors(args.inputs)
    shapes = [g.shape(t) for t in g.inputs]
    if [x.shape for x in xs] != shapes:
        raise ShapeMismatch(f"input shapes {[list(x.shape) for x in xs]} do not match {[list(s) for s in shapes]}")
    outs = eval_mugraph(g, xs)
    obj = {"outputs": [{"shape": list(o.shape), "data": np.asarray(o).ravel().tolist()} for o in outs]}
    _emit(obj, args.pretty, "\n".join(np.array2string(np.asarray(o)) for o in outs))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = pipeline.PipelineConfig(seed=args.seed)
    if args.weights:
        cfg = replace(cfg, weights=CostWeights.parse(args.weights))
    rows = pipeline.bench(args.suite, cfg)
    text = "\n".join(f"{r['suite']:<10} trivial {r['trivialCost']:>10.1f}  best {r['bestCost']:>10.1f}  "
                     f"ratio {r['ratio']:.3f}  kernels {r['kernels']}" for r in rows)
    _emit({"suite": args.suite, "rows": rows}, args.pretty, text)
    return EXIT_OK


def cmd_describe(args) -> int:
    g = pipeline.load_graph(args.graph)
    text = pipeline.describe(g)
    _emit({"listing": text.splitlines()}, args.pretty, text)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mugraph", description="µGraph superoptimizer")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--pretty", action="store_true", help="human-readable output")

    p = sub.add_parser("optimize", help="search, verify and select the best µGraph for a program")
    p.add_argument("program")
    p.add_argument("--config", help="JSON file with the same settings as the flags")
    p.add_argument("--max-kernel-ops", type=int)
    p.add_argument("--max-block-ops", type=int)
    p.add_argument("--grid-candidates", type=_ints)
    p.add_argument("--loop-candidates", type=_ints)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-prefixes", type=int)
    p.add_argument("--no-prune", action="store_true", help="disable expression pruning")
    p.add_argument("--no-split", action="store_true", help="reject non-Lax programs instead of splitting")
    p.add_argument("--dump-pruned-stats", action="store_true")
    p.add_argument("--weights", help="cost weight overrides, e.g. wDevice=1,wShared=0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--verify-rounds", type=int)
    p.add_argument("--output", help="also write the winning graph JSON here")
    common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="probabilistic equivalence of two graphs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=int, default=227)
    p.add_argument("--q", type=int, default=113)
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="run a graph on float64 inputs")
    p.add_argument("graph")
    p.add_argument("inputs")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="trivial vs best cost for a benchmark suite")
    p.add_argument("suite", help="rmsnorm, lora, gatedmlp, qknorm, attention or all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("describe", help="pseudo-kernel listing of a graph")
    p.add_argument("graph")
    common(p)
    p.set_defaults(func=cmd_describe)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, pipeline.ParseError, pipeline.NotLax, pipeline.UnknownSuite, ConfigError,
            MuGraphError, ValueError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
