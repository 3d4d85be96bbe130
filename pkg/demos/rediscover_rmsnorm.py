"""Search for a fused RMSNorm+MatMul kernel starting from the operator-level program.

    python3 demos/rediscover_rmsnorm.py          # full search, a few minutes
    python3 demos/rediscover_rmsnorm.py --quick  # grid and loop fixed to 4, seconds
"""

from __future__ import annotations

import argparse
import time

from mugraph import fixtures
from mugraph.generator import SearchConfig
from mugraph.pipeline import PipelineConfig, describe, optimize, suite_config
from mugraph.structure import isomorphic, rmsnorm_structure


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    program = fixtures.rmsnorm_program(4, 64, 64)
    cfg = suite_config("rmsnorm")
    if args.quick:
        cfg = PipelineConfig(search=SearchConfig(grid_candidates=((4,),), loop_candidates=(4,),
                                                 max_kernel_ops=5, max_block_ops=11))
    t0 = time.perf_counter()
    res = optimize(program, cfg)
    r = res.report
    print(f"{r.generated} candidates, {r.verified} verified, {time.perf_counter() - t0:.1f} s")
    print(f"cost {r.best_cost:.0f} (trivial {r.trivial_cost:.0f})")
    print(describe(res.graph))
    golden = fixtures.rmsnorm_fused(4, 64, 64, grid=4, loop=4)
    problems = rmsnorm_structure(res.graph)
    print("matches the hand-fused kernel:", isomorphic(res.graph, golden))
    print("structure problems:", problems or "none")


if __name__ == "__main__":
    main()
