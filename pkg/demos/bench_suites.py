"""Trivial vs optimized cost for every benchmark suite (RMSNorm and QKNorm take minutes)."""

from __future__ import annotations

import sys

from mugraph.pipeline import bench


def main() -> None:
    names = sys.argv[1:] or ["lora", "gatedmlp", "attention", "rmsnorm", "qknorm"]
    print(f"{'suite':<10} {'trivial':>9} {'best':>9} {'ratio':>6} {'kernels':>7} {'seconds':>8}")
    for name in names:
        for row in bench(name):
            print(f"{row['suite']:<10} {row['trivialCost']:>9.0f} {row['bestCost']:>9.0f} "
                  f"{row['ratio']:>6.3f} {row['kernels']:>7} {row['seconds']:>8.1f}")


if __name__ == "__main__":
    main()
