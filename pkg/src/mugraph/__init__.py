"""Desk-scale superoptimizer over hierarchical µGraphs."""

from .generator import SearchConfig, generate
from .ir import BlockBuilder, KernelBuilder, OpType, from_json, to_json
from .optimizer import CostWeights, select_best
from .pipeline import PipelineConfig, optimize
from .verifier import VerifyConfig, random_test_equivalence

__all__ = ["BlockBuilder", "CostWeights", "KernelBuilder", "OpType", "PipelineConfig", "SearchConfig",
           "VerifyConfig", "from_json", "generate", "optimize", "random_test_equivalence", "select_best",
           "to_json"]
