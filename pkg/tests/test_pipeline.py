from __future__ import annotations

import json

import numpy as np
import pytest

from mugraph import fixtures
from mugraph.generator import SearchConfig
from mugraph.interp import eval_mugraph, eval_program, max_relative_error, random_inputs
from mugraph.ir import KernelBuilder, OpType, from_json, is_lax, to_json, validate
from mugraph.pipeline import (NotLax, ParseError, PipelineConfig, UnknownSuite, bench, describe, load_graph,
                              optimize, split_lax, stitch, suite_config)
from mugraph.structure import gatedmlp_structure, lora_structure
from mugraph.verifier import VerifyConfig, random_test_equivalence

SMALL = PipelineConfig(search=SearchConfig(max_kernel_ops=2, max_block_ops=4, grid_candidates=((1,),),
                                           loop_candidates=(1,)))


def double_exp_program():
    """exp(exp(A)) + A: two exponentiations on one path."""
    kb = KernelBuilder()
    a = kb.input((4, 4), "A")
    e2 = kb.op(OpType.EW_EXP, [kb.op(OpType.EW_EXP, [a])])
    return kb.build([kb.op(OpType.EW_ADD, [e2, a])])


def small_inputs(g, seed=0):
    return [0.1 * x for x in random_inputs(g, np.random.default_rng(seed))]


# -- Lax splitting ---------------------------------------------------------------


def test_split_lax_cuts_between_exponentials():
    p = double_exp_program()
    assert not is_lax(p)
    parts = split_lax(p)
    assert len(parts) == 2
    assert all(is_lax(seg) for seg, _, _ in parts)
    xs = small_inputs(p)
    (y,) = eval_mugraph(stitch(p, parts), xs)
    assert max_relative_error(y, eval_program(p, xs)[0]) <= 1e-14


def test_lax_program_is_one_segment():
    p = fixtures.rmsnorm_program()
    (seg, ins, outs), = split_lax(p)
    assert len(seg.ops) == len(p.ops) and ins == list(p.inputs) and outs == list(p.outputs)


def test_optimize_splits_non_lax_program():
    p = double_exp_program()
    res = optimize(p, SMALL)
    assert res.report.segments == 2
    assert validate(res.graph).valid
    xs = small_inputs(p, 1)
    assert max_relative_error(eval_mugraph(res.graph, xs)[0], eval_program(p, xs)[0]) <= 1e-12


def test_not_lax_without_splitting():
    with pytest.raises(NotLax) as e:
        optimize(double_exp_program(), PipelineConfig(split_lax=False))
    assert e.value.problems


def test_graph_defined_program_is_rejected():
    with pytest.raises(ParseError):
        optimize(fixtures.rmsnorm_fused(), SMALL)


# -- optimize --------------------------------------------------------------------


@pytest.mark.parametrize("name", ["lora", "gatedmlp", "attention"])
def test_optimize_report_invariants(name):
    p = fixtures.suites()[name].program
    res = optimize(p, suite_config(name))
    c = res.report.to_json()["counts"]
    assert c["stable"] <= c["verified"] <= c["examined"] <= c["generated"]
    assert res.report.best_cost <= res.report.trivial_cost
    assert validate(res.graph).valid
    # the winner passes verification against the input on a fresh seed
    assert random_test_equivalence(res.graph, p, VerifyConfig(4, 1234)).equivalent


def test_verify_all_finds_the_same_winner():
    p = fixtures.lora_program()
    lazy = optimize(p, suite_config("lora"))
    full = optimize(p, suite_config("lora", PipelineConfig(verify_all=True)))
    assert lazy.report.best_key == full.report.best_key
    assert full.report.examined == full.report.generated >= lazy.report.examined


def test_lora_and_gatedmlp_winners():
    lora = optimize(fixtures.lora_program(), suite_config("lora"))
    assert lora_structure(to_json(lora.graph)) == []
    mlp = optimize(fixtures.gatedmlp_program(), suite_config("gatedmlp"))
    assert gatedmlp_structure(to_json(mlp.graph)) == []


# -- bench -----------------------------------------------------------------------


def test_unknown_suite():
    with pytest.raises(UnknownSuite):
        bench("nope")
    with pytest.raises(UnknownSuite):
        suite_config("nope")


def test_bench_is_deterministic():
    def strip(rows):
        return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

    a, b = bench("gatedmlp"), bench("gatedmlp")
    assert strip(a) == strip(b)
    assert a[0]["ratio"] < 1


# -- describe --------------------------------------------------------------------


def test_describe_paper_scale_rmsnorm():
    text = describe(fixtures.rmsnorm_fused(16, 1024, 4096, grid=128, loop=16))
    assert "grid [128] (128 blocks), for-loop i=16" in text
    assert "accumulators 2" in text
    assert "__syncthreads()" in text


def test_describe_empty_graph():
    assert describe(KernelBuilder().build([])) == ""


def test_describe_lists_every_dimmap():
    g = fixtures.attention_fused()
    text = describe(g)
    for op in to_json(g)["ops"]:
        block = op.get("blockGraph")
        if block is None:
            continue
        maps = [e[k] for e in block["inputs"] for k in ("imap", "fmap")] + [e["omap"] for e in block["outputs"]]
        for m in maps:
            rendered = "{" + ", ".join(f"{a}:{'φ' if d == 'phi' else d}" for a, d in m.items()) + "}"
            assert rendered in text


# -- loading ---------------------------------------------------------------------


def test_load_graph_forms(tmp_path):
    g = fixtures.lora_fused()
    path = tmp_path / "g.json"
    path.write_text(json.dumps(to_json(g)))
    for src in (path, str(path), json.dumps(to_json(g)), to_json(g)):
        assert to_json(load_graph(src)) == to_json(g)


@pytest.mark.parametrize("bad", ["{not json", "/no/such/file.json", '{"level": "kernel"}', {"ops": 3}])
def test_load_graph_errors(bad):
    with pytest.raises(ParseError):
        load_graph(bad)


def test_from_json_round_trip_through_pipeline_output():
    res = optimize(fixtures.gatedmlp_program(), suite_config("gatedmlp"))
    back = from_json(json.loads(json.dumps(to_json(res.graph))))
    xs = random_inputs(back, np.random.default_rng(0))
    for a, b in zip(eval_mugraph(back, xs), eval_mugraph(res.graph, xs)):
        assert (a == b).all()
