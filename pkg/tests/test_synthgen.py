from __future__ import annotations

import filecmp

import pytest

from moesig.detector import detect_pair
from moesig.errors import ScenarioError
from moesig.signatures import signature_bundle
from moesig.synthgen import (
    ScenarioConfig,
    generate_scenario,
    summarize_sweep,
    sweep,
    write_scenario,
)
from moesig.transport import signature_distance

BASE = dict(
    num_experts=8,
    num_layers=1,
    top_k=2,
    num_domains=4,
    n_per_domain=50,
    relatedness=1.0,
    seed=0,
)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ScenarioError):
            ScenarioConfig(**{**BASE, "relatedness": 1.5})
        with pytest.raises(ScenarioError):
            ScenarioConfig(**{**BASE, "top_k": 9})
        with pytest.raises(ScenarioError):
            ScenarioConfig(**{**BASE, "layer_bias": (0.5,) * 3})
        with pytest.raises(ScenarioError):
            ScenarioConfig(**{**BASE, "layer_bias": (2.0,)})

    def test_dict_roundtrip(self):
        cfg = ScenarioConfig(**{**BASE, "layer_bias": (1.0,)})
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
        assert ScenarioConfig.from_dict(BASE).resolved_layer_bias == (1.0,)


class TestGenerate:
    def test_shared_shape_and_queries(self):
        scenario = generate_scenario(ScenarioConfig(**BASE))
        for traces in (scenario.teacher, scenario.distilled, scenario.scratch):
            assert traces.experts_per_layer == (8,)
            assert traces.num_layers == 1
            assert traces.domains == ("d1", "d2", "d3", "d4")
            assert traces.num_queries == 200
        ids = [t.query_id for t in scenario.teacher.traces]
        assert ids == [t.query_id for t in scenario.distilled.traces]
        assert ids == [t.query_id for t in scenario.scratch.traces]
        assert scenario.ground_truth == "distilled"

    def test_rho_one_without_relabeling_copies_teacher(self):
        cfg = ScenarioConfig(**{**BASE, "permute_labels": False})
        scenario = generate_scenario(cfg)
        assert scenario.hidden_permutation is None
        for t_trace, d_trace in zip(scenario.teacher.traces, scenario.distilled.traces):
            for t_sel, d_sel in zip(t_trace.selections, d_trace.selections):
                assert t_sel.selected == d_sel.selected

    def test_rho_one_with_relabeling_gives_zero_exact_distance(self):
        scenario = generate_scenario(ScenarioConfig(**BASE))
        sigma = scenario.hidden_permutation
        assert sigma is not None
        teacher_sig = signature_bundle(scenario.teacher)
        distilled_sig = signature_bundle(scenario.distilled)
        dist = signature_distance(teacher_sig, distilled_sig, mode="exact")
        assert dist.d_spec <= 1e-15
        assert dist.d_collab <= 1e-15
        # the matcher undoes the hidden relabeling
        assert dist.spec_permutation.mapping == sigma.inverse().mapping
        verdict = detect_pair(teacher_sig, distilled_sig, signature_bundle(scenario.scratch))
        assert verdict.predicted_index == 1

    def test_seed_determinism_byte_identical_files(self, tmp_path):
        cfg = ScenarioConfig(**{**BASE, "n_per_domain": 20})
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        write_scenario(generate_scenario(cfg), dir_a)
        write_scenario(generate_scenario(cfg), dir_b)
        names = ["teacher.jsonl", "cand1.jsonl", "cand2.jsonl", "manifest.json"]
        match, mismatch, errors = filecmp.cmpfiles(dir_a, dir_b, names, shallow=False)
        assert match == names and not mismatch and not errors

    def test_different_seed_changes_draws(self):
        a = generate_scenario(ScenarioConfig(**{**BASE, "n_per_domain": 20}))
        b = generate_scenario(ScenarioConfig(**{**BASE, "n_per_domain": 20, "seed": 1}))
        assert a.scratch != b.scratch

    def test_layer_bias_zero_means_no_copying(self):
        cfg = ScenarioConfig(
            **{**BASE, "num_layers": 2, "permute_labels": False, "layer_bias": (0.0, 1.0)}
        )
        scenario = generate_scenario(cfg)
        copies_l0 = sum(
            t.selections[0].selected == d.selections[0].selected
            for t, d in zip(scenario.teacher.traces, scenario.distilled.traces)
        )
        copies_l1 = sum(
            t.selections[1].selected == d.selections[1].selected
            for t, d in zip(scenario.teacher.traces, scenario.distilled.traces)
        )
        assert copies_l1 == scenario.teacher.num_queries  # full copy at biased layer
        assert copies_l0 < scenario.teacher.num_queries  # chance-level agreement only


class TestSweep:
    def test_row_count_and_single_config(self):
        rows = sweep([ScenarioConfig(**{**BASE, "n_per_domain": 30})])
        assert len(rows) == 1
        assert rows[0]["correct"] == 1
        assert rows[0]["rho"] == 1.0

    def test_accuracy_increases_with_rho(self):
        configs = [
            ScenarioConfig(**{**BASE, "num_domains": 4, "n_per_domain": 100,
                              "relatedness": rho, "seed": seed})
            for rho in (0.0, 0.5, 1.0)
            for seed in range(6)
        ]
        rows = sweep(configs)
        assert len(rows) == len(configs)
        summary = {s["rho"]: s for s in summarize_sweep(rows)}
        assert summary[1.0]["accuracy"] == 1.0
        assert summary[1.0]["accuracy"] > summary[0.0]["accuracy"]
        assert summary[1.0]["mean_margin"] > summary[0.0]["mean_margin"]

    def test_empty_sweep_rejected(self):
        with pytest.raises(ScenarioError):
            sweep([])
