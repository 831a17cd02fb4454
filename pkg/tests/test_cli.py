from __future__ import annotations

import csv
import json

import pytest

from moesig.cli import dispatch, emit_report
from moesig.detector import BenchmarkReport, BenchmarkRow
from moesig.routing_trace import build_trace_set, write_traces
from moesig.synthgen import ScenarioConfig, generate_scenario


def write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def simple_trace_file(path, records=None, num_experts=4, domains=("math", "code")):
    records = records or [
        ("a", 1, 0, (0, 1)),
        ("b", 2, 0, (1, 2)),
    ]
    ts = build_trace_set("m", 1, (num_experts,), domains, records)
    write_traces(ts, path)
    return ts


class TestDispatchBasics:
    def test_unknown_subcommand_usage_error(self, capsys):
        assert dispatch(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_arguments_usage_error(self):
        assert dispatch([]) == 2

    def test_version_exits_zero(self):
        assert dispatch(["--version"]) == 0

    def test_missing_input_is_runtime_error(self, tmp_path):
        code = dispatch(
            ["ingest", "--input", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]
        )
        assert code == 1


class TestIngest:
    def test_roundtrip_and_reproducibility(self, tmp_path):
        src = tmp_path / "raw.jsonl"
        simple_trace_file(src)
        out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert dispatch(["ingest", "--input", str(src), "--out", str(out1)]) == 0
        assert dispatch(["ingest", "--input", str(src), "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        header = json.loads(out1.read_text().splitlines()[0])
        assert header["meta"]["tool_version"]
        assert header["meta"]["config_digest"]


class TestProfile:
    def test_csv_has_one_row_per_expert_per_domain(self, tmp_path):
        src = tmp_path / "t.jsonl"
        simple_trace_file(src)
        out = tmp_path / "p.csv"
        assert dispatch(["profile", "--input", str(src), "--out", str(out), "--format", "csv"]) == 0
        with out.open() as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        spec_rows = [r for r in rows[1:] if r[0] == "specialization"]
        by_domain = {}
        for r in spec_rows:
            by_domain.setdefault(r[2], []).append(float(r[5]))
        assert set(by_domain) == {"math", "code"}
        for values in by_domain.values():
            assert len(values) == 4
            assert abs(sum(values) - 1.0) <= 1e-9

    def test_json_profile_then_distance(self, tmp_path):
        src = tmp_path / "t.jsonl"
        simple_trace_file(src)
        sig = tmp_path / "sig.json"
        assert dispatch(["profile", "--input", str(src), "--out", str(sig)]) == 0
        out = tmp_path / "d.json"
        assert (
            dispatch(
                ["distance", "--teacher", str(sig), "--student", str(sig), "--out", str(out)]
            )
            == 0
        )
        doc = json.loads(out.read_text())
        assert doc["d_spec"] == 0.0
        assert doc["d_collab"] == 0.0
        assert doc["method"] == "exact-brute-force"
        assert sorted(doc["spec_permutation"]) == [0, 1, 2, 3]


class TestSynthDetect:
    def test_detect_matches_ground_truth_manifest(self, tmp_path):
        cfg = dict(
            num_experts=8,
            num_layers=1,
            top_k=2,
            num_domains=4,
            n_per_domain=60,
            relatedness=1.0,
            permute_labels=True,
            seed=3,
        )
        cfg_path = tmp_path / "scenario.json"
        write_json(cfg_path, cfg)
        out_dir = tmp_path / "scn"
        assert dispatch(["synth", "--config", str(cfg_path), "--out-dir", str(out_dir)]) == 0
        manifest = json.loads((out_dir / "manifest.json").read_text())
        verdict_path = tmp_path / "verdict.json"
        code = dispatch(
            [
                "detect",
                "--teacher", str(out_dir / "teacher.jsonl"),
                "--cand1", str(out_dir / "cand1.jsonl"),
                "--cand2", str(out_dir / "cand2.jsonl"),
                "--out", str(verdict_path),
            ]
        )
        assert code == 0
        verdict = json.loads(verdict_path.read_text())
        assert verdict["predicted"] == manifest["distilled"]
        assert not verdict["tie"]
        assert verdict["margin"] > 0

    def test_synth_reruns_byte_identical(self, tmp_path):
        cfg = dict(
            num_experts=6, num_layers=1, top_k=2, num_domains=3,
            n_per_domain=20, relatedness=0.5, seed=9,
        )
        cfg_path = tmp_path / "c.json"
        write_json(cfg_path, cfg)
        d1, d2 = tmp_path / "s1", tmp_path / "s2"
        assert dispatch(["synth", "--config", str(cfg_path), "--out-dir", str(d1)]) == 0
        assert dispatch(["synth", "--config", str(cfg_path), "--out-dir", str(d2)]) == 0
        for name in ("teacher.jsonl", "cand1.jsonl", "cand2.jsonl", "manifest.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


class TestSweep:
    def test_grid_expansion_row_count(self, tmp_path):
        grid = {
            "base": dict(num_experts=6, num_layers=1, top_k=2, num_domains=3, n_per_domain=20),
            "rho": [0.0, 1.0],
            "seeds": [0, 1, 2],
        }
        grid_path = tmp_path / "grid.json"
        write_json(grid_path, grid)
        out = tmp_path / "table.csv"
        assert dispatch(["sweep", "--grid", str(grid_path), "--out", str(out)]) == 0
        with out.open() as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        assert len(rows) - 1 == 6  # header + one row per config
        assert rows[0][:2] == ["rho", "num_experts"]


class TestTrainProxy:
    def test_train_export_and_determinism(self, tmp_path):
        qcfg = dict(kind="gaussian-domains", seed=5, num_domains=2, n_per_domain=10, input_dim=3)
        qcfg_path = tmp_path / "q.json"
        write_json(qcfg_path, qcfg)
        queries_path = tmp_path / "queries.jsonl"
        assert dispatch(["make-queries", "--config", str(qcfg_path), "--out", str(queries_path)]) == 0

        oracle = {"kind": "linear", "seed": 2, "scale": 0.5}
        oracle_path = tmp_path / "oracle.json"
        write_json(oracle_path, oracle)
        proxy_cfg = dict(
            num_layers=1, experts_per_layer=4, top_k=2, input_dim=3, output_dim=2,
            hidden_dim=6, epochs=3, seed=11,
        )
        cfg_path = tmp_path / "proxy.json"
        write_json(cfg_path, proxy_cfg)

        outputs = []
        for tag in ("x", "y"):
            model_path = tmp_path / f"model-{tag}.bin"
            traces_path = tmp_path / f"traces-{tag}.jsonl"
            losses_path = tmp_path / f"losses-{tag}.json"
            code = dispatch(
                [
                    "train-proxy",
                    "--oracle", str(oracle_path),
                    "--queries", str(queries_path),
                    "--config", str(cfg_path),
                    "--out", str(model_path),
                    "--traces", str(traces_path),
                    "--losses", str(losses_path),
                ]
            )
            assert code == 0
            outputs.append((model_path.read_bytes(), traces_path.read_bytes(), losses_path.read_bytes()))
        assert outputs[0] == outputs[1]
        losses = json.loads((tmp_path / "losses-x.json").read_text())["losses"]
        assert len(losses) == proxy_cfg["epochs"] + 1


class TestReport:
    def test_benchmark_directory_report(self, tmp_path):
        scenario = generate_scenario(
            ScenarioConfig(
                num_experts=6, num_layers=1, top_k=2, num_domains=3,
                n_per_domain=40, relatedness=0.95, seed=4,
            )
        )
        bench = tmp_path / "bench"
        bench.mkdir()
        write_traces(scenario.teacher, bench / "teacher.jsonl")
        write_traces(scenario.distilled, bench / "kd.jsonl")
        write_traces(scenario.scratch, bench / "scratch.jsonl")
        manifest = {
            "teacher": "teacher.jsonl",
            "pairs": {"all": {"kd": "kd.jsonl", "scratch": "scratch.jsonl"}},
            "meta": {"seed": 4},
        }
        write_json(bench / "manifest.json", manifest)
        out = tmp_path / "report.csv"
        assert dispatch(["report", "--benchmark", str(bench), "--out", str(out)]) == 0
        text = out.read_text()
        assert text.startswith("# accuracy=1.0")
        with out.open() as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        assert rows[0][0] == "domain"
        assert rows[1][0] == "all"
        assert rows[1][rows[0].index("verdict")] == "kd"


class TestEmitReport:
    def test_reduction_columns_and_accuracy(self, tmp_path):
        report = BenchmarkReport(
            rows=(
                BenchmarkRow("d1", 0.8, 1.0, 0.8, 1.0, 0.2, "kd", False),
                BenchmarkRow("d2", 0.5, 1.0, 0.25, 0.5, 0.375, "kd", False),
                BenchmarkRow("d3", 1.0, 0.5, 1.0, 0.5, -0.5, "scratch", False),
                BenchmarkRow("d4", 0.2, 0.4, 0.1, 0.2, 0.15, "kd", False),
            ),
            layer_policy="last",
            mode="auto",
        )
        assert report.accuracy == 0.75
        path = tmp_path / "r.csv"
        emit_report(report, path, fmt="csv", meta={"seed": 1})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# accuracy=0.75")
        header = lines[1].split(",")
        row = lines[2].split(",")
        assert header[header.index("spec_reduction_pct")] == "spec_reduction_pct"
        assert float(row[header.index("spec_reduction_pct")]) == pytest.approx(-20.0)
        assert float(row[header.index("collab_reduction_pct")]) == pytest.approx(-20.0)

        json_path = tmp_path / "r.json"
        emit_report(report, json_path, fmt="json", meta={"seed": 1})
        doc = json.loads(json_path.read_text())
        assert doc["accuracy"] == 0.75
        assert doc["rows"][0]["spec_reduction_pct"] == pytest.approx(-20.0)

    def test_all_correct_accuracy_one(self, tmp_path):
        rows = tuple(
            BenchmarkRow(f"d{i}", 0.1, 0.9, 0.1, 0.9, 0.4, "kd", False) for i in range(4)
        )
        report = BenchmarkReport(rows=rows, layer_policy="last", mode="auto")
        path = tmp_path / "r.json"
        emit_report(report, path, fmt="json")
        assert json.loads(path.read_text())["accuracy"] == 1.0
