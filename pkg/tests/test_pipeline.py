import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from cotforge.cli import main as cli_main
from cotforge.core import write_jsonl
from cotforge.pipeline import ConfigError, PipelineConfig, PipelineRunner, StageFailure

from conftest import make_instruction


def small_config(tmp_path, **overrides):
    config = {
        "run_id": "t",
        "seed": 5,
        "workdir": str(tmp_path / "work"),
        "provider": {"kind": "scripted", "fallback": "demo", "max_in_flight": 2},
        "synthesis": {
            "fanout": 2,
            "target_seeds": ["interest rates", "fx swaps"],
            "general_seeds": ["cooking"],
            "plan": {
                "per_subtopic_counts": {t: 1 for t in ("open_ended", "math_reasoning", "creative_writing", "multiple_choice")},
                "expansion_variants": {t: 1 for t in ("open_ended", "math_reasoning", "creative_writing", "multiple_choice")},
                "max_turns": 2,
            },
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    return config


def write_config(tmp_path, name="config.yaml", **overrides):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(small_config(tmp_path, **overrides)), encoding="utf-8")
    return path


def stage_by_name(manifest):
    return {entry["name"]: entry for entry in manifest["stages"]}


class TestConfig:
    def test_defaults_carry_standard_constants(self):
        config = PipelineConfig()
        plan = config.synthesis.plan
        from cotforge.core import TaskType

        assert plan.per_subtopic_counts[TaskType.MULTIPLE_CHOICE] == 8
        assert plan.per_subtopic_counts[TaskType.OPEN_ENDED] == 10
        assert plan.expansion_variants[TaskType.MULTIPLE_CHOICE] == 3
        assert plan.expansion_variants[TaskType.OPEN_ENDED] == 5
        assert plan.max_turns == 3
        assert config.filter.min_words == 10
        assert config.budget.budgets == (128, 256, 512, 1024, 2048, 4096, 8192)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            PipelineConfig.from_mapping({"unknown_top": 1})
        with pytest.raises(ConfigError):
            PipelineConfig.from_mapping({"provider": {"nope": True}})

    def test_minhash_seed_defaults_to_run_seed(self):
        config = PipelineConfig.from_mapping({"seed": 99})
        assert config.filter.minhash.seed == 99
        pinned = PipelineConfig.from_mapping({"seed": 99, "filter": {"minhash": {"seed": 3}}})
        assert pinned.filter.minhash.seed == 3

    def test_semantic_hash_ignores_paths_and_throughput(self, tmp_path):
        a = PipelineConfig.from_mapping(small_config(tmp_path))
        raw = small_config(tmp_path)
        raw["workdir"] = str(tmp_path / "elsewhere")
        raw["provider"]["max_in_flight"] = 8
        b = PipelineConfig.from_mapping(raw)
        assert a.config_hash() == b.config_hash()
        raw["seed"] = 6
        assert PipelineConfig.from_mapping(raw).config_hash() != a.config_hash()


class TestFullRun:
    def test_manifest_has_seven_reconciling_stages(self, tmp_path):
        config = PipelineConfig.from_mapping(small_config(tmp_path))
        manifest = PipelineRunner(config).run()
        names = [entry["name"] for entry in manifest["stages"]]
        assert names == ["topics", "generate", "expand", "filter", "dialogue", "judge", "export"]
        assert manifest["status"] == "ok"
        stages = stage_by_name(manifest)
        for name in ("filter", "dialogue", "judge"):
            entry = stages[name]
            assert entry["input_count"] == entry["output_count"] + entry["dropped"], name
            assert entry["dropped"] == sum(entry.get("reasons", {}).values()), name
        # Stage chaining: each stage consumes the previous stage's output.
        assert stages["filter"]["input_count"] == stages["expand"]["output_count"]
        assert stages["dialogue"]["input_count"] == stages["filter"]["output_count"]
        assert stages["judge"]["input_count"] == stages["dialogue"]["output_count"]
        assert stages["export"]["output_count"] == stages["judge"]["output_count"]
        workdir = Path(config.workdir)
        assert (workdir / "manifest.json").exists()
        assert (workdir / "dataset.jsonl").exists()
        assert (workdir / "stats.csv").exists()
        assert (workdir / "stats.png").exists()

    def test_resume_skips_with_identical_outputs(self, tmp_path):
        config = PipelineConfig.from_mapping(small_config(tmp_path))
        PipelineRunner(config).run()
        workdir = Path(config.workdir)
        before = {p.name: p.read_bytes() for p in workdir.glob("*.jsonl")}
        manifest = PipelineRunner(config, resume=True).run()
        assert all(entry["status"] == "skipped" for entry in manifest["stages"])
        after = {p.name: p.read_bytes() for p in workdir.glob("*.jsonl")}
        assert before == after

    def test_filter_disabled_passes_through(self, tmp_path):
        raw = small_config(tmp_path)
        raw["stages"] = {"filter": False}
        manifest = PipelineRunner(PipelineConfig.from_mapping(raw)).run()
        entry = stage_by_name(manifest)["filter"]
        assert entry["status"] == "disabled"
        assert entry["input_count"] == entry["output_count"] > 0

    def test_ingest_merges_before_filter(self, tmp_path):
        rows = [{"problem": f"add the numbers {i} and {i + 1} then explain the carrying steps involved"} for i in range(4)]
        source_path = tmp_path / "mathsrc.jsonl"
        write_jsonl(rows, source_path)
        raw = small_config(tmp_path)
        raw["ingest_sources"] = [
            {
                "name": "mathsrc",
                "path": str(source_path),
                "question_field_path": "problem",
                "task_type": "math_reasoning",
                "category_tag": "math",
            }
        ]
        manifest = PipelineRunner(PipelineConfig.from_mapping(raw)).run()
        names = [entry["name"] for entry in manifest["stages"]]
        assert names.index("ingest") < names.index("filter")
        stages = stage_by_name(manifest)
        assert stages["filter"]["input_count"] == stages["expand"]["output_count"] + stages["ingest"]["output_count"]
        # Ingested samples are single-turn and attributed per source in stats.
        stats_csv = (Path(raw["workdir"]) / "stats.csv").read_text()
        assert "mathsrc" in stats_csv
        assert "math" in stats_csv

    def test_failed_stage_marks_manifest_and_halts(self, tmp_path):
        raw = small_config(tmp_path)
        raw["synthesis"]["seeds_file"] = str(tmp_path / "missing_seeds.jsonl")
        config = PipelineConfig.from_mapping(raw)
        with pytest.raises(StageFailure):
            PipelineRunner(config).run()
        manifest = json.loads((Path(config.workdir) / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["failed_stage"] == "topics"
        assert manifest["stages"][-1]["status"] == "failed"

    def test_lock_prevents_concurrent_runs(self, tmp_path):
        config = PipelineConfig.from_mapping(small_config(tmp_path))
        workdir = Path(config.workdir)
        workdir.mkdir(parents=True)
        (workdir / ".lock").write_text("other")
        with pytest.raises(RuntimeError, match="locked"):
            PipelineRunner(config).run()


class TestDeterminism:
    def test_two_runs_byte_identical_including_manifest(self, tmp_path):
        outputs = []
        for tag, workers in (("a", 1), ("b", 8)):
            raw = small_config(tmp_path)
            raw["workdir"] = str(tmp_path / f"work_{tag}")
            raw["provider"]["max_in_flight"] = workers
            PipelineRunner(PipelineConfig.from_mapping(raw)).run()
            workdir = Path(raw["workdir"])
            files = {
                p.relative_to(workdir).as_posix(): p.read_bytes()
                for p in sorted(workdir.rglob("*"))
                if p.suffix in (".jsonl", ".json", ".csv", ".txt") and "checkpoints" not in p.parts
            }
            outputs.append(files)
        assert outputs[0].keys() == outputs[1].keys()
        for name in outputs[0]:
            assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"


class TestCli:
    def run_cli(self, *argv):
        return cli_main(list(argv))

    def test_dry_run_reports_defaults(self, capsys):
        assert self.run_cli("run", "--dry-run") == 0
        payload = json.loads(capsys.readouterr().out)
        plan = payload["config"]["synthesis"]["plan"]
        assert plan["per_subtopic_counts"]["multiple_choice"] == 8
        assert plan["per_subtopic_counts"]["open_ended"] == 10
        assert plan["expansion_variants"]["multiple_choice"] == 3
        assert plan["expansion_variants"]["open_ended"] == 5
        assert plan["max_turns"] == 3
        assert payload["config"]["filter"]["min_words"] == 10
        assert payload["stage_plan"] == ["topics", "generate", "expand", "filter", "dialogue", "judge", "export"]

    def test_dry_run_subprocess_under_a_second(self, tmp_path):
        import time

        start = time.monotonic()
        result = subprocess.run(
            [sys.executable, "-m", "cotforge", "run", "--dry-run"],
            capture_output=True, text=True, cwd=tmp_path,
        )
        elapsed = time.monotonic() - start
        assert result.returncode == 0
        assert elapsed < 1.0
        json.loads(result.stdout)

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("unknown_top: 1\n")
        assert self.run_cli("run", "--config", str(bad)) == 2
        missing = tmp_path / "nope.yaml"
        assert self.run_cli("run", "--config", str(missing)) == 2

    def test_stage_failure_exit_code(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        # generate without topics output: missing inputs -> stage failure
        assert self.run_cli("generate", "--config", str(config_path)) == 3

    def test_auth_failure_exit_code(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("COTFORGE_API_KEY", raising=False)
        config_path = write_config(tmp_path, provider={"kind": "http", "model": "m"})
        assert self.run_cli("run", "--config", str(config_path)) == 4

    def test_single_stage_then_next(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        assert self.run_cli("topics", "--config", str(config_path)) == 0
        entry = json.loads(capsys.readouterr().out)
        assert entry["name"] == "topics"
        assert entry["output_count"] == 6
        assert self.run_cli("generate", "--config", str(config_path)) == 0
        entry = json.loads(capsys.readouterr().out)
        assert entry["output_count"] == 24  # 6 sub-topics x 4 task types x 1

    def test_full_run_via_cli(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        assert self.run_cli("run", "--config", str(config_path)) == 0
        manifest = json.loads(capsys.readouterr().out)
        assert manifest["status"] == "ok"
        assert len(manifest["stages"]) == 7

    def test_stats_command(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        assert self.run_cli("run", "--config", str(config_path)) == 0
        capsys.readouterr()
        assert self.run_cli("stats", "--config", str(config_path)) == 0
        out = capsys.readouterr().out
        assert "Dataset Name" in out
        assert (Path(small_config(tmp_path)["workdir"]) / "stats.csv").exists()

    def test_budget_eval_writes_curve_and_figure(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        items = tmp_path / "items.jsonl"
        write_jsonl(
            [
                {"id": "i1", "prompt": "Solve [natural:9000] [difficulty:128] [ref:3] within \\boxed{}.", "reference_answer": "3"},
                {"id": "i2", "prompt": "Solve [natural:9000] [difficulty:256] [ref:4] within \\boxed{}.", "reference_answer": "4"},
            ],
            items,
        )
        out_dir = tmp_path / "beval"
        code = self.run_cli(
            "budget-eval", "--config", str(config_path),
            "--items", str(items), "--out", str(out_dir),
            "--budgets", "128,256", "--attempts", "1",
        )
        assert code == 0
        curve = (out_dir / "curve.csv").read_text().splitlines()
        assert curve[0] == "budget,accuracy"
        assert curve[1] == "128,0.5"
        assert curve[2] == "256,1.0"
        assert (out_dir / "curve.png").exists()
        assert (out_dir / "transcripts.jsonl").exists()

    def test_budget_eval_no_forcing_baseline(self, tmp_path, capsys):
        config_path = write_config(tmp_path)
        items = tmp_path / "items.jsonl"
        write_jsonl(
            [{"id": "i1", "prompt": "Baseline [natural:33] [ref:3] within \\boxed{}.", "reference_answer": "3"}],
            items,
        )
        out_dir = tmp_path / "baseline"
        code = self.run_cli(
            "budget-eval", "--config", str(config_path),
            "--items", str(items), "--out", str(out_dir), "--no-forcing", "--attempts", "2",
        )
        assert code == 0
        summary = json.loads((out_dir / "baseline_summary.json").read_text())
        assert summary["reasoning_token_stats"]["mean"] == 33.0
