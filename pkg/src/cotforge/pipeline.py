"""Pipeline configuration, orchestration, checkpointing, and export.

One run owns a working directory: every stage reads and writes JSONL
artifacts there, reports its input/output accounting into a manifest, and
checkpoints itself keyed by (stage name, config subtree, input hashes) so
interrupted runs resume without recomputing. Given a config, a seed, and
scripted fixtures, every output byte is determined.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .budget import BudgetSpec
from .core import (
    ConversationSample,
    DomainTag,
    InstructionRecord,
    TopicNode,
    canonical_json,
    read_jsonl,
    write_jsonl,
)
from .demo import demo_responder
from .filtering import (
    FilterConfig,
    MinHashConfig,
    NgramRule,
    ShingleConfig,
    DEFAULT_SEGMENTER,
    exact_dedup,
    extract_shingles,
    lsh_dedup,
    minhash_signature,
    ngram_filter,
    word_count_filter,
)
from .ingest import IngestSource, extract_questions
from .judge import (
    JudgeDecision,
    JudgeParseError,
    SelectionPolicy,
    raw_text_hash,
    score_sample,
    select,
    selection_report,
)
from .provider import HttpProvider, Provider, SamplingParams, ScriptedProvider, run_ordered
from .stats import compute_stats, render_stats_table, write_stats_csv
from .synthesis import (
    DialogueError,
    GenerationPlan,
    StageReport,
    expand_instructions,
    expand_topics,
    generate_dialogue,
    generate_instructions,
)
from .tokenizer import get_tokenizer

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _require_mapping(value: Any, context: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{context} must be a mapping")
    return value


def _check_keys(d: dict, allowed: set[str], context: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)} (allowed: {sorted(allowed)})")


@dataclass
class ProviderConfig:
    kind: str = "scripted"
    fixtures: str | None = None
    fallback: str = "demo"  # demo | error
    base_url: str = "http://localhost:8000/v1"
    model: str = ""
    max_in_flight: int = 4
    timeout: float = 120.0
    continuation: bool = False
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 16384

    @classmethod
    def from_mapping(cls, raw: Any) -> "ProviderConfig":
        d = _require_mapping(raw, "provider")
        _check_keys(
            d,
            {
                "kind", "fixtures", "fallback", "base_url", "model", "max_in_flight",
                "timeout", "continuation", "temperature", "top_p", "max_tokens",
            },
            "provider",
        )
        cfg = cls(**d)
        if cfg.kind not in ("scripted", "http"):
            raise ConfigError(f"provider.kind must be scripted or http, got {cfg.kind!r}")
        if cfg.fallback not in ("demo", "error"):
            raise ConfigError(f"provider.fallback must be demo or error, got {cfg.fallback!r}")
        if cfg.max_in_flight < 1:
            raise ConfigError("provider.max_in_flight must be >= 1")
        return cfg

    def sampling(self) -> SamplingParams:
        return SamplingParams(temperature=self.temperature, top_p=self.top_p, max_tokens=self.max_tokens)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "fixtures": self.fixtures,
            "fallback": self.fallback,
            "base_url": self.base_url,
            "model": self.model,
            "max_in_flight": self.max_in_flight,
            "timeout": self.timeout,
            "continuation": self.continuation,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }


@dataclass
class SynthesisConfig:
    fanout: int = 50  # sub-topics per seed; a config value, not a published constant
    templates_dir: str | None = None
    seeds_file: str | None = None
    target_seeds: list[str] = field(default_factory=list)
    general_seeds: list[str] = field(default_factory=list)
    plan: GenerationPlan = field(default_factory=GenerationPlan)

    @classmethod
    def from_mapping(cls, raw: Any) -> "SynthesisConfig":
        d = _require_mapping(raw, "synthesis")
        _check_keys(
            d,
            {"fanout", "templates_dir", "seeds_file", "target_seeds", "general_seeds", "plan"},
            "synthesis",
        )
        plan_raw = _require_mapping(d.get("plan"), "synthesis.plan")
        _check_keys(plan_raw, {"per_subtopic_counts", "expansion_variants", "max_turns"}, "synthesis.plan")
        plan_kwargs: dict[str, Any] = {}
        from .core import TaskType

        for key in ("per_subtopic_counts", "expansion_variants"):
            if key in plan_raw:
                base = dict(getattr(GenerationPlan(), key))
                for task_name, count in _require_mapping(plan_raw[key], f"synthesis.plan.{key}").items():
                    base[TaskType(task_name)] = int(count)
                plan_kwargs[key] = base
        if "max_turns" in plan_raw:
            plan_kwargs["max_turns"] = int(plan_raw["max_turns"])
        cfg = cls(
            fanout=int(d.get("fanout", 50)),
            templates_dir=d.get("templates_dir"),
            seeds_file=d.get("seeds_file"),
            target_seeds=list(d.get("target_seeds", [])),
            general_seeds=list(d.get("general_seeds", [])),
            plan=GenerationPlan(**plan_kwargs),
        )
        if cfg.fanout < 1:
            raise ConfigError("synthesis.fanout must be >= 1")
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {
            "fanout": self.fanout,
            "templates_dir": self.templates_dir,
            "seeds_file": self.seeds_file,
            "target_seeds": list(self.target_seeds),
            "general_seeds": list(self.general_seeds),
            "plan": self.plan.to_dict(),
        }


def filter_config_from_mapping(raw: Any, default_seed: int) -> FilterConfig:
    d = _require_mapping(raw, "filter")
    _check_keys(d, {"min_words", "ngram_rules", "shingle", "minhash", "dedup_with_ingested"}, "filter")
    kwargs: dict[str, Any] = {}
    if "min_words" in d:
        kwargs["min_words"] = int(d["min_words"])
    if "ngram_rules" in d:
        rules = []
        for rule in d["ngram_rules"]:
            rule = _require_mapping(rule, "filter.ngram_rules[]")
            _check_keys(rule, {"n", "metric", "threshold"}, "filter.ngram_rules[]")
            rules.append(NgramRule(n=int(rule["n"]), metric=rule["metric"], threshold=float(rule["threshold"])))
        kwargs["ngram_rules"] = tuple(rules)
    if "shingle" in d:
        sh = _require_mapping(d["shingle"], "filter.shingle")
        _check_keys(sh, {"unit", "width"}, "filter.shingle")
        kwargs["shingle"] = ShingleConfig(unit=sh.get("unit", "word"), width=int(sh.get("width", 5)))
    mh = _require_mapping(d.get("minhash"), "filter.minhash")
    _check_keys(mh, {"num_permutations", "jaccard_threshold", "bands", "rows", "seed"}, "filter.minhash")
    kwargs["minhash"] = MinHashConfig(
        num_permutations=int(mh.get("num_permutations", 128)),
        jaccard_threshold=float(mh.get("jaccard_threshold", 0.8)),
        bands=int(mh.get("bands", 16)),
        rows=int(mh.get("rows", 8)),
        seed=int(mh.get("seed", default_seed)),
    )
    if "dedup_with_ingested" in d:
        kwargs["dedup_with_ingested"] = bool(d["dedup_with_ingested"])
    try:
        return FilterConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"filter: {exc}") from exc


@dataclass
class JudgeConfig:
    policy: SelectionPolicy = SelectionPolicy()
    include_reasoning: bool = True

    @classmethod
    def from_mapping(cls, raw: Any) -> "JudgeConfig":
        d = _require_mapping(raw, "judge")
        _check_keys(d, {"policy", "include_reasoning"}, "judge")
        policy_raw = _require_mapping(d.get("policy"), "judge.policy")
        _check_keys(policy_raw, {"mode", "tau"}, "judge.policy")
        try:
            policy = SelectionPolicy(
                mode=policy_raw.get("mode", "all_max"),
                tau=float(policy_raw.get("tau", 4.5)),
            )
        except ValueError as exc:
            raise ConfigError(f"judge.policy: {exc}") from exc
        return cls(policy=policy, include_reasoning=bool(d.get("include_reasoning", True)))

    def to_dict(self) -> dict[str, Any]:
        return {"policy": self.policy.to_dict(), "include_reasoning": self.include_reasoning}


STAGE_NAMES = ("topics", "generate", "expand", "ingest", "filter", "dialogue", "judge", "export")


@dataclass
class StagesConfig:
    enabled: dict[str, bool] = field(default_factory=lambda: {name: True for name in STAGE_NAMES})

    @classmethod
    def from_mapping(cls, raw: Any) -> "StagesConfig":
        d = _require_mapping(raw, "stages")
        _check_keys(d, set(STAGE_NAMES), "stages")
        enabled = {name: True for name in STAGE_NAMES}
        for name, value in d.items():
            enabled[name] = bool(value)
        return cls(enabled=enabled)

    def to_dict(self) -> dict[str, Any]:
        return dict(self.enabled)


@dataclass
class ExportConfig:
    dataset_name: str = "synthesized"
    category: str = "general"

    @classmethod
    def from_mapping(cls, raw: Any) -> "ExportConfig":
        d = _require_mapping(raw, "export")
        _check_keys(d, {"dataset_name", "category"}, "export")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {"dataset_name": self.dataset_name, "category": self.category}


def budget_spec_from_mapping(raw: Any) -> BudgetSpec:
    d = _require_mapping(raw, "budget")
    _check_keys(
        d,
        {"budgets", "continuation_text", "finalize_text", "reasoning_end_token", "max_continuations", "attempts_per_item"},
        "budget",
    )
    kwargs: dict[str, Any] = {}
    if "budgets" in d:
        kwargs["budgets"] = tuple(int(b) for b in d["budgets"])
    for key in ("continuation_text", "finalize_text", "reasoning_end_token"):
        if key in d:
            kwargs[key] = str(d[key])
    for key in ("max_continuations", "attempts_per_item"):
        if key in d:
            kwargs[key] = int(d[key])
    try:
        return BudgetSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"budget: {exc}") from exc


@dataclass
class PipelineConfig:
    run_id: str = "run"
    seed: int = 0
    workdir: str = "cotforge_run"
    checkpoint_dir: str | None = None
    tokenizer: str = "whitespace"
    stages: StagesConfig = field(default_factory=StagesConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    ingest_sources: list[IngestSource] = field(default_factory=list)
    export: ExportConfig = field(default_factory=ExportConfig)
    budget: BudgetSpec = field(default_factory=BudgetSpec)

    TOP_KEYS = {
        "run_id", "seed", "workdir", "checkpoint_dir", "tokenizer", "stages",
        "provider", "synthesis", "filter", "judge", "ingest_sources", "export", "budget",
    }

    @classmethod
    def from_mapping(cls, raw: Any) -> "PipelineConfig":
        d = _require_mapping(raw, "config")
        _check_keys(d, cls.TOP_KEYS, "config")
        seed = int(d.get("seed", 0))
        sources = []
        for source_raw in d.get("ingest_sources", []) or []:
            source_raw = _require_mapping(source_raw, "ingest_sources[]")
            _check_keys(
                source_raw,
                {"name", "path", "question_field_path", "task_type", "category_tag", "max_records"},
                "ingest_sources[]",
            )
            try:
                sources.append(IngestSource.from_dict(source_raw))
            except ValueError as exc:
                raise ConfigError(f"ingest_sources: {exc}") from exc
        try:
            return cls(
                run_id=str(d.get("run_id", "run")),
                seed=seed,
                workdir=str(d.get("workdir", "cotforge_run")),
                checkpoint_dir=d.get("checkpoint_dir"),
                tokenizer=str(d.get("tokenizer", "whitespace")),
                stages=StagesConfig.from_mapping(d.get("stages")),
                provider=ProviderConfig.from_mapping(d.get("provider")),
                synthesis=SynthesisConfig.from_mapping(d.get("synthesis")),
                filter=filter_config_from_mapping(d.get("filter"), default_seed=seed),
                judge=JudgeConfig.from_mapping(d.get("judge")),
                ingest_sources=sources,
                export=ExportConfig.from_mapping(d.get("export")),
                budget=budget_spec_from_mapping(d.get("budget")),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_mapping(raw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "workdir": self.workdir,
            "checkpoint_dir": self.checkpoint_dir,
            "tokenizer": self.tokenizer,
            "stages": self.stages.to_dict(),
            "provider": self.provider.to_dict(),
            "synthesis": self.synthesis.to_dict(),
            "filter": self.filter.to_dict(),
            "judge": self.judge.to_dict(),
            "ingest_sources": [s.to_dict() for s in self.ingest_sources],
            "export": self.export.to_dict(),
            "budget": self.budget.to_dict(),
        }

    def semantic_dict(self) -> dict[str, Any]:
        """Config content that determines outputs: run-local paths and
        throughput knobs are excluded so equivalent runs hash identically."""
        d = self.to_dict()
        d.pop("workdir")
        d.pop("checkpoint_dir")
        d["provider"] = {
            k: v for k, v in d["provider"].items() if k not in ("max_in_flight", "timeout")
        }
        return d

    def config_hash(self) -> str:
        return hashlib.blake2b(canonical_json(self.semantic_dict()).encode("utf-8"), digest_size=16).hexdigest()


def build_provider(config: ProviderConfig, tokenizer) -> Provider:
    if config.kind == "scripted":
        fallback = demo_responder if config.fallback == "demo" else None
        return ScriptedProvider(fixtures=config.fixtures, tokenizer=tokenizer, fallback=fallback)
    return HttpProvider(
        base_url=config.base_url,
        model=config.model,
        timeout=config.timeout,
        continuation=config.continuation,
    )


def _file_hash(path: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(payload: dict[str, Any], path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class PipelineRunner:
    """Executes enabled stages in pipeline order within one working directory."""

    def __init__(self, config: PipelineConfig, resume: bool = False):
        self.config = config
        self.resume = resume
        self.workdir = Path(config.workdir)
        self.ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else self.workdir / "checkpoints"
        self.reports_dir = self.workdir / "reports"
        self.tokenizer = get_tokenizer(config.tokenizer)
        self.provider = build_provider(config.provider, self.tokenizer)
        self.sampling = config.provider.sampling()
        self.workers = config.provider.max_in_flight
        self.paths = {
            "topics": self.workdir / "topics.jsonl",
            "generated": self.workdir / "instructions_generated.jsonl",
            "expanded": self.workdir / "instructions_expanded.jsonl",
            "ingested": self.workdir / "ingested.jsonl",
            "ingest_topics": self.workdir / "ingest_topics.jsonl",
            "filtered": self.workdir / "instructions_filtered.jsonl",
            "samples": self.workdir / "samples.jsonl",
            "kept": self.workdir / "samples_kept.jsonl",
            "dataset": self.workdir / "dataset.jsonl",
            "stats_csv": self.workdir / "stats.csv",
            "stats_txt": self.workdir / "stats.txt",
            "stats_png": self.workdir / "stats.png",
        }

    def _rel(self, path: Path) -> str:
        return path.relative_to(self.workdir).as_posix()

    def _stage_sequence(self) -> list[tuple[str, Callable[[], dict[str, Any]], list[Path], list[Path], dict[str, Any]]]:
        cfg = self.config
        sequence: list[tuple[str, Callable[[], dict[str, Any]], list[Path], list[Path], dict[str, Any]]] = [
            ("topics", self._run_topics, [], [self.paths["topics"]], cfg.synthesis.to_dict()),
            ("generate", self._run_generate, [self.paths["topics"]], [self.paths["generated"]], cfg.synthesis.to_dict()),
            ("expand", self._run_expand, [self.paths["generated"]], [self.paths["expanded"]], cfg.synthesis.to_dict()),
        ]
        if cfg.ingest_sources and cfg.stages.enabled.get("ingest", True):
            sequence.append(
                (
                    "ingest",
                    self._run_ingest,
                    [Path(s.path) for s in cfg.ingest_sources],
                    [self.paths["ingested"], self.paths["ingest_topics"]],
                    {"sources": [s.to_dict() for s in cfg.ingest_sources]},
                )
            )
        filter_inputs = [self.paths["expanded"]]
        if cfg.ingest_sources and cfg.stages.enabled.get("ingest", True):
            filter_inputs.append(self.paths["ingested"])
        sequence.extend(
            [
                ("filter", self._run_filter, filter_inputs, [self.paths["filtered"]], cfg.filter.to_dict()),
                ("dialogue", self._run_dialogue, [self.paths["filtered"]], [self.paths["samples"]], cfg.synthesis.plan.to_dict()),
                ("judge", self._run_judge, [self.paths["samples"]], [self.paths["kept"]], cfg.judge.to_dict()),
                ("export", self._run_export, [self.paths["kept"]], [self.paths["dataset"], self.paths["stats_csv"]], cfg.export.to_dict()),
            ]
        )
        return sequence

    def run(self) -> dict[str, Any]:
        """Execute the pipeline; returns the manifest (also written to disk)."""
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        lock_path = self.workdir / ".lock"
        try:
            lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory is locked by another run: {lock_path}") from None
        os.write(lock_fd, str(os.getpid()).encode())
        os.close(lock_fd)

        manifest: dict[str, Any] = {
            "run_id": self.config.run_id,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "status": "ok",
            "stages": [],
        }
        try:
            for name, fn, inputs, outputs, cfg_subtree in self._stage_sequence():
                entry = self._run_stage(name, fn, inputs, outputs, cfg_subtree)
                manifest["stages"].append(entry)
                if entry["status"] == "failed":
                    manifest["status"] = "failed"
                    manifest["failed_stage"] = name
                    break
        finally:
            _write_json(manifest, self.workdir / "manifest.json")
            lock_path.unlink(missing_ok=True)
        if manifest["status"] == "failed":
            raise StageFailure(manifest["failed_stage"], RuntimeError(manifest["stages"][-1].get("error", "")))
        return manifest

    def _run_stage(
        self,
        name: str,
        fn: Callable[[], dict[str, Any]],
        inputs: list[Path],
        outputs: list[Path],
        cfg_subtree: dict[str, Any],
    ) -> dict[str, Any]:
        if not self.config.stages.enabled.get(name, True):
            return self._pass_through(name, inputs, outputs)
        missing = [p for p in inputs if not p.exists()]
        if missing:
            return {
                "name": name,
                "status": "failed",
                "error": f"missing inputs: {[str(p) for p in missing]}",
            }
        key_payload = {
            "stage": name,
            "config": cfg_subtree,
            "seed": self.config.seed,
            "tokenizer": self.config.tokenizer,
            "inputs": [_file_hash(p) for p in inputs],
        }
        key = hashlib.blake2b(canonical_json(key_payload).encode("utf-8"), digest_size=16).hexdigest()
        ckpt_path = self.ckpt_dir / f"{name}.json"
        if self.resume and ckpt_path.exists():
            ckpt = json.loads(ckpt_path.read_text(encoding="utf-8"))
            if ckpt.get("key") == key and all(p.exists() for p in outputs):
                logger.info("stage %s: valid checkpoint, skipping", name)
                entry = dict(ckpt["entry"])
                entry["status"] = "skipped"
                return entry
        logger.info("stage %s: running", name)
        try:
            entry = fn()
        except Exception as exc:  # stage failures halt the run after flushing
            logger.exception("stage %s failed", name)
            return {"name": name, "status": "failed", "error": str(exc)}
        entry.setdefault("name", name)
        entry.setdefault("status", "ok")
        _write_json({"key": key, "entry": entry}, ckpt_path)
        return entry

    def _pass_through(self, name: str, inputs: list[Path], outputs: list[Path]) -> dict[str, Any]:
        # A disabled same-shape stage copies its input through unchanged so
        # downstream stages and the manifest still reconcile.
        if len(inputs) == 1 and len(outputs) >= 1 and inputs[0].exists():
            shutil.copyfile(inputs[0], outputs[0])
            count = sum(1 for _ in read_jsonl(outputs[0]))
            return {
                "name": name,
                "status": "disabled",
                "input_count": count,
                "output_count": count,
                "dropped": 0,
                "artifacts": [self._rel(outputs[0])],
            }
        return {"name": name, "status": "disabled", "input_count": 0, "output_count": 0, "dropped": 0, "artifacts": []}

    # ---- stages ----

    def _load_seeds(self) -> list[TopicNode]:
        cfg = self.config.synthesis
        seeds: list[TopicNode] = []
        if cfg.seeds_file:
            for row in read_jsonl(cfg.seeds_file):
                seeds.append(TopicNode(text=row["text"], domain_tag=DomainTag(row["domain_tag"])))
        for text in cfg.target_seeds:
            seeds.append(TopicNode(text=text, domain_tag=DomainTag.TARGET))
        for text in cfg.general_seeds:
            seeds.append(TopicNode(text=text, domain_tag=DomainTag.GENERAL))
        return seeds

    def _run_topics(self) -> dict[str, Any]:
        cfg = self.config.synthesis
        seeds = self._load_seeds()
        report = StageReport(stage="topics")
        subtopics = expand_topics(
            seeds,
            self.provider,
            fanout=cfg.fanout,
            templates_dir=cfg.templates_dir,
            sampling=self.sampling,
            max_workers=self.workers,
            report=report,
        )
        write_jsonl(seeds + subtopics, self.paths["topics"])
        self._write_report(report)
        return {
            "name": "topics",
            "input_count": len(seeds),
            "output_count": len(subtopics),
            "dropped": 0,
            "artifacts": [self._rel(self.paths["topics"])],
        }

    def _run_generate(self) -> dict[str, Any]:
        cfg = self.config.synthesis
        nodes = list(read_jsonl(self.paths["topics"], model=TopicNode))
        subtopics = [n for n in nodes if n.depth >= 1]
        report = StageReport(stage="generate")
        records = generate_instructions(
            subtopics,
            cfg.plan,
            self.provider,
            templates_dir=cfg.templates_dir,
            sampling=self.sampling,
            max_workers=self.workers,
            report=report,
        )
        write_jsonl(records, self.paths["generated"])
        self._write_report(report)
        return {
            "name": "generate",
            "input_count": len(subtopics),
            "output_count": len(records),
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "requested": report.extra.get("requested", 0),
            "artifacts": [self._rel(self.paths["generated"])],
        }

    def _run_expand(self) -> dict[str, Any]:
        cfg = self.config.synthesis
        records = list(read_jsonl(self.paths["generated"], model=InstructionRecord))
        report = StageReport(stage="expand")
        expanded = expand_instructions(
            records,
            cfg.plan,
            self.provider,
            templates_dir=cfg.templates_dir,
            sampling=self.sampling,
            max_workers=self.workers,
            report=report,
        )
        write_jsonl(expanded, self.paths["expanded"])
        self._write_report(report)
        return {
            "name": "expand",
            "input_count": len(records),
            "output_count": len(expanded),
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "artifacts": [self._rel(self.paths["expanded"])],
        }

    def _run_ingest(self) -> dict[str, Any]:
        report = StageReport(stage="ingest")
        topics = []
        records = []
        for source in self.config.ingest_sources:
            topic, extracted = extract_questions(source, report=report)
            topics.append(topic)
            records.extend(extracted)
        write_jsonl(records, self.paths["ingested"])
        write_jsonl(topics, self.paths["ingest_topics"])
        self._write_report(report)
        return {
            "name": "ingest",
            "input_count": report.input_count,
            "output_count": report.output_count,
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "per_source": report.extra.get("per_source", {}),
            "artifacts": [self._rel(self.paths["ingested"]), self._rel(self.paths["ingest_topics"])],
        }

    def _run_filter(self) -> dict[str, Any]:
        cfg = self.config.filter
        records = list(read_jsonl(self.paths["expanded"], model=InstructionRecord))
        if self.paths["ingested"].exists() and self.config.ingest_sources:
            records.extend(read_jsonl(self.paths["ingested"], model=InstructionRecord))
        report = StageReport(stage="filter")
        report.input_count = len(records)
        drop_rows: list[dict[str, Any]] = []

        # Exact-id duplicates collapse first: identical content is one record.
        seen_ids: set[str] = set()
        unique_records: list[InstructionRecord] = []
        for record in records:
            if record.id in seen_ids:
                report.drop("exact_duplicate")
                continue
            seen_ids.add(record.id)
            unique_records.append(record)

        def decide(record: InstructionRecord):
            decision = word_count_filter(record, cfg, DEFAULT_SEGMENTER)
            if decision.keep:
                decision, _metrics = ngram_filter(record, cfg, DEFAULT_SEGMENTER)
            return decision

        decisions = run_ordered(decide, unique_records, self.workers)
        survivors: list[InstructionRecord] = []
        for record, decision in zip(unique_records, decisions):
            if decision.keep:
                survivors.append(record)
            else:
                report.drop(decision.rule or "unknown")
                drop_rows.append(
                    {
                        "record_id": record.id,
                        "stage": "filter",
                        "rule": decision.rule,
                        "metric_value": decision.metric_value,
                        "threshold": decision.threshold,
                    }
                )

        def signature_or_none(record: InstructionRecord):
            shingle_set = extract_shingles(record.text, cfg.shingle, DEFAULT_SEGMENTER)
            if not shingle_set:
                return None
            return minhash_signature(record.id, sorted(shingle_set), cfg.minhash)

        signatures = run_ordered(signature_or_none, survivors, self.workers)
        groups: dict[str, tuple[list, list]] = {}
        for record, signature in zip(survivors, signatures):
            scope = "all" if cfg.dedup_with_ingested else ("ingested" if record.is_ingested else "synthesized")
            sigs, shorts = groups.setdefault(scope, ([], []))
            if signature is None:
                shorts.append((record.id, record.text))
            else:
                sigs.append(signature)

        survivor_ids: set[str] = set()
        cluster_rows: list[dict[str, Any]] = []
        for scope in sorted(groups):
            sigs, shorts = groups[scope]
            fuzzy = lsh_dedup(sigs, cfg.minhash)
            exact = exact_dedup(shorts)
            survivor_ids |= fuzzy.survivors | exact.survivors
            cluster_rows.extend(fuzzy.clusters + exact.clusters)
        cluster_rows.sort(key=lambda row: row["survivor_id"])
        duplicates_removed = sum(len(c["member_ids"]) - 1 for c in cluster_rows)
        if duplicates_removed:
            report.drop("duplicate", duplicates_removed)

        kept = [record for record in survivors if record.id in survivor_ids]
        report.output_count = len(kept)
        write_jsonl(kept, self.paths["filtered"])
        write_jsonl(drop_rows, self.reports_dir / "filter_drops.jsonl")
        write_jsonl(cluster_rows, self.reports_dir / "dedup_clusters.jsonl")
        self._write_report(report)
        return {
            "name": "filter",
            "input_count": report.input_count,
            "output_count": report.output_count,
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "artifacts": [
                self._rel(self.paths["filtered"]),
                self._rel(self.reports_dir / "filter_drops.jsonl"),
                self._rel(self.reports_dir / "dedup_clusters.jsonl"),
            ],
        }

    def _run_dialogue(self) -> dict[str, Any]:
        cfg = self.config.synthesis
        records = list(read_jsonl(self.paths["filtered"], model=InstructionRecord))
        report = StageReport(stage="dialogue")
        report.input_count = len(records)

        def one(record: InstructionRecord):
            try:
                return generate_dialogue(
                    record, cfg.plan, self.provider, templates_dir=cfg.templates_dir, sampling=self.sampling
                )
            except DialogueError:
                return None

        results = run_ordered(one, records, self.workers)
        samples = []
        for result in results:
            if result is None:
                report.drop("dialogue_failed")
            else:
                samples.append(result)
        report.output_count = len(samples)
        write_jsonl(samples, self.paths["samples"])
        self._write_report(report)
        return {
            "name": "dialogue",
            "input_count": report.input_count,
            "output_count": report.output_count,
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "artifacts": [self._rel(self.paths["samples"])],
        }

    def _run_judge(self) -> dict[str, Any]:
        cfg = self.config.judge
        samples = list(read_jsonl(self.paths["samples"], model=ConversationSample))
        report = StageReport(stage="judge")
        report.input_count = len(samples)

        def one(sample: ConversationSample):
            try:
                scores, raw = score_sample(
                    sample,
                    self.provider,
                    templates_dir=self.config.synthesis.templates_dir,
                    include_reasoning=cfg.include_reasoning,
                    sampling=self.sampling,
                )
            except JudgeParseError as exc:
                return JudgeDecision(
                    sample_id=sample.id,
                    kept=False,
                    reason="judge_parse_failure",
                    raw_text_hash=raw_text_hash(exc.raw_text),
                ), exc.raw_text
            kept = select(scores, cfg.policy)
            return JudgeDecision(
                sample_id=sample.id,
                kept=kept,
                scores=scores,
                reason=None if kept else "low_score",
                raw_text_hash=raw_text_hash(raw),
            ), raw

        outcomes = run_ordered(one, samples, self.workers)
        decisions = [d for d, _raw in outcomes]
        kept_samples = [s for s, (d, _raw) in zip(samples, outcomes) if d.kept]
        raw_rows = []
        seen_hashes: set[str] = set()
        for decision, raw in outcomes:
            if decision.raw_text_hash and decision.raw_text_hash not in seen_hashes:
                seen_hashes.add(decision.raw_text_hash)
                raw_rows.append({"hash": decision.raw_text_hash, "text": raw})
        summary = selection_report(decisions)
        report.output_count = summary.kept
        if summary.dropped_low_score:
            report.drop("low_score", summary.dropped_low_score)
        if summary.dropped_unjudgeable:
            report.drop("judge_parse_failure", summary.dropped_unjudgeable)

        audit_rows = [
            {**d.to_dict(), "policy": cfg.policy.to_dict()}
            for d in decisions
        ]
        write_jsonl(kept_samples, self.paths["kept"])
        write_jsonl(audit_rows, self.reports_dir / "judge_audit.jsonl")
        write_jsonl(raw_rows, self.reports_dir / "judge_raw.jsonl")
        self._write_report(report)
        return {
            "name": "judge",
            "input_count": report.input_count,
            "output_count": report.output_count,
            "dropped": report.dropped,
            "reasons": dict(sorted(report.reasons.items())),
            "selection": summary.to_dict(),
            "artifacts": [
                self._rel(self.paths["kept"]),
                self._rel(self.reports_dir / "judge_audit.jsonl"),
                self._rel(self.reports_dir / "judge_raw.jsonl"),
            ],
        }

    def _attribution(self, sample: ConversationSample) -> tuple[str, str]:
        if sample.source.value == "ingested":
            record = self._instruction_index.get(sample.instruction_id)
            if record is not None:
                topic_text = self._ingest_topic_names.get(record.topic_id, "")
                name = topic_text.removeprefix("ingest:") if topic_text else "ingested"
                category = self._source_categories.get(name, "other")
                return name, category
            return "ingested", "other"
        return self.config.export.dataset_name, self.config.export.category

    def _run_export(self) -> dict[str, Any]:
        samples = list(read_jsonl(self.paths["kept"], model=ConversationSample))
        self._instruction_index = {}
        if self.paths["filtered"].exists():
            self._instruction_index = {
                r.id: r for r in read_jsonl(self.paths["filtered"], model=InstructionRecord)
            }
        self._ingest_topic_names = {}
        if self.paths["ingest_topics"].exists():
            self._ingest_topic_names = {
                t.id: t.text for t in read_jsonl(self.paths["ingest_topics"], model=TopicNode)
            }
        self._source_categories = {s.name: s.category_tag.value for s in self.config.ingest_sources}

        entries = [(*self._attribution(sample), sample) for sample in samples]
        stats = compute_stats(entries, self.tokenizer)
        count = write_jsonl(samples, self.paths["dataset"])
        write_stats_csv(stats, self.paths["stats_csv"])
        self.paths["stats_txt"].write_text(render_stats_table(stats) + "\n", encoding="utf-8")
        from .plotting import save_stats_figure

        save_stats_figure(stats, self.paths["stats_png"])
        return {
            "name": "export",
            "input_count": len(samples),
            "output_count": count,
            "dropped": 0,
            "artifacts": [
                self._rel(self.paths["dataset"]),
                self._rel(self.paths["stats_csv"]),
                self._rel(self.paths["stats_txt"]),
                self._rel(self.paths["stats_png"]),
            ],
        }

    def _write_report(self, report: StageReport) -> None:
        write_jsonl([report.to_dict()], self.reports_dir / f"{report.stage}_report.jsonl")
