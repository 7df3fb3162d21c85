"""cotforge: synthesize, filter, and quality-gate instruction datasets with
reasoning traces, plus a reasoning-budget evaluation harness."""

from .core import (
    ConversationSample,
    DomainTag,
    InstructionRecord,
    LineageEntry,
    LineageStage,
    ModificationKind,
    Role,
    SampleSource,
    TaskType,
    TokenStats,
    TopicNode,
    Turn,
    compute_id,
    read_jsonl,
    write_jsonl,
)
from .pipeline import PipelineConfig, PipelineRunner

__version__ = "0.1.0"

__all__ = [
    "ConversationSample",
    "DomainTag",
    "InstructionRecord",
    "LineageEntry",
    "LineageStage",
    "ModificationKind",
    "PipelineConfig",
    "PipelineRunner",
    "Role",
    "SampleSource",
    "TaskType",
    "TokenStats",
    "TopicNode",
    "Turn",
    "compute_id",
    "read_jsonl",
    "write_jsonl",
]
