from __future__ import annotations

import pytest

from cotforge.core import InstructionRecord, LineageEntry, LineageStage, TaskType
from cotforge.tokenizer import WhitespaceTokenizer


@pytest.fixture
def tok():
    return WhitespaceTokenizer()


def make_instruction(
    text: str,
    task_type: TaskType = TaskType.OPEN_ENDED,
    topic_id: str = "t" * 32,
    stage: LineageStage = LineageStage.GENERATED,
) -> InstructionRecord:
    return InstructionRecord(
        text=text,
        task_type=task_type,
        topic_id=topic_id,
        lineage=(LineageEntry(stage=stage),),
    )
