from advedm.metrics.judge import Lexicon, ObjectSet, OfflineJudge, default_lexicon
from advedm.metrics.remote import RemoteJudge
from advedm.metrics.scores import (
    JudgeReport,
    Summary,
    aggregate,
    extract_objects,
    format_table,
    judge_attack,
    semantic_similarity,
    spr,
)

__all__ = [
    "JudgeReport",
    "Lexicon",
    "ObjectSet",
    "OfflineJudge",
    "RemoteJudge",
    "Summary",
    "aggregate",
    "default_lexicon",
    "extract_objects",
    "format_table",
    "judge_attack",
    "semantic_similarity",
    "spr",
]
