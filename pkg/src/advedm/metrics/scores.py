"""Attack outcome metrics: semantic similarity, preservation rate, success.

* semantic similarity: cosine between text embeddings of the clean and the
  adversarial description,
* preservation rate: the fraction of clean-description objects still present
  in the adversarial description,
* success: the target object disappears (removal) or appears (addition).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from advedm._ops import cosine
from advedm.errors import JudgeError, UndefinedMetricError
from advedm.metrics.judge import ObjectSet, OfflineJudge

logger = logging.getLogger(__name__)

MODES = ("removal", "addition")


def semantic_similarity(text_a: str, text_b: str, text_encoder) -> float:
    if not text_a.strip() or not text_b.strip():
        raise ValueError("semantic similarity needs two non-empty texts")
    if text_a == text_b:
        return 1.0
    return float(cosine(text_encoder.encode_text(text_a), text_encoder.encode_text(text_b)))


def extract_objects(text: str, judge=None, extra_labels: Iterable[str] = (), fallback=None) -> ObjectSet:
    """Objects named in ``text``.

    A failing remote judge is replaced by ``fallback`` (the offline judge by
    default); the returned set then has ``source == "offline-fallback"``.
    """
    judge = judge or OfflineJudge()
    try:
        return judge.extract(text, extra_labels=extra_labels)
    except JudgeError as e:
        logger.warning("judge %s failed (%s); using offline lexicon", getattr(judge, "name", judge), e)
        found = (fallback or OfflineJudge()).extract(text, extra_labels=extra_labels)
        return ObjectSet(found.labels, "offline-fallback")


def _labels(objects) -> frozenset:
    return objects.labels if isinstance(objects, ObjectSet) else frozenset(objects)


def spr(objects_clean, objects_adv) -> float:
    """|clean & adversarial| / |clean|."""
    clean = _labels(objects_clean)
    if not clean:
        raise UndefinedMetricError("preservation rate is undefined for an empty clean object set")
    return len(clean & _labels(objects_adv)) / len(clean)


@dataclass
class JudgeReport:
    objects_clean: ObjectSet
    objects_adv: ObjectSet
    spr: float | None
    ss: float
    success: bool
    mode: str
    target: str = ""
    fallback: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_clean"] = sorted(self.objects_clean.labels)
        d["objects_adv"] = sorted(self.objects_adv.labels)
        return d


def judge_attack(
    clean_text: str,
    adv_text: str,
    target: str,
    mode: str,
    judge=None,
    text_encoder=None,
    exclude_target: bool = True,
) -> JudgeReport:
    """Score one clean/adversarial description pair.

    In removal mode the target must appear in the clean description and the
    attack succeeds when it is gone from the adversarial one; addition is the
    mirror image.  With ``exclude_target`` the removal preservation rate is
    computed over the clean objects other than the target.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not clean_text.strip() or not adv_text.strip():
        raise ValueError("clean and adversarial texts must be non-empty")
    if text_encoder is None:
        raise ValueError("a text encoder is required for semantic similarity")
    judge = judge or OfflineJudge()
    label = judge.canonical(target)
    clean = extract_objects(clean_text, judge, extra_labels=[target])
    adv = extract_objects(adv_text, judge, extra_labels=[target])
    if mode == "removal":
        if label not in clean:
            raise ValueError(f"removal target {label!r} is not in the clean description")
        success = label not in adv
        kept = clean.labels - {label} if exclude_target else clean.labels
    else:
        if label in clean:
            raise ValueError(f"addition target {label!r} is already in the clean description")
        success = label in adv
        kept = clean.labels
    rate = spr(kept, adv) if kept else None
    return JudgeReport(
        objects_clean=clean,
        objects_adv=adv,
        spr=rate,
        ss=semantic_similarity(clean_text, adv_text, text_encoder),
        success=success,
        mode=mode,
        target=label,
        fallback="fallback" in clean.source or "fallback" in adv.source,
    )


@dataclass
class Summary:
    """ASR and SPR in percent, SS as a raw cosine."""

    n: int
    asr: float
    spr: float | None
    ss: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return sum(vals) / len(vals) if vals else None


def aggregate(reports: Sequence[JudgeReport]) -> Summary:
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    successes = sum(1 for r in reports if r.success)
    mean_spr = _mean(r.spr for r in reports)
    return Summary(
        n=len(reports),
        asr=100.0 * successes / len(reports),
        spr=None if mean_spr is None else 100.0 * mean_spr,
        ss=_mean(r.ss for r in reports),
    )


def format_table(rows: dict, models: Sequence[str] | None = None) -> str:
    """Plain-text results table, one block of ASR(%) / SPR(%) / SS per model.

    ``rows`` maps attack name to ``{model: Summary}``.  An ``Average`` block
    is appended when more than one model is present.
    """
    if models is None:
        seen: dict[str, None] = {}
        for per_model in rows.values():
            seen.update(dict.fromkeys(per_model))
        models = list(seen)
    blocks = list(models) + (["Average"] if len(models) > 1 else [])
    head1 = ["Attack"] + [name for m in blocks for name in (m, "", "")]
    head2 = [""] + ["ASR(%)", "SPR(%)", "SS"] * len(blocks)
    body = []
    for attack, per_model in rows.items():
        cells = [attack]
        for m in blocks:
            if m == "Average":
                present = [per_model[x] for x in models if x in per_model]
                s = Summary(
                    n=sum(p.n for p in present),
                    asr=_mean(p.asr for p in present) or 0.0,
                    spr=_mean(p.spr for p in present),
                    ss=_mean(p.ss for p in present),
                )
            else:
                s = per_model.get(m)
            if s is None:
                cells += ["-", "-", "-"]
                continue
            cells += [
                f"{s.asr:.1f}",
                "-" if s.spr is None else f"{s.spr:.1f}",
                "-" if s.ss is None else f"{s.ss:.3f}",
            ]
        body.append(cells)
    table = [head1, head2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(head1))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)
