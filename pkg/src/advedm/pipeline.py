"""Batch drivers behind the command line: attack, evaluate, ablate, report."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from advedm.addition import prepare_reference, resize_image, run_addition_attack
from advedm.diagnostics import attack_readout
from advedm.encoders.base import VisionTextEncoder
from advedm.encoders.registry import create_encoder
from advedm.errors import ManifestError
from advedm.metrics.judge import OfflineJudge
from advedm.metrics.scores import Summary, aggregate, format_table, judge_attack
from advedm.optim import AttackConfig, AttackResult
from advedm.removal import run_removal_attack
from advedm.runio import (
    ManifestEntry,
    RunRecord,
    RunStore,
    format_budget,
    load_png,
    quantize,
    read_json,
    residual,
    resolve_config,
    save_mask,
    save_png,
    trace_to_list,
    write_json,
)
from advedm.transfer import EnsembleSpec, run_transfer_attack

logger = logging.getLogger(__name__)

DEFAULT_EPSILON_GRID = (4 / 255, 8 / 255, 12 / 255, 16 / 255)
TERM_TOGGLES = {"full": (1, 1, 1), "no_cls": (0, 1, 1), "no_p": (1, 0, 1), "no_fix": (1, 1, 0)}


def load_entry_image(path, encoder: VisionTextEncoder) -> np.ndarray:
    """Load an image and bring it to the encoder's input resolution."""
    return resize_image(load_png(path), encoder.descriptor.input_resolution)


def attack_entry(
    entry: ManifestEntry,
    encoder: VisionTextEncoder,
    config: AttackConfig,
    ensemble: EnsembleSpec | None = None,
    ensemble_encoders=None,
) -> tuple[np.ndarray, AttackResult]:
    image = load_entry_image(entry.image_path, encoder)
    if entry.foreground:
        config = config.with_(foreground=entry.foreground)
    if ensemble is not None:
        reference = None
        if entry.mode == "addition":
            reference = entry.reference_path
        result = run_transfer_attack(
            image,
            entry.mode,
            entry.target_object,
            ensemble,
            config,
            encoders=ensemble_encoders,
            reference=reference,
            region=entry.region,
        )
        return image, result
    if entry.mode == "removal":
        return image, run_removal_attack(image, entry.target_object, config, encoder)
    m = entry.region.m if entry.region is not None else None
    if m is None:
        from advedm.addition import injection_window_size

        m = injection_window_size(config, encoder)
    reference = prepare_reference(entry.reference_path, m, encoder)
    return image, run_addition_attack(image, reference, entry.target_object, entry.region, config, encoder)


def _process(entry, encoder, file_config, overrides, store, ensemble, ensemble_encoders):
    config = resolve_config(entry.mode, file_config, overrides)
    rec = {
        "id": entry.entry_id,
        "image": str(entry.image_path),
        "target": entry.target_object,
        "mode": entry.mode,
        "config": config.to_dict(),
    }
    try:
        image, result = attack_entry(entry, encoder, config, ensemble, ensemble_encoders)
        if result.aborted:
            raise FloatingPointError(result.diagnostic)
        saved = quantize(result.adversarial, image, config.epsilon, config.norm_mode)
        adv_path = store.file("images", f"{entry.entry_id}_adv.png")
        save_png(saved, adv_path)
        save_png(image, store.file("images", f"{entry.entry_id}_clean.png"))
        mask_path = store.file("masks", f"{entry.entry_id}.json")
        save_mask(result.mask, mask_path, result.region, {"alpha": config.alpha, "beta": config.beta})
        trace_path = store.file("traces", f"{entry.entry_id}.json")
        write_json(trace_path, trace_to_list(result))
        rec.update(
            status="ok",
            adversarial=store.relative(adv_path),
            mask=store.relative(mask_path),
            trace=store.relative(trace_path),
            residual=result.residual,
            residual_saved=residual(saved, image, config.norm_mode),
            epsilon=config.epsilon,
            iterations_run=result.iterations_run,
            best_iteration=result.best_iteration,
            best_loss=result.best_loss,
            readout=attack_readout(encoder, image, saved, entry.target_object, result.mask),
        )
    except Exception as e:  # one bad entry must not stop the batch
        logger.error("entry %s failed: %s", entry.entry_id, e)
        logger.debug("entry %s traceback", entry.entry_id, exc_info=True)
        rec.update(status="error", error=f"{type(e).__name__}: {e}")
    return rec


def check_entries(entries: list[ManifestEntry], file_config: dict | None, overrides: dict | None) -> None:
    """Reject entries whose settings cannot work, before any attack starts."""
    if not entries:
        raise ManifestError("manifest has no entries")
    for entry in entries:
        config = resolve_config(entry.mode, file_config, overrides)
        if entry.mode == "addition" and entry.region is None and not (entry.foreground or config.foreground):
            raise ManifestError(
                f"entry {entry.entry_id}: addition needs a region or foreground labels to place the window"
            )


def run_manifest(
    entries: list[ManifestEntry],
    encoder: VisionTextEncoder,
    store: RunStore,
    file_config: dict | None = None,
    overrides: dict | None = None,
    workers: int = 1,
) -> RunRecord:
    """Attack every manifest entry and persist images, masks and traces."""
    check_entries(entries, file_config, overrides)
    file_config = dict(file_config or {})
    ensemble = None
    ensemble_encoders = None
    if file_config.get("ensemble"):
        ensemble = EnsembleSpec(**file_config["ensemble"])
        ensemble_encoders = [create_encoder(i) for i in ensemble.encoder_ids]
    store.create()
    start = time.perf_counter()

    def work(entry):
        return _process(entry, encoder, file_config, overrides, store, ensemble, ensemble_encoders)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]
    record = RunRecord(
        run_id=store.run_id,
        config={"file": file_config, "overrides": {k: v for k, v in (overrides or {}).items() if v is not None}},
        encoder=encoder.descriptor.identifier,
        entries=results,
        timing={"seconds": time.perf_counter() - start, "workers": workers},
    )
    store.save_record(record)
    return record


def run_failed(record: RunRecord) -> bool:
    return any(e.get("status") != "ok" for e in record.entries)


# evaluation


def evaluate_pairs(
    pairs: list[dict],
    text_encoder,
    judge=None,
    exclude_target: bool = True,
) -> tuple[list[dict], dict]:
    """Judge clean/adversarial description pairs.

    Each pair needs ``clean``, ``adversarial``, ``target`` and ``mode``.
    Returns per-pair report dicts and the summary dict.
    """
    judge = judge or OfflineJudge()
    reports, good = [], []
    for i, pair in enumerate(pairs):
        row = {"id": str(pair.get("id", i)), "target": pair.get("target"), "mode": pair.get("mode")}
        try:
            clean, adv = pair.get("clean"), pair.get("adversarial")
            if not clean or not adv:
                raise ValueError("missing clean or adversarial text")
            rep = judge_attack(clean, adv, pair["target"], pair["mode"], judge, text_encoder, exclude_target)
            row.update(status="ok", **rep.to_dict())
            good.append(rep)
        except Exception as e:
            row.update(status="error", error=f"{type(e).__name__}: {e}")
        reports.append(row)
    summary = {"n_pairs": len(pairs), "n_scored": len(good)}
    if good:
        summary["overall"] = aggregate(good).to_dict()
        summary["by_mode"] = {
            mode: aggregate([r for r in good if r.mode == mode]).to_dict()
            for mode in ("removal", "addition")
            if any(r.mode == mode for r in good)
        }
    return reports, summary


def pairs_for_run(record: RunRecord, texts: list[dict]) -> list[dict]:
    """Attach run entries' target and mode to caller-supplied texts by id."""
    by_id = {str(t.get("id")): t for t in texts}
    pairs = []
    for entry in record.entries:
        t = by_id.get(str(entry["id"]), {})
        pairs.append(
            {
                "id": entry["id"],
                "target": t.get("target", entry["target"]),
                "mode": t.get("mode", entry["mode"]),
                "clean": t.get("clean"),
                "adversarial": t.get("adversarial"),
            }
        )
    return pairs


def write_evaluation(out_dir, reports, summary, attack_label=None, model_label="model") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = dict(summary, attack=attack_label, model=model_label)
    write_json(out_dir / "reports.json", reports)
    write_json(out_dir / "summary.json", summary)
    (out_dir / "summary.txt").write_text(render_report([summary]) + "\n", encoding="utf-8")


def _summary(d) -> Summary:
    return Summary(**d)


def render_report(summaries: list[dict]) -> str:
    """Results table from summary dicts; rows are attacks, column blocks models."""
    rows: dict[str, dict[str, Summary]] = {}
    for s in summaries:
        model = s.get("model") or "model"
        label = s.get("attack")
        by_mode = s.get("by_mode") or {}
        if not by_mode:
            continue
        for mode, d in by_mode.items():
            name = label if label and len(by_mode) == 1 else (f"{label}-{mode}" if label else mode)
            rows.setdefault(name, {})[model] = _summary(d)
    if not rows:
        return "(no scored pairs)"
    return format_table(rows)


def load_summaries(paths) -> list[dict]:
    return [read_json(p) for p in paths]


# ablation


def ablation_points(sweep: str, values=None):
    """(label, config overrides) pairs for a sweep kind."""
    if sweep == "epsilon":
        grid = values or DEFAULT_EPSILON_GRID
        return [(format_budget(e), {"epsilon": e}) for e in grid]
    if sweep == "terms":
        names = values or list(TERM_TOGGLES)
        return [(n, {"_toggle": TERM_TOGGLES[n]}) for n in names]
    if sweep == "weights":
        if not values:
            raise ValueError("weights sweep needs explicit weight triples")
        return [(",".join(f"{w:g}" for w in ws), {"weights": tuple(ws)}) for ws in values]
    raise ValueError(f"unknown sweep {sweep!r}")


def run_ablation(
    entries: list[ManifestEntry],
    encoder: VisionTextEncoder,
    sweep: str,
    values=None,
    file_config: dict | None = None,
    overrides: dict | None = None,
) -> list[dict]:
    """Re-run every entry at each sweep point and tabulate embedding readouts."""
    check_entries(entries, file_config, overrides)
    rows = []
    for label, change in ablation_points(sweep, values):
        per_entry = []
        for entry in entries:
            config = resolve_config(entry.mode, file_config, overrides)
            toggle = change.get("_toggle")
            if toggle is not None:
                config = config.with_(weights=tuple(w * t for w, t in zip(config.weights, toggle)))
            else:
                config = config.with_(**change)
            try:
                image, result = attack_entry(entry, encoder, config)
                read = attack_readout(encoder, image, result.adversarial, entry.target_object, result.mask)
                per_entry.append(dict(read, best_loss=result.best_loss, residual=result.residual, status="ok"))
            except Exception as e:
                logger.error("ablation entry %s failed at %s: %s", entry.entry_id, label, e)
                logger.debug("ablation traceback", exc_info=True)
                per_entry.append({"status": "error", "error": f"{type(e).__name__}: {e}"})
        ok = [p for p in per_entry if p["status"] == "ok"]

        def mean(key):
            vals = [p[key] for p in ok if key in p]
            return float(np.mean(vals)) if vals else None

        rows.append(
            {
                "sweep": sweep,
                "point": label,
                "n_ok": len(ok),
                "n_failed": len(per_entry) - len(ok),
                "best_loss": mean("best_loss"),
                "target_cos_shift": mean("target_cos_shift"),
                "kept_patch_cos": mean("kept_patch_cos"),
                "region_target_cos_shift": mean("region_target_cos_shift"),
                "max_residual": max((p["residual"] for p in ok), default=None),
                "entries": per_entry,
            }
        )
    return rows


def write_ablation(out_dir, rows) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "sweep.json", rows)
    cols = ["sweep", "point", "n_ok", "n_failed", "best_loss", "target_cos_shift", "kept_patch_cos",
            "region_target_cos_shift", "max_residual"]
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
