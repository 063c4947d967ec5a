"""``advedm`` command line: select | attack | evaluate | ablate | report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from advedm.encoders.registry import available_encoders, create_encoder
from advedm.errors import AdvEDMError
from advedm.optim import AttackConfig
from advedm.runio import (
    format_budget,
    load_config_file,
    load_manifest,
    parse_number,
    save_heatmap,
    save_mask,
    RunStore,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
DEFAULTS = AttackConfig()


def _weights(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("weights take three comma-separated numbers")
    return tuple(parts)


def _budget(text: str) -> float:
    try:
        return parse_number(text)
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"bad number {text!r}") from e


def _attack_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack settings (override the config file)")
    g.add_argument("--epsilon", type=_budget, help=f"perturbation budget (default: {format_budget(DEFAULTS.epsilon)})")
    g.add_argument("--norm-mode", choices=["linf", "l2"], help=f"budget norm (default: {DEFAULTS.norm_mode})")
    g.add_argument("--iterations", type=int, help=f"optimizer steps (default: {DEFAULTS.iterations})")
    g.add_argument("--step-size", type=float, help=f"Adam learning rate (default: {DEFAULTS.step_size:g})")
    g.add_argument("--weights", type=_weights, help="loss weights cls,patch,fixation (default: per attack)")
    g.add_argument("--alpha", type=float, help=f"[CLS] fusion weight (default: {DEFAULTS.alpha:g})")
    g.add_argument("--beta", type=float, help=f"attention reallocation weight (default: {DEFAULTS.beta:g})")
    g.add_argument("--selection-mode", choices=["top_fraction", "threshold"])
    g.add_argument("--selection-param", type=float, help=f"fraction or threshold (default: {DEFAULTS.selection_param:g})")
    g.add_argument("--region-size", type=int, help="injection window side in patches")
    g.add_argument("--region-pixels", type=int, help=f"injection window side in pixels (default: {DEFAULTS.region_pixels})")
    g.add_argument("--attention-mode", choices=["literal", "weighted"])
    g.add_argument("--seed", type=int)


_OVERRIDE_KEYS = (
    "epsilon", "norm_mode", "iterations", "step_size", "weights", "alpha", "beta", "selection_mode",
    "selection_param", "region_size", "region_pixels", "attention_mode", "seed",
)


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advedm", description="Fine-grained attacks on vision-text encoders.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", help="patch selection for one image and target")
    p.add_argument("image")
    p.add_argument("target")
    p.add_argument("--encoder", default="toy:0", help=f"encoder id; known: {', '.join(available_encoders())}")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--top-fraction", type=float, default=None, help="select this share of patches (default: 0.2)")
    group.add_argument("--threshold", type=float, default=None, help="select patches above this cosine")
    p.add_argument("--mask-out", default="mask.json")
    p.add_argument("--heatmap-out", default="heatmap.png")

    p = sub.add_parser("attack", help="attack every manifest entry")
    p.add_argument("manifest")
    p.add_argument("--encoder", default="toy:0")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--run-id", required=True)
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--workers", type=int, default=1)
    _attack_flags(p)

    p = sub.add_parser("evaluate", help="score description pairs for a run")
    p.add_argument("--run-id", required=True)
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--texts", required=True, help="JSON-lines of {id, clean, adversarial}")
    p.add_argument("--encoder", default=None, help="text encoder for SS (default: the run's encoder)")
    p.add_argument("--judge", choices=["offline", "remote"], default="offline")
    p.add_argument("--judge-endpoint")
    p.add_argument("--judge-model")
    p.add_argument("--lexicon", help="extra lexicon file")
    p.add_argument("--keep-target-in-spr", action="store_true", help="count the target in the removal SPR denominator")
    p.add_argument("--attack-label", default=None)
    p.add_argument("--model-label", default="model")
    p.add_argument("--out", default=None, help="output folder (default: <run>/eval)")

    p = sub.add_parser("ablate", help="sweep epsilon or loss-term toggles")
    p.add_argument("manifest")
    p.add_argument("--encoder", default="toy:0")
    p.add_argument("--config")
    p.add_argument("--sweep", choices=["epsilon", "terms", "weights"], default="epsilon")
    p.add_argument("--values", nargs="*", help="epsilons like 8/255, term names, or weight triples a,b,c")
    p.add_argument("--out", required=True)
    _attack_flags(p)

    p = sub.add_parser("report", help="results table from evaluation summaries")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--out")
    return parser


def _texts(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_select(args) -> int:
    from advedm.pipeline import load_entry_image
    from advedm.regions import build_removal_mask, patch_similarity

    encoder = create_encoder(args.encoder)
    image = load_entry_image(args.image, encoder)
    clean = encoder.encode_image(image)
    sim = patch_similarity(clean.patches, encoder.encode_text(args.target))
    if args.threshold is not None:
        mask = build_removal_mask(sim, "threshold", args.threshold)
    else:
        mask = build_removal_mask(sim, "top_fraction", 0.2 if args.top_fraction is None else args.top_fraction)
    save_mask(mask, args.mask_out, extra={"target": args.target, "encoder": encoder.descriptor.identifier})
    save_heatmap(sim, image, encoder.descriptor.patch_size, args.heatmap_out)
    print(mask.to_grid_text())
    print(f"selected {len(mask.selected)} of {mask.bits.size} patches; mask -> {args.mask_out}, heatmap -> {args.heatmap_out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from advedm.pipeline import run_failed, run_manifest

    entries = load_manifest(args.manifest)
    file_config = load_config_file(args.config) if args.config else {}
    encoder = create_encoder(args.encoder)
    store = RunStore(args.runs_dir, args.run_id)
    record = run_manifest(entries, encoder, store, file_config, _overrides(args), args.workers)
    for e in record.entries:
        if e["status"] == "ok":
            print(f"{e['id']}: ok  residual {e['residual_saved']:.6f} <= {format_budget(e['epsilon'])}  best loss {e['best_loss']:.4f}")
        else:
            print(f"{e['id']}: FAILED  {e['error']}", file=sys.stderr)
    print(f"run written to {store.path}")
    return EXIT_FAILED if run_failed(record) else EXIT_OK


def _judge(args):
    from advedm.metrics import Lexicon, OfflineJudge, RemoteJudge, default_lexicon

    lexicon = default_lexicon()
    if args.lexicon:
        lexicon = lexicon.merge(Lexicon.load(args.lexicon))
    if args.judge == "remote":
        if not args.judge_endpoint or not args.judge_model:
            raise ValueError("the remote judge needs --judge-endpoint and --judge-model")
        return RemoteJudge(args.judge_endpoint, args.judge_model, lexicon=lexicon)
    return OfflineJudge(lexicon)


def cmd_evaluate(args) -> int:
    from advedm.pipeline import evaluate_pairs, pairs_for_run, write_evaluation

    store = RunStore(args.runs_dir, args.run_id)
    record = store.load_record()
    text_encoder = create_encoder(args.encoder or record.encoder)
    pairs = pairs_for_run(record, _texts(args.texts))
    reports, summary = evaluate_pairs(pairs, text_encoder, _judge(args), not args.keep_target_in_spr)
    out = Path(args.out) if args.out else store.file("eval")
    write_evaluation(out, reports, summary, args.attack_label or args.run_id, args.model_label)
    record.reports = reports
    store.save_record(record)
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    failed = [r for r in reports if r["status"] != "ok"]
    for r in failed:
        print(f"{r['id']}: {r['error']}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def _sweep_values(sweep, values):
    if not values:
        return None
    if sweep == "epsilon":
        return [parse_number(v) for v in values]
    if sweep == "weights":
        return [_weights(v) for v in values]
    return list(values)


def cmd_ablate(args) -> int:
    from advedm.pipeline import run_ablation, write_ablation

    entries = load_manifest(args.manifest)
    file_config = load_config_file(args.config) if args.config else {}
    encoder = create_encoder(args.encoder)
    rows = run_ablation(entries, encoder, args.sweep, _sweep_values(args.sweep, args.values), file_config, _overrides(args))
    write_ablation(args.out, rows)
    for r in rows:
        shift = "-" if r["target_cos_shift"] is None else f"{r['target_cos_shift']:+.4f}"
        keep = "-" if r["kept_patch_cos"] is None else f"{r['kept_patch_cos']:.4f}"
        print(f"{r['point']:>12}  ok {r['n_ok']}  failed {r['n_failed']}  target shift {shift}  kept cos {keep}")
    return EXIT_FAILED if any(r["n_failed"] for r in rows) else EXIT_OK


def cmd_report(args) -> int:
    from advedm.pipeline import load_summaries, render_report

    text = render_report(load_summaries(args.summaries))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


COMMANDS = {
    "select": cmd_select,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (AdvEDMError, ValueError, FileNotFoundError, FileExistsError, KeyError) as e:
        print(f"advedm {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
