"""Command-line entry point.

Verbs cover the full pipeline: gen-data, pretrain-encoder, pretrain-base,
finetune, sweep-alignment, probe, sample, compare, report. Every verb reads
one JSON config (defaults apply when omitted), accepts dotted-key overrides
via --set, writes its artifacts under --out, and prints a one-line summary.
Exit codes: 0 success, 1 runtime error, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .alignment import AlignmentConfig
from .containers import ensure_dir, write_video
from .data import NUM_CLASSES, generate_dataset, load_manifest
from .diffusion import NoiseSchedule, sample
from .encoder import EncoderConfig, load_encoder, pretrain_encoder, save_encoder
from .dit import DiTConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, CrepaError, DomainError
from .metrics import cross_frame_sweep, linear_probe_sweep
from .plots import png_grid, svg_boxplot
from .training import (
    ComparisonReport,
    TrainConfig,
    compare_runs,
    finetune,
    load_run,
    pretrain_base,
)


def _schedule(cfg: dict) -> NoiseSchedule:
    return NoiseSchedule.from_config(cfg["diffusion"])


def _dit_config(cfg: dict) -> DiTConfig:
    d = cfg["dit"]
    return DiTConfig(
        depth=d["depth"], dim=d["dim"], heads=d["heads"], patch=d["patch"],
        frames=cfg["data"]["frames"], height=cfg["data"]["size"], width=cfg["data"]["size"],
        tap_layer=cfg["alignment"]["tap_layer"], class_conditioning=d["class_conditioning"],
        temporal_pos_embed=d["temporal_pos_embed"], tap_point=d["tap_point"],
        seed=cfg["run"]["seed"],
    )


def _encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(
        grid=e["grid"], feature_dim=e["feature_dim"], pretext=e["pretext"],
        trunk_width=e["trunk_width"], post_norm=e["post_norm"],
        image_size=cfg["data"]["size"], seed=cfg["run"]["seed"],
    )


def _train_config(cfg: dict, mode: str | None = None) -> TrainConfig:
    t = cfg["training"]
    a = dict(cfg["alignment"])
    if mode is not None:
        a["mode"] = mode
    align = AlignmentConfig.from_config(a)
    return TrainConfig(
        mode=align.mode, steps=t["steps"], batch_size=t["batch_size"], lr=t["lr"],
        align=align, seed=cfg["run"]["seed"], eval_every=t["eval_every"],
        lora_rank=t["lora_rank"], lora_alpha=t["lora_alpha"],
        sweep_k=t["sweep_k"], sweep_timesteps=t["sweep_timesteps"],
    )


def _split(entries, classes=None):
    if classes is not None:
        entries = [e for e in entries if e.class_id in classes]
    train = [e for e in entries if e.split == "train"]
    test = [e for e in entries if e.split == "test"]
    return train, test


def cmd_gen_data(cfg: dict, args) -> str:
    d = cfg["data"]
    entries = generate_dataset(
        args.out, n_per_class=d["n_per_class"], frames=d["frames"], size=d["size"],
        master_seed=d["master_seed"], classes=d["classes"],
    )
    return f"gen-data: {len(entries)} videos -> {Path(args.out) / 'manifest.jsonl'}"


def cmd_pretrain_encoder(cfg: dict, args) -> str:
    entries = load_manifest(Path(args.data) / "manifest.jsonl")
    encoder, stats = pretrain_encoder(
        entries, _encoder_config(cfg), frames=cfg["data"]["frames"],
        steps=cfg["encoder"]["steps"], batch_size=cfg["encoder"]["batch_size"],
        lr=cfg["encoder"]["lr"],
    )
    out = ensure_dir(args.out) / "encoder.crpe"
    save_encoder(encoder, out)
    return f"pretrain-encoder: holdout accuracy {stats['holdout_accuracy']:.3f} -> {out}"


def cmd_pretrain_base(cfg: dict, args) -> str:
    entries = load_manifest(Path(args.data) / "manifest.jsonl")
    model, losses = pretrain_base(
        entries, _dit_config(cfg), _schedule(cfg),
        steps=cfg["pretrain"]["steps"], batch_size=cfg["pretrain"]["batch_size"],
        lr=cfg["pretrain"]["lr"], seed=cfg["run"]["seed"],
    )
    out = ensure_dir(args.out) / "base.crpd"
    save_checkpoint(model, out)
    head = float(np.mean(losses[:20]))
    tail = float(np.mean(losses[-20:]))
    return f"pretrain-base: loss {head:.3f} -> {tail:.3f} over {len(losses)} steps -> {out}"


def cmd_finetune(cfg: dict, args) -> str:
    entries = load_manifest(Path(args.data) / "manifest.jsonl")
    train, test = _split(entries, cfg["training"]["classes"])
    base = load_checkpoint(args.base)
    encoder = load_encoder(args.encoder)
    record = finetune(
        base, encoder, train, test, _train_config(cfg, args.mode), _schedule(cfg),
        out_dir=args.out,
    )
    final = record.curves[-1]
    return (
        f"finetune[{record.config['train']['mode']}]: combined {final['combined']:.4f} "
        f"at step {final['step']} -> {args.out}"
    )


def cmd_sweep_alignment(cfg: dict, args) -> str:
    entries = load_manifest(Path(args.data) / "manifest.jsonl")
    _, test = _split(entries, cfg["training"]["classes"])
    model = load_checkpoint(args.model)
    encoder = load_encoder(args.encoder)
    report = cross_frame_sweep(
        model, encoder, test, _schedule(cfg), offsets=tuple(cfg["sweep"]["offsets"]),
        k=cfg["sweep"]["k"], n_timesteps=cfg["sweep"]["n_timesteps"],
        seed=cfg["run"]["seed"], run_id=args.run_id,
    )
    out = ensure_dir(args.out)
    report.save_json(out / "sweep.json")
    report.save_raw_csv(out / "sweep.csv")
    means = ", ".join(f"{o}: {m:.4f}" for o, m in sorted(report.summary().items()))
    return f"sweep-alignment: trimmed means {{{means}}} -> {out / 'sweep.json'}"


def cmd_probe(cfg: dict, args) -> str:
    entries = load_manifest(Path(args.data) / "manifest.jsonl")
    model = load_checkpoint(args.model)
    result = linear_probe_sweep(
        model, entries, _schedule(cfg), layers=cfg["probe"]["layers"],
        seed=cfg["run"]["seed"], steps=cfg["probe"]["steps"], lr=cfg["probe"]["lr"],
    )
    out = ensure_dir(args.out) / "probe.json"
    with open(out, "w") as fh:
        json.dump(result.to_json(), fh, indent=1, sort_keys=True)
    peak_acc = result.accuracies[result.peak_layer]
    return (
        f"probe: peak layer {result.peak_layer} at {peak_acc:.3f}, "
        f"recommended tap {result.recommended_tap} -> {out}"
    )


def cmd_sample(cfg: dict, args) -> str:
    model = load_checkpoint(args.model)
    c = model.config
    n = cfg["sample"]["n"]
    class_id = cfg["sample"]["class_id"]
    if class_id is not None and not 0 <= class_id < NUM_CLASSES:
        raise DomainError(f"sample class_id {class_id} outside [0, {NUM_CLASSES})")
    vids = sample(
        model, _schedule(cfg), (n, c.frames, c.height, c.width, c.channels),
        seed=cfg["run"]["seed"], mode=cfg["sample"]["mode"],
        class_ids=None if class_id is None else np.full(n, class_id),
    )
    out = ensure_dir(args.out)
    for i in range(n):
        write_video(out / f"sample{i:03d}.crpv", vids[i])
    png_grid(vids, out / "samples.png")
    return f"sample: {n} videos ({cfg['sample']['mode']}) -> {out / 'samples.png'}"


def cmd_compare(cfg: dict, args) -> str:
    records = {}
    for item in args.runs:
        if "=" not in item:
            raise ConfigError(f"--runs entries must be name=dir; got {item!r}")
        name, run_dir = item.split("=", 1)
        records[name] = load_run(run_dir)
    encoder = load_encoder(args.encoder) if args.encoder else None
    report = compare_runs(
        records, encoder=encoder, schedule=_schedule(cfg), seed=cfg["run"]["seed"],
    )
    out = ensure_dir(args.out)
    report.save_json(out / "compare.json")
    report.save_csv(out / "compare.csv")
    return f"compare: {len(report.rows)} runs -> {out / 'compare.json'}"


def cmd_report(cfg: dict, args) -> str:
    with open(args.compare) as fh:
        report = ComparisonReport.from_json(json.load(fh))
    if not report.distributions:
        raise DomainError("comparison has no sweep distributions to plot")
    out = ensure_dir(args.out)
    offsets = sorted({o for offs in report.distributions.values() for o in offs})
    rows = []
    for offset in offsets:
        groups = {
            name: offs[offset]
            for name, offs in sorted(report.distributions.items())
            if offset in offs and offs[offset]
        }
        if not groups:
            raise DomainError(f"no measurements at offset {offset}")
        svg_boxplot(groups, f"alignment at offset {offset:+d}", out / f"offset{offset:+d}.svg")
        for name, values in groups.items():
            rows.extend({"regime": name, "offset": offset, "value": v} for v in values)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "offset", "value"])
        for row in rows:
            writer.writerow([row["regime"], row["offset"], repr(row["value"])])
    return f"report: {len(offsets)} offset plots -> {out}"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-encoder": cmd_pretrain_encoder,
    "pretrain-base": cmd_pretrain_base,
    "finetune": cmd_finetune,
    "sweep-alignment": cmd_sweep_alignment,
    "probe": cmd_probe,
    "sample": cmd_sample,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crepa",
        description="cross-frame representation alignment lab for toy video diffusion",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key config override")
        p.add_argument("--threads", type=int, default=None, help="cap torch CPU threads")

    p = sub.add_parser("gen-data", help="write the synthetic sprite dataset")
    common(p)
    p = sub.add_parser("pretrain-encoder", help="train and freeze the frame encoder")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory (with manifest.jsonl)")
    p = sub.add_parser("pretrain-base", help="pretrain the base model, score loss only")
    common(p)
    p.add_argument("--data", required=True)
    p = sub.add_parser("finetune", help="LoRA fine-tune under one regime")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="base checkpoint (.crpd)")
    p.add_argument("--encoder", required=True, help="frozen encoder (.crpe)")
    p.add_argument("--mode", default=None, choices=["vanilla", "repa", "crepa"],
                   help="override alignment.mode")
    p = sub.add_parser("sweep-alignment", help="cross-frame alignment sweep on held-out videos")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="checkpoint to analyse")
    p.add_argument("--encoder", required=True)
    p.add_argument("--run-id", default="sweep")
    p = sub.add_parser("probe", help="per-layer linear probe sweep")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p = sub.add_parser("sample", help="sample videos from a checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p = sub.add_parser("compare", help="compare matched finetune runs")
    common(p)
    p.add_argument("--runs", nargs="+", required=True, metavar="NAME=DIR")
    p.add_argument("--encoder", default=None)
    p = sub.add_parser("report", help="render box plots from a comparison")
    common(p)
    p.add_argument("--compare", required=True, help="compare.json from the compare verb")
    return parser


def _failing_module(exc: BaseException) -> str:
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        if "/crepa/" in frame.filename.replace("\\", "/"):
            stem = Path(frame.filename).stem
            if stem != "cli":
                return stem
    return "cli"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load_config(args.config, args.overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        print(COMMANDS[args.verb](cfg, args))
    except (CrepaError, OSError) as exc:
        print(f"{_failing_module(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
