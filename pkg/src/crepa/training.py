"""Fine-tuning orchestration for the three regimes, plus paired-run comparison.

A run is a pure function of (config, seed, manifest): batches, timesteps
and noise draws come from named sub-streams of the run seed, so re-running
reproduces the loss curves exactly and regime reductions (lambda = 0,
tau -> 0) hold at the full-loop level.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import (
    AlignmentConfig,
    ProjectionHead,
    alignment_loss,
    combined_loss,
    resample_feature_grid,
)
from .containers import ensure_dir
from .data import ManifestEntry, video_from_entry
from .diffusion import NoiseSchedule, forward_noise, sample, score_loss
from .dit import (
    DEFAULT_LORA_TARGETS,
    DiTConfig,
    VideoDiT,
    base_fingerprint,
    inject_lora,
    load_checkpoint,
    lora_parameters,
    save_checkpoint,
)
from .encoder import FrameEncoder, encode_video
from .errors import ComparisonInvalidError, ConfigError, IntegrityError, NumericError
from .metrics import AlignmentReport, cross_frame_sweep
from .seeding import derive, np_rng, torch_gen


@dataclass
class TrainConfig:
    mode: str = "crepa"
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 0
    eval_every: int = 250  # 0 disables periodic sweeps
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple = DEFAULT_LORA_TARGETS
    sweep_k: int = 10
    sweep_timesteps: int = 8

    def __post_init__(self):
        if self.mode != self.align.mode:
            raise ConfigError(
                f"train mode {self.mode!r} inconsistent with alignment mode {self.align.mode!r}"
            )
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")

    def to_config(self) -> dict:
        return {
            "mode": self.mode, "steps": self.steps, "batch_size": self.batch_size,
            "lr": self.lr, "seed": self.seed, "eval_every": self.eval_every,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "lora_targets": list(self.lora_targets), "sweep_k": self.sweep_k,
            "sweep_timesteps": self.sweep_timesteps, "alignment": self.align.to_config(),
        }

    @staticmethod
    def from_config(cfg: dict) -> "TrainConfig":
        cfg = dict(cfg)
        align = AlignmentConfig.from_config(cfg.pop("alignment"))
        cfg["lora_targets"] = tuple(cfg.get("lora_targets", DEFAULT_LORA_TARGETS))
        return TrainConfig(align=align, **cfg)


@dataclass
class RunRecord:
    """One fine-tuning run: config echo, curves, reports and artifacts."""

    config: dict
    seed: int
    curves: list[dict]
    reports: list[AlignmentReport]
    checkpoints: list[str]
    wall_clock: float
    model: VideoDiT | None = field(default=None, repr=False)
    head: ProjectionHead | None = field(default=None, repr=False)

    def save(self, out_dir) -> None:
        out = ensure_dir(out_dir)
        with open(out / "config.json", "w") as fh:
            json.dump(self.config, fh, indent=1, sort_keys=True)
        write_curves_csv(out / "curves.csv", self.curves)
        reports_dir = ensure_dir(out / "reports")
        for report in self.reports:
            step = report.run_id.rsplit("step", 1)[-1]
            report.save_json(reports_dir / f"sweep-step{step}.json")
            report.save_raw_csv(reports_dir / f"sweep-step{step}.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(
                {
                    "seed": self.seed,
                    "wall_clock": self.wall_clock,
                    "checkpoints": self.checkpoints,
                    "final": self.curves[-1] if self.curves else None,
                },
                fh, indent=1, sort_keys=True,
            )


def write_curves_csv(path, curves: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "score", "align", "combined"])
        for row in curves:
            align = "" if row["align"] is None else repr(row["align"])
            writer.writerow([row["step"], repr(row["score"]), align, repr(row["combined"])])


def read_curves_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "step": int(rec["step"]),
                "score": float(rec["score"]),
                "align": float(rec["align"]) if rec["align"] else None,
                "combined": float(rec["combined"]),
            })
    return rows


def load_run(run_dir) -> RunRecord:
    """Rehydrate a persisted run (model left on disk; loaded lazily by users)."""
    from pathlib import Path

    run_dir = Path(run_dir)
    with open(run_dir / "config.json") as fh:
        config = json.load(fh)
    with open(run_dir / "summary.json") as fh:
        summary = json.load(fh)
    curves = read_curves_csv(run_dir / "curves.csv")
    reports = []
    reports_dir = run_dir / "reports"
    if reports_dir.is_dir():
        for path in sorted(reports_dir.glob("sweep-step*.json"),
                           key=lambda p: int(p.stem.rsplit("step", 1)[-1])):
            with open(path) as fh:
                reports.append(AlignmentReport.from_json(json.load(fh)))
    return RunRecord(
        config=config,
        seed=summary["seed"],
        curves=curves,
        reports=reports,
        checkpoints=summary["checkpoints"],
        wall_clock=summary["wall_clock"],
    )


def _load_videos(entries: list[ManifestEntry], frames: int, size: int):
    videos = np.stack([video_from_entry(e, frames, size) for e in entries])
    labels = np.array([e.class_id for e in entries], dtype=np.int64)
    return torch.from_numpy(videos), torch.from_numpy(labels)


def pretrain_base(
    entries: list[ManifestEntry],
    dit_config: DiTConfig,
    schedule: NoiseSchedule,
    steps: int = 3000,
    batch_size: int = 4,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[VideoDiT, list[float]]:
    """Train the full model (no adapters) on the noise-prediction loss alone."""
    train = [e for e in entries if e.split == "train"]
    if not train:
        raise ConfigError("pretraining needs train-split entries")
    videos, labels = _load_videos(train, dit_config.frames, dit_config.height)
    model = VideoDiT(dit_config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng_batch = np_rng(seed, "base-batches")
    rng_t = np_rng(seed, "base-timesteps")
    gen_eps = torch_gen(seed, "base-noise")
    losses: list[float] = []
    for step in range(1, steps + 1):
        idx = rng_batch.choice(len(train), size=min(batch_size, len(train)), replace=False)
        x0 = videos[idx]
        t = torch.from_numpy(rng_t.integers(1, schedule.t_steps + 1, size=len(idx)))
        eps = torch.randn(x0.shape, generator=gen_eps)
        xt = forward_noise(x0, t, eps, schedule)
        loss = score_loss(model.predict_eps(xt, t, labels[idx]), eps)
        if not torch.isfinite(loss):
            raise NumericError(f"pretraining loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return model, losses


def _feature_banks(encoder: FrameEncoder, entries, frames: int, size: int, tokens_per_frame: int):
    """Encode each video once (the encoder is frozen) and stack to a tensor."""
    banks = []
    grid = int(round(np.sqrt(tokens_per_frame)))
    for e in entries:
        bank = encode_video(encoder, video_from_entry(e, frames, size), video_id=e.path)
        feats = torch.from_numpy(bank.features)
        if feats.shape[1] != tokens_per_frame:
            feats = resample_feature_grid(feats, encoder.config.grid, grid)
        banks.append(feats)
    return torch.stack(banks)


def finetune(
    base_model: VideoDiT,
    encoder: FrameEncoder,
    train_entries: list[ManifestEntry],
    heldout_entries: list[ManifestEntry],
    config: TrainConfig,
    schedule: NoiseSchedule,
    out_dir=None,
    diagnostics: dict | None = None,
) -> RunRecord:
    """LoRA + projection-head fine-tuning under one regime.

    The base model and encoder stay frozen (checked by fingerprint); only
    adapter matrices and the projection head receive gradients. When the
    regime contributes no alignment gradient (vanilla, or lambda = 0, or
    fully underflowed neighbor weights) the backward pass is taken on the
    score term alone, which keeps reduced regimes bit-identical.
    """
    if not train_entries:
        raise ConfigError("finetune needs a non-empty training subset")
    t0 = time.monotonic()
    enc_fp = encoder.fingerprint()
    model = copy.deepcopy(base_model)
    base_fp = base_fingerprint(model)
    model.requires_grad_(False)
    inject_lora(
        model, targets=config.lora_targets, rank=config.lora_rank,
        alpha=config.lora_alpha, seed=config.seed,
    )
    head = ProjectionHead(model.config.dim, encoder.config.feature_dim, seed=config.seed)
    params = list(lora_parameters(model)) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)

    frames, size = model.config.frames, model.config.height
    videos, labels = _load_videos(train_entries, frames, size)
    banks = _feature_banks(encoder, train_entries, frames, size, model.config.tokens_per_frame)

    rng_batch = np_rng(config.seed, "batches")
    rng_t = np_rng(config.seed, "timesteps")
    gen_eps = torch_gen(config.seed, "noise")

    align_cfg = config.align
    lam = align_cfg.lam
    curves: list[dict] = []
    reports: list[AlignmentReport] = []
    checkpoints: list[str] = []
    out = ensure_dir(out_dir) if out_dir is not None else None

    for step in range(1, config.steps + 1):
        idx = rng_batch.choice(len(train_entries), size=min(config.batch_size, len(train_entries)), replace=False)
        idx_t = torch.from_numpy(idx)
        x0 = videos[idx_t]
        t = torch.from_numpy(rng_t.integers(1, schedule.t_steps + 1, size=len(idx)))
        eps = torch.randn(x0.shape, generator=gen_eps)
        xt = forward_noise(x0, t, eps, schedule)
        eps_pred, tap = model.forward_with_tap(xt, t, labels[idx_t])
        score = score_loss(eps_pred, eps)
        if not torch.isfinite(score):
            raise NumericError(f"score loss non-finite at step {step}")

        align_val = None
        if align_cfg.mode != "vanilla" and lam > 0.0:
            align = alignment_loss(banks[idx_t], head(tap), align_cfg)
            total = combined_loss(score, align, lam)
            align_val = align.item()
            opt.zero_grad()
            total.backward()
        else:
            if align_cfg.mode != "vanilla":
                with torch.no_grad():
                    align_val = alignment_loss(banks[idx_t], head(tap), align_cfg).item()
            total = score
            opt.zero_grad()
            score.backward()
        opt.step()

        score_val = score.item()
        combined_val = score_val if align_val is None else score_val + lam * align_val
        curves.append({
            "step": step, "score": score_val, "align": align_val, "combined": combined_val,
        })
        if diagnostics is not None and step in diagnostics.get("steps", (1,)):
            diagnostics.setdefault("taps", {})[step] = {
                "tap_sha": hashlib.sha256(
                    tap.detach().numpy().astype("<f4").tobytes()
                ).hexdigest(),
                "t": t.tolist(),
                "batch": idx.tolist(),
            }

        if config.eval_every and (step % config.eval_every == 0 or step == config.steps):
            if heldout_entries:
                report = cross_frame_sweep(
                    model, encoder, heldout_entries, schedule,
                    offsets=(-align_cfg.d, 0, align_cfg.d),
                    k=config.sweep_k, n_timesteps=config.sweep_timesteps,
                    seed=derive(config.seed, "sweep", step),
                    run_id=f"{config.mode}-step{step}",
                )
                reports.append(report)

    if encoder.fingerprint() != enc_fp:
        raise IntegrityError("encoder weights changed during fine-tuning")
    if base_fingerprint(model) != base_fp:
        raise IntegrityError("frozen base weights changed during fine-tuning")

    if out is not None:
        ckpt_dir = ensure_dir(out / "checkpoints")
        path = ckpt_dir / f"step-{config.steps}.crpd"
        save_checkpoint(model, path)
        checkpoints.append(str(path))

    record = RunRecord(
        config={
            "train": config.to_config(),
            "dit": model.config.to_config(),
            "schedule": schedule.to_config(),
            "subset_classes": sorted({e.class_id for e in train_entries}),
            "encoder_fingerprint": enc_fp,
            "base_fingerprint": base_fp,
        },
        seed=config.seed,
        curves=curves,
        reports=reports,
        checkpoints=checkpoints,
        wall_clock=time.monotonic() - t0,
        model=model,
        head=head,
    )
    if out is not None:
        record.save(out)
    return record


@dataclass
class ComparisonReport:
    """Side-by-side table of matched runs plus per-offset distributions."""

    rows: list[dict]
    distributions: dict[str, dict[int, list[float]]]
    columns = (
        "mode", "seed", "steps", "final_score", "final_align", "final_combined",
        "cknna_minus", "cknna_zero", "cknna_plus", "sample_probe_accuracy",
    )

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "distributions": {
                mode: {str(o): v for o, v in sorted(offs.items())}
                for mode, offs in self.distributions.items()
            },
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @staticmethod
    def from_json(doc: dict) -> "ComparisonReport":
        return ComparisonReport(
            rows=doc["rows"],
            distributions={
                mode: {int(o): list(v) for o, v in offs.items()}
                for mode, offs in doc["distributions"].items()
            },
        )

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([
                    row["mode"], row["seed"], row["steps"],
                    repr(row["final_score"]),
                    "" if row["final_align"] is None else repr(row["final_align"]),
                    repr(row["final_combined"]),
                    "" if row["cknna_minus"] is None else repr(row["cknna_minus"]),
                    "" if row["cknna_zero"] is None else repr(row["cknna_zero"]),
                    "" if row["cknna_plus"] is None else repr(row["cknna_plus"]),
                    "" if row["sample_probe_accuracy"] is None else repr(row["sample_probe_accuracy"]),
                ])


@torch.no_grad()
def sample_probe_accuracy(
    model: VideoDiT,
    encoder: FrameEncoder,
    target_class: int,
    n_samples: int = 6,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
) -> float:
    """Fraction of sampled frames the frozen encoder assigns to the target class."""
    schedule = schedule or NoiseSchedule()
    cfg = model.config
    shape = (n_samples, cfg.frames, cfg.height, cfg.width, cfg.channels)
    vids = sample(model, schedule, shape, seed=seed, mode="deterministic",
                  class_ids=np.full(n_samples, target_class))
    frames = torch.from_numpy(vids.reshape(-1, cfg.height, cfg.width, cfg.channels))
    pred = encoder.logits(frames).argmax(dim=1).numpy()
    return float((pred == target_class).mean())


def compare_runs(
    records: dict[str, RunRecord],
    encoder: FrameEncoder | None = None,
    schedule: NoiseSchedule | None = None,
    n_samples: int = 6,
    seed: int = 0,
) -> ComparisonReport:
    """Build the acceptance table from matched runs.

    All records must share seed, step budget, batch size and subset;
    otherwise the comparison is refused. Sample-probe accuracy is filled
    when an encoder is available and the run kept (or persisted) its model.
    """
    if not records:
        raise ComparisonInvalidError("no runs to compare")
    ref = next(iter(records.values()))
    for name, rec in records.items():
        if rec.seed != ref.seed:
            raise ComparisonInvalidError(
                f"comparison-invalid: run {name!r} has seed {rec.seed}, expected {ref.seed}"
            )
        for key in ("steps", "batch_size", "lr"):
            if rec.config["train"][key] != ref.config["train"][key]:
                raise ComparisonInvalidError(
                    f"comparison-invalid: run {name!r} differs in {key}"
                )
        if rec.config["subset_classes"] != ref.config["subset_classes"]:
            raise ComparisonInvalidError(f"comparison-invalid: run {name!r} differs in subset")

    rows = []
    distributions: dict[str, dict[int, list[float]]] = {}
    for name in sorted(records):
        rec = records[name]
        mode = rec.config["train"]["mode"]
        final = rec.curves[-1]
        report = rec.reports[-1] if rec.reports else None
        d = rec.config["train"]["alignment"]["d"]
        offs = {}
        if report is not None:
            offs = {o: report.trimmed_mean(o) for o in report.measurements}
            distributions[name] = {int(o): list(v) for o, v in report.measurements.items()}
        probe_acc = None
        model = rec.model
        if model is None and rec.checkpoints:
            model = load_checkpoint(rec.checkpoints[-1])
        if encoder is not None and model is not None:
            target = rec.config["subset_classes"][0]
            probe_acc = sample_probe_accuracy(
                model, encoder, target, n_samples=n_samples, seed=seed, schedule=schedule,
            )
        rows.append({
            "mode": mode,
            "seed": rec.seed,
            "steps": rec.config["train"]["steps"],
            "final_score": final["score"],
            "final_align": final["align"],
            "final_combined": final["combined"],
            "cknna_minus": offs.get(-d),
            "cknna_zero": offs.get(0),
            "cknna_plus": offs.get(d),
            "sample_probe_accuracy": probe_acc,
        })
    return ComparisonReport(rows=rows, distributions=distributions)
