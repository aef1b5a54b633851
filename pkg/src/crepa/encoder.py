"""Frozen per-frame visual encoder.

A small convolutional tokenizer pretrained to classify the style class of
single frames, then frozen. Its per-token features are the distillation
target for alignment training, and its classifier head doubles as the
probe that scores generated samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .containers import ENCODER_MAGIC, read_sections, write_sections
from .data import NUM_CLASSES, ManifestEntry, video_from_entry
from .errors import ConfigError, DimensionError, NumericError, TrainingFailureError
from .seeding import fnv1a64, np_rng, torch_gen


@dataclass(frozen=True)
class EncoderConfig:
    grid: int = 8
    feature_dim: int = 32
    pretext: str = "attribute-classification"
    trunk_width: int = 32
    post_norm: bool = True
    num_classes: int = NUM_CLASSES
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ConfigError(f"feature_dim must be >= 8; got {self.feature_dim}")
        if self.pretext != "attribute-classification":
            raise ConfigError(f"unknown pretext {self.pretext!r}")
        factor = self.image_size / self.grid
        if factor not in (1.0, 2.0, 4.0, 8.0):
            raise ConfigError(
                f"image_size/grid must be 1, 2, 4 or 8; got {self.image_size}/{self.grid}"
            )

    def to_config(self) -> dict:
        return {
            "grid": self.grid, "feature_dim": self.feature_dim, "pretext": self.pretext,
            "trunk_width": self.trunk_width, "post_norm": self.post_norm,
            "num_classes": self.num_classes, "image_size": self.image_size, "seed": self.seed,
        }

    @staticmethod
    def from_config(cfg: dict) -> "EncoderConfig":
        return EncoderConfig(**cfg)


class FrameEncoder(nn.Module):
    """Three conv blocks down to a grid x grid token map, tokens projected
    to ``feature_dim``; classification pools tokens and applies a linear head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.trunk_width
        n_stride = int(np.log2(config.image_size // config.grid))
        strides = [2] * n_stride + [1] * (3 - n_stride)
        # stride-1 blocks use 1x1 kernels so token receptive fields stay local
        kernels = [3 if s == 2 else 1 for s in strides]
        kernels[0] = 3
        chans = [3, w, w, w]
        self.trunk = nn.Sequential()
        for i, (s, k) in enumerate(zip(strides, kernels)):
            self.trunk.append(nn.Conv2d(chans[i], chans[i + 1], k, stride=s, padding=k // 2))
            self.trunk.append(nn.SiLU())
        self.token_head = nn.Linear(w, config.feature_dim)
        self.token_norm = nn.LayerNorm(config.feature_dim)
        self.classifier = nn.Linear(config.feature_dim, config.num_classes)
        self.frozen = False
        gen = torch_gen(config.seed, "encoder-init")
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    mod.weight.normal_(0.0, 0.05, generator=gen)
                    if mod.bias is not None:
                        mod.bias.zero_()

    def tokens(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, grid*grid, feature_dim)."""
        c = self.config
        if frames.shape[1:] != (c.image_size, c.image_size, 3):
            raise DimensionError(
                f"expected (B, {c.image_size}, {c.image_size}, 3); got {tuple(frames.shape)}"
            )
        x = frames.permute(0, 3, 1, 2)
        x = self.trunk(x)  # (B, w, grid, grid)
        x = x.permute(0, 2, 3, 1).reshape(frames.shape[0], c.grid * c.grid, -1)
        x = self.token_head(x)
        if c.post_norm:
            x = self.token_norm(x)
        return x

    def logits(self, frames: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.tokens(frames).mean(dim=1))

    def fingerprint(self) -> int:
        blob = b"".join(
            np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes()
            for p in self.state_dict().values()
        )
        return fnv1a64(blob)


@dataclass
class FeatureBank:
    """Per-frame frozen-encoder tokens for one video."""

    features: np.ndarray  # (F, grid*grid, feature_dim) float32
    video_id: str
    fingerprint: int


def _frames_and_labels(entries: list[ManifestEntry], frames: int, size: int):
    xs, ys = [], []
    for e in entries:
        video = video_from_entry(e, frames, size)
        xs.append(video)
        ys.extend([e.class_id] * frames)
    x = np.concatenate(xs, axis=0).astype(np.float32)
    return torch.from_numpy(x), torch.tensor(ys, dtype=torch.long)


def pretrain_encoder(
    entries: list[ManifestEntry],
    config: EncoderConfig,
    frames: int,
    steps: int = 400,
    batch_size: int = 64,
    lr: float = 2e-3,
) -> tuple[FrameEncoder, dict]:
    """Train the pretext classifier on train-split frames, then freeze.

    Returns the frozen encoder and accuracy stats. Raises
    TrainingFailureError if held-out frame accuracy ends below 0.60.
    """
    train = [e for e in entries if e.split == "train"]
    test = [e for e in entries if e.split == "test"]
    if not train or not test:
        raise ConfigError("manifest needs both train- and test-split entries")
    x_train, y_train = _frames_and_labels(train, frames, config.image_size)
    x_test, y_test = _frames_and_labels(test, frames, config.image_size)

    encoder = FrameEncoder(config)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    rng = np_rng(config.seed, "encoder-batches")
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(y_train), size=min(batch_size, len(y_train)), replace=False))
        logits = encoder.logits(x_train[idx])
        loss = torch.nn.functional.cross_entropy(logits, y_train[idx])
        if not torch.isfinite(loss):
            raise NumericError("encoder pretraining loss became non-finite")
        opt.zero_grad()
        loss.backward()
        opt.step()

    encoder.eval()
    encoder.requires_grad_(False)
    encoder.frozen = True
    with torch.no_grad():
        train_acc = float((encoder.logits(x_train).argmax(1) == y_train).float().mean())
        test_acc = float((encoder.logits(x_test).argmax(1) == y_test).float().mean())
    if test_acc < 0.60:
        raise TrainingFailureError(
            f"encoder pretext reached only {test_acc:.3f} held-out accuracy (< 0.60)"
        )
    return encoder, {"train_accuracy": train_acc, "holdout_accuracy": test_acc}


def _require_frozen(encoder: FrameEncoder) -> None:
    if not encoder.frozen:
        raise ConfigError("encoder must be frozen before encoding; run pretraining or load weights")


@torch.no_grad()
def encode_frame(encoder: FrameEncoder, frame: np.ndarray) -> np.ndarray:
    """One frame (H, W, C) -> (grid*grid, feature_dim) float32 tokens."""
    _require_frozen(encoder)
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3:
        raise DimensionError(f"frame must be (H, W, C); got shape {frame.shape}")
    out = encoder.tokens(torch.from_numpy(frame)[None])[0].numpy()
    if not np.isfinite(out).all():
        raise NumericError("encoder produced non-finite features")
    return out


@torch.no_grad()
def encode_video(encoder: FrameEncoder, video: np.ndarray, video_id: str = "") -> FeatureBank:
    """Map the frame encoder over a video; records the weight fingerprint."""
    _require_frozen(encoder)
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4:
        raise DimensionError(f"video must be (F, H, W, C); got shape {video.shape}")
    feats = encoder.tokens(torch.from_numpy(video)).numpy().astype(np.float32)
    if not np.isfinite(feats).all():
        raise NumericError("encoder produced non-finite features")
    return FeatureBank(feats, video_id, encoder.fingerprint())


def save_encoder(encoder: FrameEncoder, path) -> None:
    sections = {name: p.detach().numpy() for name, p in encoder.state_dict().items()}
    cfg = dict(encoder.config.to_config())
    cfg["shapes"] = {k: list(v.shape) for k, v in sections.items()}
    cfg["fingerprint"] = encoder.fingerprint()
    write_sections(path, ENCODER_MAGIC, cfg, sections)


def load_encoder(path) -> FrameEncoder:
    cfg, sections = read_sections(path, ENCODER_MAGIC)
    shapes = cfg["shapes"]
    config = EncoderConfig.from_config(
        {k: v for k, v in cfg.items() if k not in ("shapes", "fingerprint")}
    )
    encoder = FrameEncoder(config)
    state = {name: torch.from_numpy(sections[name].reshape(shapes[name])) for name in sections}
    encoder.load_state_dict(state)
    encoder.eval()
    encoder.requires_grad_(False)
    encoder.frozen = True
    if encoder.fingerprint() != cfg["fingerprint"]:
        raise ConfigError(f"{path}: fingerprint mismatch after load")
    return encoder
