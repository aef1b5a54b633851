"""Alignment regularisers for fine-tuning.

Three regimes share one code path: ``vanilla`` contributes nothing,
``repa`` pulls each frame's projected hidden tokens toward that frame's
frozen encoder tokens, and ``crepa`` adds exponentially weighted pulls
toward the encoder tokens of frames at distance d. Similarity is cosine
per token, averaged over a frame's tokens; frame terms are summed, not
averaged, unless ``normalize_by_frames`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError, NumericError
from .seeding import torch_gen

MODES = ("vanilla", "repa", "crepa")


@dataclass
class AlignmentConfig:
    mode: str = "crepa"
    lam: float = 0.5
    d: int = 1
    tau: float = 1.0
    tap_layer: int = 4
    sim: str = "cosine-mean-token"
    normalize_by_frames: bool = False
    renormalize_boundary: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}; got {self.mode!r}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0; got {self.lam}")
        if self.d < 1:
            raise ConfigError(f"adjacency d must be >= 1; got {self.d}")
        if self.tau <= 0:
            raise ConfigError(f"temperature tau must be > 0; got {self.tau}")
        if self.sim != "cosine-mean-token":
            raise ConfigError(f"unknown similarity {self.sim!r}")

    def to_config(self) -> dict:
        return {
            "mode": self.mode, "lambda": self.lam, "d": self.d, "tau": self.tau,
            "tap_layer": self.tap_layer, "sim": self.sim,
            "normalize_by_frames": self.normalize_by_frames,
            "renormalize_boundary": self.renormalize_boundary,
        }

    @staticmethod
    def from_config(cfg: dict) -> "AlignmentConfig":
        cfg = dict(cfg)
        cfg["lam"] = cfg.pop("lambda", cfg.pop("lam", 0.5))
        return AlignmentConfig(**cfg)


class ProjectionHead(nn.Module):
    """Token-wise 3-layer MLP from model width into the encoder feature space."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)
        self.fc3 = nn.Linear(out_dim, out_dim)
        gen = torch_gen(seed, "projection-head")
        with torch.no_grad():
            for fc in (self.fc1, self.fc2, self.fc3):
                fc.weight.normal_(0.0, 0.02, generator=gen)
                fc.bias.zero_()

    def forward(self, tap: torch.Tensor) -> torch.Tensor:
        if tap.shape[-1] != self.in_dim:
            raise DimensionError(f"tap width {tap.shape[-1]} != head input {self.in_dim}")
        h = torch.nn.functional.silu(self.fc1(tap))
        h = torch.nn.functional.silu(self.fc2(h))
        return self.fc3(h)


def project(head: ProjectionHead, tap: torch.Tensor) -> torch.Tensor:
    return head(tap)


def token_cosine(y: torch.Tensor, z: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Cosine per corresponding token; zero-norm tokens contribute 0."""
    num = (y * z).sum(dim=-1)
    denom = torch.linalg.vector_norm(y, dim=-1) * torch.linalg.vector_norm(z, dim=-1)
    return num / torch.clamp(denom, min=eps)


def sim(y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean token cosine between two (..., N, D) token grids; in [-1, 1]."""
    y = torch.as_tensor(y)
    z = torch.as_tensor(z)
    if y.shape != z.shape:
        raise DimensionError(f"sim shapes differ: {tuple(y.shape)} vs {tuple(z.shape)}")
    return token_cosine(y, z).mean(dim=-1)


def neighbor_weights(f: int, frames: int, d: int, tau: float) -> list[tuple[int, float]]:
    """In-range neighbors {f-d, f+d} with weight exp(-d / tau).

    Out-of-range candidates are dropped without reweighting the rest.
    """
    if d >= frames:
        raise ConfigError(f"adjacency d={d} must be smaller than frame count {frames}")
    if d < 1:
        raise ConfigError(f"adjacency d must be >= 1; got {d}")
    if tau <= 0:
        raise ConfigError(f"temperature tau must be > 0; got {tau}")
    if not 0 <= f < frames:
        raise ConfigError(f"frame {f} outside [0, {frames})")
    w = math.exp(-d / tau)
    return [(k, w) for k in (f - d, f + d) if 0 <= k < frames]


def _as_batched(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected (B, F, N, D) or (F, N, D); got {tuple(x.shape)}")
    return x


def _check_pair(bank: torch.Tensor, projected: torch.Tensor) -> None:
    if bank.shape[1] != projected.shape[1]:
        raise DimensionError(f"frame counts differ: {bank.shape[1]} vs {projected.shape[1]}")
    if bank.shape != projected.shape:
        raise DimensionError(f"bank {tuple(bank.shape)} vs projected {tuple(projected.shape)}")


def repa_loss(bank, projected, normalize_by_frames: bool = False) -> torch.Tensor:
    """Negative batch mean of the per-frame similarity sum."""
    bank = _as_batched(bank)
    projected = _as_batched(projected)
    _check_pair(bank, projected)
    per_frame = sim(bank, projected)  # (B, F)
    total = per_frame.sum(dim=1)
    if normalize_by_frames:
        total = total / bank.shape[1]
    return -total.mean()


def crepa_loss(
    bank,
    projected,
    d: int = 1,
    tau: float = 1.0,
    normalize_by_frames: bool = False,
    renormalize_boundary: bool = False,
) -> torch.Tensor:
    """Per-frame similarity plus weighted similarities to frames at distance d.

    The hidden tokens of frame f are compared against the encoder tokens of
    frames f-d and f+d with weight exp(-d / tau); candidates outside the
    video are dropped. When the weight underflows to zero the neighbor terms
    vanish and this reduces exactly to :func:`repa_loss`.
    """
    bank = _as_batched(bank)
    projected = _as_batched(projected)
    _check_pair(bank, projected)
    frames = bank.shape[1]
    if d >= frames:
        raise ConfigError(f"adjacency d={d} must be smaller than frame count {frames}")
    if tau <= 0:
        raise ConfigError(f"temperature tau must be > 0; got {tau}")
    total = sim(bank, projected).sum(dim=1)  # (B,)
    w = math.exp(-d / tau)
    if w != 0.0:
        scale = 2.0 if renormalize_boundary else 1.0
        # frame f vs bank frame f+d, f ranging over [0, F-d)
        fwd = sim(bank[:, d:], projected[:, :frames - d])  # (B, F-d)
        # frame f vs bank frame f-d, f ranging over [d, F)
        bwd = sim(bank[:, :frames - d], projected[:, d:])  # (B, F-d)
        if renormalize_boundary:
            # interior frames keep weight w per side; lone-neighbor frames get 2w
            side = torch.ones(frames - d, dtype=total.dtype)
            fwd_w = w * torch.where(torch.arange(frames - d) >= d, side, scale * side)
            bwd_w = fwd_w.flip(0)
            total = total + (fwd * fwd_w).sum(dim=1) + (bwd * bwd_w).sum(dim=1)
        else:
            total = total + w * fwd.sum(dim=1) + w * bwd.sum(dim=1)
    if normalize_by_frames:
        total = total / frames
    return -total.mean()


def alignment_loss(bank, projected, config: AlignmentConfig) -> torch.Tensor:
    """Dispatch on the regime; vanilla returns a constant zero (no gradient)."""
    if config.mode == "vanilla":
        return torch.zeros(())
    if config.mode == "repa":
        return repa_loss(bank, projected, config.normalize_by_frames)
    return crepa_loss(
        bank, projected, config.d, config.tau,
        config.normalize_by_frames, config.renormalize_boundary,
    )


def combined_loss(score_term: torch.Tensor, align_term: torch.Tensor, lam: float) -> torch.Tensor:
    """score + lambda * align, with a finiteness check on both terms."""
    if not (torch.isfinite(torch.as_tensor(score_term)) and torch.isfinite(torch.as_tensor(align_term))):
        raise NumericError("combined loss received a non-finite term")
    return score_term + lam * align_term


def resample_feature_grid(features: torch.Tensor, src_grid: int, dst_grid: int) -> torch.Tensor:
    """Bilinearly resample (..., src_grid**2, D) token grids to dst_grid**2 tokens.

    Used when the encoder grid differs from the model's per-frame grid; the
    default configs keep them equal so this is a no-op there.
    """
    features = torch.as_tensor(features)
    if features.shape[-2] != src_grid * src_grid:
        raise DimensionError(f"expected {src_grid * src_grid} tokens; got {features.shape[-2]}")
    if src_grid == dst_grid:
        return features
    lead = features.shape[:-2]
    d = features.shape[-1]
    grid = features.reshape(-1, src_grid, src_grid, d).permute(0, 3, 1, 2)
    out = torch.nn.functional.interpolate(
        grid, size=(dst_grid, dst_grid), mode="bilinear", align_corners=False
    )
    return out.permute(0, 2, 3, 1).reshape(*lead, dst_grid * dst_grid, d)
