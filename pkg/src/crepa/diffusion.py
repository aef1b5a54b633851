"""Discrete-time denoising diffusion: forward noising, the noise-prediction
loss, and ancestral / deterministic reverse samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionError, DomainError, NumericError
from .seeding import torch_gen


@dataclass
class NoiseSchedule:
    """Linear beta schedule with cumulative products.

    ``alpha_bars`` has length ``t_steps + 1`` with ``alpha_bars[0] == 1``,
    so index t is the closed-form noising coefficient for timestep t and
    t = 0 is the identity. The default beta range drives ``alpha_bars[-1]``
    to ~4.5e-5, i.e. the terminal marginal is effectively the unit normal.
    """

    t_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.2
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.t_steps < 1:
            raise DomainError(f"t_steps must be >= 1; got {self.t_steps}")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise DomainError(
                f"need 0 < beta_min <= beta_max < 1; got ({self.beta_min}, {self.beta_max})"
            )
        self.betas = np.linspace(self.beta_min, self.beta_max, self.t_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])
        if not (np.diff(self.alpha_bars) < 0).all():
            raise DomainError("alpha_bar must be strictly decreasing")

    def to_config(self) -> dict:
        return {"t_steps": self.t_steps, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        return NoiseSchedule(int(cfg["t_steps"]), float(cfg["beta_min"]), float(cfg["beta_max"]))


def _check_t(t, t_steps: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() == 0 or int(t.min()) < 0 or int(t.max()) > t_steps:
        raise DomainError(f"t must lie in [0, {t_steps}]; got {t}")
    return t


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or a per-sample vector over the leading batch axis;
    t = 0 returns x0 exactly.
    """
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = _check_t(t, schedule.t_steps)
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t]
    if t.ndim > 0:
        if t.shape[0] != x0.shape[0]:
            raise DimensionError(f"per-sample t needs len {x0.shape[0]}; got {t.shape[0]}")
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def score_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element and the batch."""
    if eps_pred.shape != eps.shape:
        raise DimensionError(f"eps_pred {tuple(eps_pred.shape)} vs eps {tuple(eps.shape)}")
    return torch.mean((eps_pred - eps) ** 2)


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    mode: str = "deterministic",
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse update from timestep t to t-1 given a noise prediction."""
    if not 1 <= t <= schedule.t_steps:
        raise DomainError(f"reverse step needs t in [1, {schedule.t_steps}]; got {t}")
    abar_t = float(schedule.alpha_bars[t])
    abar_prev = float(schedule.alpha_bars[t - 1])
    if mode == "deterministic":
        x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    if mode == "ancestral":
        beta_t = float(schedule.betas[t - 1])
        alpha_t = float(schedule.alphas[t - 1])
        mean = (x_t - beta_t / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(alpha_t)
        if t == 1:
            return mean
        sigma = math.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_t)
        if noise is None:
            raise DomainError("ancestral mode needs a noise draw for t > 1")
        return mean + sigma * noise
    raise DomainError(f"unknown sampler mode {mode!r}")


@torch.no_grad()
def sample(
    model,
    schedule: NoiseSchedule,
    shape: tuple,
    seed: int,
    mode: str = "deterministic",
    class_ids=None,
) -> np.ndarray:
    """Iterate the reverse process from pure noise; returns float32 in [0, 1].

    ``shape`` is (F, H, W, C) for one video or (B, F, H, W, C) for a batch.
    ``model`` must expose ``predict_eps(x_t, t, class_ids)``. Deterministic
    mode is a pure function of (weights, schedule, shape, seed).
    """
    if mode not in ("deterministic", "ancestral"):
        raise DomainError(f"unknown sampler mode {mode!r}")
    squeeze = len(shape) == 4
    batch_shape = (1,) + tuple(shape) if squeeze else tuple(shape)
    gen = torch_gen(seed, "sample-init")
    step_gen = torch_gen(seed, "sample-steps")
    x = torch.randn(batch_shape, generator=gen)
    if class_ids is not None:
        class_ids = torch.as_tensor(np.atleast_1d(class_ids), dtype=torch.long)
    for t in range(schedule.t_steps, 0, -1):
        t_batch = torch.full((batch_shape[0],), t, dtype=torch.long)
        eps_hat = model.predict_eps(x, t_batch, class_ids)
        noise = torch.randn(batch_shape, generator=step_gen) if (mode == "ancestral" and t > 1) else None
        x = reverse_step(x, eps_hat, t, schedule, mode=mode, noise=noise)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite state after reverse step t={t}")
    out = torch.clamp(x, 0.0, 1.0).numpy().astype(np.float32)
    return out[0] if squeeze else out
