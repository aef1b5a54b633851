"""Representation-similarity analytics.

Kernel alignment statistics (HSIC, CKA, and the mutual-kNN-restricted
CKNNA) plus the two measurement protocols built on them: the cross-frame
alignment sweep and the per-layer linear probe. All statistics use the
inner-product kernel; CKNNA pins the hard mutual-neighbor variant, whose
k = n-1 limit recovers CKA exactly under the unbiased HSIC estimator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import resample_feature_grid
from .data import ManifestEntry, video_from_entry
from .diffusion import NoiseSchedule, forward_noise
from .encoder import FrameEncoder, encode_video
from .errors import DegenerateInputError, DimensionError, DomainError
from .seeding import np_rng, torch_gen


def gram_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ x.T


def _check_gram_pair(k: np.ndarray, l: np.ndarray) -> int:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"K must be square; got {k.shape}")
    if k.shape != l.shape:
        raise DimensionError(f"K {k.shape} vs L {l.shape}")
    return k.shape[0]


def _hsic_biased(k: np.ndarray, l: np.ndarray) -> float:
    n = k.shape[0]
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.trace(k @ h @ l @ h)) / (n - 1) ** 2


def _hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    # U-statistic estimator; requires n >= 4 and zeroed diagonals
    n = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    term1 = float((kt * lt.T).sum())
    term2 = float(kt.sum()) * float(lt.sum()) / ((n - 1) * (n - 2))
    term3 = 2.0 * float((kt @ lt).sum()) / (n - 2)
    return (term1 + term2 - term3) / (n * (n - 3))


def hsic(k: np.ndarray, l: np.ndarray, estimator: str = "unbiased") -> float:
    """HSIC between two Gram matrices.

    The biased estimator is trace(K H L H) / (n-1)^2 with the centering
    matrix H; the unbiased one is the standard U-statistic with zeroed
    diagonals, defined for n >= 4.
    """
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    n = _check_gram_pair(k, l)
    if estimator == "biased":
        if n < 2:
            raise DomainError(f"biased HSIC needs n >= 2; got {n}")
        return _hsic_biased(k, l)
    if estimator == "unbiased":
        if n < 4:
            raise DomainError(f"unbiased HSIC needs n >= 4; got {n}")
        return _hsic_unbiased(k, l)
    raise DomainError(f"unknown estimator {estimator!r}")


def _check_features(x: np.ndarray, y: np.ndarray) -> int:
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError(f"feature matrices must be 2-D; got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DomainError("feature matrices must be finite")
    return x.shape[0]


def cka(x: np.ndarray, y: np.ndarray, estimator: str = "unbiased") -> float:
    """Centered kernel alignment with the inner-product kernel."""
    _check_features(x, y)
    k = gram_linear(x)
    l = gram_linear(y)
    num = hsic(k, l, estimator)
    xx = hsic(k, k, estimator)
    yy = hsic(l, l, estimator)
    if xx <= 0.0 or yy <= 0.0:
        raise DegenerateInputError(f"non-positive self-HSIC ({xx:.3g}, {yy:.3g})")
    return num / math.sqrt(xx * yy)


def _neighbor_rows(gram: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k membership under a kernel's similarity ordering,
    self excluded; ties broken by index (stable sort)."""
    s = gram.copy()
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(gram, dtype=bool)
    rows = np.repeat(np.arange(gram.shape[0]), k)
    mask[rows, order.reshape(-1)] = True
    return mask


def mutual_knn_mask(gram: np.ndarray, k: int) -> np.ndarray:
    """Symmetric mask of pairs that are in each other's k-neighborhood."""
    rows = _neighbor_rows(gram, k)
    return rows & rows.T


def cknna(x: np.ndarray, y: np.ndarray, k: int = 10) -> float:
    """Kernel alignment restricted to mutual k-nearest-neighbor pairs.

    A pair (i, j) enters the cross-term only if i and j are mutual
    k-neighbors under both kernels; the self terms in the normalisation
    are masked with their own kernel's mutual-neighbor pairs. With
    k = n-1 every off-diagonal pair qualifies and the statistic equals
    :func:`cka` exactly.
    """
    n = _check_features(x, y)
    if not 1 <= k <= n - 1:
        raise DomainError(f"k must be in [1, {n - 1}]; got {k}")
    if n < 4:
        raise DomainError(f"cknna needs n >= 4; got {n}")
    gx = gram_linear(x)
    gy = gram_linear(y)
    mx = mutual_knn_mask(gx, k)
    my = mutual_knn_mask(gy, k)
    both = (mx & my).astype(np.float64)
    num = _hsic_unbiased(both * gx, both * gy)
    xx = _hsic_unbiased(mx * gx, mx * gx)
    yy = _hsic_unbiased(my * gy, my * gy)
    if xx <= 0.0 or yy <= 0.0:
        raise DegenerateInputError(f"non-positive masked self-HSIC ({xx:.3g}, {yy:.3g})")
    return num / math.sqrt(xx * yy)


def trim_measurements(values, fraction: float = 0.03) -> np.ndarray:
    """Drop floor(fraction * n) values from each tail (sorted order)."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    drop = int(math.floor(fraction * values.size))
    return values[drop: values.size - drop] if drop else values


@dataclass
class AlignmentReport:
    """Per-offset distributions of per-frame alignment measurements."""

    measurements: dict[int, list[float]]
    raw: list[dict] = field(default_factory=list)  # video_id, frame, offset, t_idx, cknna
    k: int = 10
    t_window: tuple[int, int] = (1, 50)
    trim_fraction: float = 0.03
    run_id: str = ""
    model_id: str = ""

    def trimmed(self, offset: int) -> np.ndarray:
        return trim_measurements(self.measurements[offset], self.trim_fraction)

    def trimmed_mean(self, offset: int) -> float:
        return float(self.trimmed(offset).mean())

    def summary(self) -> dict:
        return {str(o): self.trimmed_mean(o) for o in sorted(self.measurements)}

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "model_id": self.model_id,
            "k": self.k,
            "t_window": list(self.t_window),
            "trim_fraction": self.trim_fraction,
            "trimming_applied": True,
            "measurements": {str(o): v for o, v in sorted(self.measurements.items())},
            "trimmed_means": self.summary(),
        }

    @staticmethod
    def from_json(doc: dict) -> "AlignmentReport":
        return AlignmentReport(
            measurements={int(o): list(v) for o, v in doc["measurements"].items()},
            raw=[],
            k=doc["k"],
            t_window=tuple(doc["t_window"]),
            trim_fraction=doc["trim_fraction"],
            run_id=doc.get("run_id", ""),
            model_id=doc.get("model_id", ""),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    def save_raw_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run_id", "video_id", "frame", "offset", "t_idx", "cknna"])
            for row in self.raw:
                writer.writerow([
                    self.run_id, row["video_id"], row["frame"], row["offset"],
                    row["t_idx"], repr(row["cknna"]),
                ])


def sweep_timesteps(schedule: NoiseSchedule, t_window=None, n_timesteps: int = 8) -> list[int]:
    """Evenly spaced integer timesteps across the window (default [1, T/2])."""
    lo, hi = t_window if t_window is not None else (1, schedule.t_steps // 2)
    if not 1 <= lo <= hi <= schedule.t_steps:
        raise DomainError(f"t window [{lo}, {hi}] outside [1, {schedule.t_steps}]")
    return [int(round(v)) for v in np.linspace(lo, hi, n_timesteps)]


@torch.no_grad()
def cross_frame_sweep(
    model,
    encoder: FrameEncoder,
    entries: list[ManifestEntry],
    schedule: NoiseSchedule,
    offsets=(-1, 0, 1),
    t_window=None,
    k: int = 10,
    n_timesteps: int = 8,
    seed: int = 0,
    run_id: str = "",
) -> AlignmentReport:
    """Measure per-frame alignment between hidden tokens and encoder tokens.

    For each held-out video the clean frames are encoded once, the video is
    noised at ``n_timesteps`` evenly spaced timesteps in the window, and the
    model's tap tokens of frame f are compared (CKNNA over tokens) with the
    encoder tokens of frame f + offset. The per-frame measurement is the
    mean over the sampled timesteps, so a video with F frames yields F
    measurements at offset 0 and F - |offset| at the others.
    """
    cfg = model.config
    frames = cfg.frames
    if any(abs(o) >= frames for o in offsets):
        raise DomainError(f"offsets {offsets} need |offset| < frame count {frames}")
    if not entries:
        raise DomainError("sweep needs at least one video")
    t_values = sweep_timesteps(schedule, t_window, n_timesteps)
    window = (t_values[0], t_values[-1])
    measurements: dict[int, list[float]] = {int(o): [] for o in offsets}
    raw: list[dict] = []
    grid = int(round(math.sqrt(cfg.tokens_per_frame)))
    for vi, entry in enumerate(entries):
        video = video_from_entry(entry, frames, cfg.height)
        bank = encode_video(encoder, video, video_id=entry.path)
        feats = torch.from_numpy(bank.features)
        if feats.shape[1] != cfg.tokens_per_frame:
            feats = resample_feature_grid(feats, encoder.config.grid, grid)
        feats = feats.numpy()
        x0 = torch.from_numpy(video)[None].repeat(len(t_values), 1, 1, 1, 1)
        t = torch.tensor(t_values, dtype=torch.long)
        eps = torch.randn(x0.shape, generator=torch_gen(seed, "sweep-noise", entry.path))
        xt = forward_noise(x0, t, eps, schedule)
        class_ids = torch.full((len(t_values),), entry.class_id, dtype=torch.long)
        _, tap = model.forward_with_tap(xt, t, class_ids)
        tap = tap.numpy()  # (n_t, F, N, dim)
        for f in range(frames):
            per_offset_vals = {}
            for o in offsets:
                kf = f + o
                if not 0 <= kf < frames:
                    continue
                vals = [cknna(tap[ti, f], feats[kf], k) for ti in range(len(t_values))]
                per_offset_vals[o] = vals
                for ti, v in zip(t_values, vals):
                    raw.append({
                        "video_id": entry.path, "frame": f, "offset": int(o),
                        "t_idx": int(ti), "cknna": float(v),
                    })
            for o, vals in per_offset_vals.items():
                measurements[int(o)].append(float(np.mean(vals)))
    return AlignmentReport(
        measurements=measurements, raw=raw, k=k, t_window=window,
        trim_fraction=0.03, run_id=run_id,
    )


def fit_linear_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    n_classes: int,
    steps: int = 500,
    lr: float = 0.5,
) -> float:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with train-split statistics; the trainer is
    deterministic (zero init, fixed step count and learning rate). Returns
    held-out accuracy.
    """
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    xtr = np.column_stack([(x_train - mu) / sd, np.ones(len(x_train))])
    xte = np.column_stack([(x_test - mu) / sd, np.ones(len(x_test))])
    w = np.zeros((n_classes, xtr.shape[1]))
    onehot = np.eye(n_classes)[y_train]
    for _ in range(steps):
        logits = xtr @ w.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (p - onehot).T @ xtr / len(xtr)
    pred = (xte @ w.T).argmax(axis=1)
    return float((pred == y_test).mean())


@dataclass
class ProbeResult:
    accuracies: dict[int, float]
    peak_layer: int
    recommended_tap: int

    def to_json(self) -> dict:
        return {
            "accuracies": {str(k): v for k, v in sorted(self.accuracies.items())},
            "peak_layer": self.peak_layer,
            "recommended_tap": self.recommended_tap,
        }


@torch.no_grad()
def linear_probe_sweep(
    model,
    entries: list[ManifestEntry],
    schedule: NoiseSchedule,
    layers=None,
    seed: int = 0,
    steps: int = 500,
    lr: float = 0.5,
) -> ProbeResult:
    """Per-layer linear classification of the style class from noised videos.

    Each video is noised at one random timestep, mean-pooled tap tokens at
    every requested layer become its features, and a deterministic linear
    probe is fit per layer (train split) and scored (test split). The peak
    layer marks the end of the denoising encoder; the recommended tap is
    the midpoint of that span.
    """
    cfg = model.config
    layers = sorted(set(layers if layers is not None else range(1, cfg.depth + 1)))
    class_ids = sorted({e.class_id for e in entries})
    if len(class_ids) < 2:
        raise DomainError("probing needs at least two classes")
    rng = np_rng(seed, "probe-t")
    feats: dict[int, list[np.ndarray]] = {layer: [] for layer in layers}
    labels: list[int] = []
    splits: list[str] = []
    for entry in entries:
        video = video_from_entry(entry, cfg.frames, cfg.height)
        t = int(rng.integers(1, schedule.t_steps + 1))
        eps = torch.randn(
            (cfg.frames, cfg.height, cfg.width, cfg.channels),
            generator=torch_gen(seed, "probe-noise", entry.path),
        )
        xt = forward_noise(torch.from_numpy(video), t, eps, schedule)
        # null conditioning: probe the visual content, not the label pathway
        _, taps = model.forward_taps(xt[None], torch.tensor([t]), None, layers)
        for layer in layers:
            feats[layer].append(taps[layer][0].mean(dim=(0, 1)).numpy())
        labels.append(class_ids.index(entry.class_id))
        splits.append(entry.split)
    y = np.array(labels)
    is_train = np.array([s == "train" for s in splits])
    if is_train.all() or not is_train.any():
        raise DomainError("probing needs both train- and test-split videos")
    accuracies = {}
    for layer in layers:
        x = np.stack(feats[layer]).astype(np.float64)
        accuracies[layer] = fit_linear_probe(
            x[is_train], y[is_train], x[~is_train], y[~is_train],
            len(class_ids), steps=steps, lr=lr,
        )
    peak = max(accuracies, key=lambda layer: (accuracies[layer], -layer))
    return ProbeResult(accuracies, peak, max(1, (peak + 1) // 2))
