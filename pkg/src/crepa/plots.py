"""Deterministic figures: SVG box plots and PNG frame grids.

SVGs are assembled from strings (no timestamps, fixed float formatting),
so identical inputs give byte-identical files. Box statistics use
linear-interpolation quartiles and Tukey whiskers clipped to the most
extreme points within 1.5 IQR.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DomainError


def box_stats(values) -> dict:
    """Quartiles (linear interpolation), median, and 1.5-IQR whisker ends."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DomainError("box plot needs at least one value")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo_limit, hi_limit = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    lo = float(v[v >= lo_limit][0]) if (v >= lo_limit).any() else float(v[0])
    hi = float(v[v <= hi_limit][-1]) if (v <= hi_limit).any() else float(v[-1])
    return {"q1": float(q1), "median": float(med), "q3": float(q3),
            "whisker_lo": lo, "whisker_hi": hi, "n": int(v.size)}


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def svg_boxplot(groups: dict[str, list[float]], title: str, path) -> dict:
    """One box per group; returns the stats that were drawn.

    Box statistics are embedded both as text labels and as data-*
    attributes (4 decimals) so they can be cross-checked against the CSV.
    """
    if not groups:
        raise DomainError("box plot needs at least one group")
    stats = {name: box_stats(vals) for name, vals in groups.items()}
    all_vals = np.concatenate([np.asarray(v, dtype=np.float64) for v in groups.values()])
    vmin, vmax = float(all_vals.min()), float(all_vals.max())
    span = (vmax - vmin) or 1.0
    vmin -= 0.05 * span
    vmax += 0.05 * span

    width_per = 140
    width = 80 + width_per * len(groups)
    height = 320
    top, bottom = 48, 280

    def y(v: float) -> float:
        return bottom - (v - vmin) / (vmax - vmin) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
        f'<line x1="50" y1="{top}" x2="50" y2="{bottom}" stroke="#444" stroke-width="1"/>',
    ]
    for tick in np.linspace(vmin, vmax, 5):
        ty = y(float(tick))
        parts.append(f'<line x1="46" y1="{ty:.2f}" x2="50" y2="{ty:.2f}" stroke="#444"/>')
        parts.append(
            f'<text x="42" y="{ty + 4:.2f}" text-anchor="end" font-family="monospace" '
            f'font-size="9">{_fmt(float(tick))}</text>'
        )
    for i, (name, st) in enumerate(sorted(stats.items())):
        cx = 80 + width_per * i + width_per / 2
        half = 36
        data_attrs = " ".join(
            f'data-{key.replace("_", "-")}="{_fmt(st[key])}"'
            for key in ("q1", "median", "q3", "whisker_lo", "whisker_hi")
        )
        parts.append(f'<g data-group="{name}" {data_attrs}>')
        parts.append(
            f'<line x1="{cx:.1f}" y1="{y(st["whisker_lo"]):.2f}" x2="{cx:.1f}" '
            f'y2="{y(st["q1"]):.2f}" stroke="#222"/>'
        )
        parts.append(
            f'<line x1="{cx:.1f}" y1="{y(st["q3"]):.2f}" x2="{cx:.1f}" '
            f'y2="{y(st["whisker_hi"]):.2f}" stroke="#222"/>'
        )
        for w in ("whisker_lo", "whisker_hi"):
            parts.append(
                f'<line x1="{cx - 14:.1f}" y1="{y(st[w]):.2f}" x2="{cx + 14:.1f}" '
                f'y2="{y(st[w]):.2f}" stroke="#222"/>'
            )
        parts.append(
            f'<rect x="{cx - half:.1f}" y="{y(st["q3"]):.2f}" width="{2 * half}" '
            f'height="{max(y(st["q1"]) - y(st["q3"]), 0.5):.2f}" fill="#9ecae1" stroke="#222"/>'
        )
        parts.append(
            f'<line x1="{cx - half:.1f}" y1="{y(st["median"]):.2f}" x2="{cx + half:.1f}" '
            f'y2="{y(st["median"]):.2f}" stroke="#b22" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{cx:.1f}" y="{bottom + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="11">{name}</text>'
        )
        parts.append(
            f'<text x="{cx:.1f}" y="{bottom + 30}" text-anchor="middle" font-family="monospace" '
            f'font-size="9">med {_fmt(st["median"])} q1 {_fmt(st["q1"])} q3 {_fmt(st["q3"])}</text>'
        )
        parts.append("</g>")
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return stats


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def png_grid(videos: np.ndarray, path, scale: int = 4, pad: int = 2) -> None:
    """Frames left-to-right, one row per video; nearest-neighbor upscaling."""
    videos = np.asarray(videos)
    if videos.ndim == 4:
        videos = videos[None]
    if videos.ndim != 5:
        raise DomainError(f"expected (B, F, H, W, C) or (F, H, W, C); got {videos.shape}")
    b, f, h, w, c = videos.shape
    canvas = np.ones(((h + pad) * b + pad, (w + pad) * f + pad, c), dtype=np.uint8) * 255
    for bi in range(b):
        for fi in range(f):
            y0 = pad + bi * (h + pad)
            x0 = pad + fi * (w + pad)
            canvas[y0:y0 + h, x0:x0 + w] = to_uint8(videos[bi, fi])
    img = Image.fromarray(canvas).resize(
        (canvas.shape[1] * scale, canvas.shape[0] * scale), Image.NEAREST
    )
    img.save(path)
