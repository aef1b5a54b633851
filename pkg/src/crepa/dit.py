"""Toy video diffusion transformer.

Frames are cut into square patches (frame-major token order), embedded,
and processed by transformer blocks with full attention over all
frames * tokens. Timestep (and optionally class) conditioning enters via
adaptive layer norm with zero-initialised gates, and the activation at a
configurable block is returned alongside the noise prediction so training
can regularise it without a second forward pass.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .containers import DIT_MAGIC, read_sections, write_sections
from .errors import ConfigError, DimensionError, NumericError
from .seeding import torch_gen

DEFAULT_LORA_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.out")


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 8
    dim: int = 128
    heads: int = 4
    patch: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    tap_layer: int = 4
    num_classes: int = 18
    class_conditioning: bool = True
    temporal_pos_embed: bool = True
    tap_point: str = "block_output"  # or "block_input"
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"{self.height}x{self.width} not divisible by patch {self.patch}")
        if not 1 <= self.tap_layer <= self.depth:
            raise ConfigError(f"tap_layer must be in [1, {self.depth}]; got {self.tap_layer}")
        if self.tap_point not in ("block_output", "block_input"):
            raise ConfigError(f"unknown tap_point {self.tap_point!r}")

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def total_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    def to_config(self) -> dict:
        return {
            "depth": self.depth, "dim": self.dim, "heads": self.heads, "patch": self.patch,
            "frames": self.frames, "height": self.height, "width": self.width,
            "channels": self.channels, "tap_layer": self.tap_layer,
            "num_classes": self.num_classes, "class_conditioning": self.class_conditioning,
            "temporal_pos_embed": self.temporal_pos_embed, "tap_point": self.tap_point,
            "seed": self.seed,
        }

    @staticmethod
    def from_config(cfg: dict) -> "DiTConfig":
        return DiTConfig(**cfg)


def patchify(video: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., F, H, W, C) -> (..., F, N, patch*patch*C), raster token order."""
    if video.ndim < 4:
        raise DimensionError(f"video needs at least 4 dims; got {video.ndim}")
    *lead, f, h, w, c = video.shape
    if h % patch or w % patch:
        raise DimensionError(f"{h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = video.reshape(*lead, f, gh, patch, gw, patch, c)
    x = x.movedim(-4, -3)  # (..., f, gh, gw, patch, patch, c)
    return x.reshape(*lead, f, gh * gw, patch * patch * c)


def unpatchify(tokens: torch.Tensor, height: int, width: int, patch: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify` for matching dimensions."""
    *lead, f, n, d = tokens.shape
    gh, gw = height // patch, width // patch
    c = d // (patch * patch)
    if n != gh * gw or d != patch * patch * c:
        raise DimensionError(f"token grid {n}x{d} does not match {height}x{width}/{patch}")
    x = tokens.reshape(*lead, f, gh, gw, patch, patch, c)
    x = x.movedim(-3, -4)  # (..., f, gh, patch, gw, patch, c)
    return x.reshape(*lead, f, height, width, c)


def frame_of_token(n: int, tokens_per_frame: int) -> int:
    """Frame index owning flat token n under the frame-major contract."""
    return n // tokens_per_frame


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(dim, 6 * dim)
        self.ada.zero_init = True

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        mods = self.ada(torch.nn.functional.silu(cond))[:, None, :].chunk(6, dim=-1)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        x = x + gate1 * self.attn(self.norm1(x) * (1 + scale1) + shift1)
        x = x + gate2 * self.mlp(self.norm2(x) * (1 + scale2) + shift2)
        return x


class VideoDiT(nn.Module):
    """Noise predictor over pixel-frame videos with a hidden-state tap."""

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.patch * c.patch * c.channels, c.dim)
        self.pos_spatial = nn.Parameter(torch.zeros(c.tokens_per_frame, c.dim))
        self.pos_temporal = nn.Parameter(torch.zeros(c.frames, c.dim))
        self.t_mlp = nn.Sequential(nn.Linear(c.dim, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        # last embedding row is the null class used for unconditional passes
        self.class_embed = nn.Embedding(c.num_classes + 1, c.dim)
        self.blocks = nn.ModuleList(DiTBlock(c.dim, c.heads) for _ in range(c.depth))
        self.final_norm = nn.LayerNorm(c.dim, elementwise_affine=False)
        self.final_ada = nn.Linear(c.dim, 2 * c.dim)
        self.final_ada.zero_init = True
        self.head = nn.Linear(c.dim, c.patch * c.patch * c.channels)
        self.head.zero_init = True
        reset_parameters(self, c.seed)

    def _condition(self, t: torch.Tensor, class_ids) -> torch.Tensor:
        dtype = self.patch_embed.weight.dtype
        cond = self.t_mlp(timestep_embedding(t, self.config.dim, dtype))
        if self.config.class_conditioning:
            if class_ids is None:
                idx = torch.full((t.shape[0],), self.config.num_classes, dtype=torch.long)
            else:
                idx = torch.as_tensor(class_ids, dtype=torch.long)
                if idx.ndim == 0:
                    idx = idx.expand(t.shape[0])
            cond = cond + self.class_embed(idx)
        return cond

    def forward_taps(self, xt: torch.Tensor, t, class_ids=None, layers=None):
        """Run the full stack; returns (eps_pred, {layer: tap}).

        ``xt`` is (B, F, H, W, C) or (F, H, W, C). Taps are the residual
        stream at the requested layers (after the block for the
        ``block_output`` tap point, before it for ``block_input``),
        reshaped to (B, F, N, dim).
        """
        c = self.config
        layers = sorted(set(layers if layers is not None else [c.tap_layer]))
        if layers and not 1 <= layers[0] <= layers[-1] <= c.depth:
            raise DimensionError(f"tap layers {layers} outside [1, {c.depth}]")
        squeeze = xt.ndim == 4
        if squeeze:
            xt = xt[None]
        if xt.shape[1:] != (c.frames, c.height, c.width, c.channels):
            raise DimensionError(
                f"expected (B, {c.frames}, {c.height}, {c.width}, {c.channels}); got {tuple(xt.shape)}"
            )
        dtype = self.patch_embed.weight.dtype
        xt = xt.to(dtype)
        b = xt.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(b)
        cond = self._condition(t, class_ids)

        x = self.patch_embed(patchify(xt, c.patch))
        x = x + self.pos_spatial[None, None, :, :]
        if c.temporal_pos_embed:
            x = x + self.pos_temporal[None, :, None, :]
        x = x.reshape(b, c.total_tokens, c.dim)

        taps: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            if c.tap_point == "block_input" and i in layers:
                taps[i] = x
            x = block(x, cond)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after block {i}")
            if c.tap_point == "block_output" and i in layers:
                taps[i] = x
        shift, scale = self.final_ada(torch.nn.functional.silu(cond))[:, None, :].chunk(2, dim=-1)
        h = self.final_norm(x) * (1 + scale) + shift
        eps_tokens = self.head(h).reshape(b, c.frames, c.tokens_per_frame, -1)
        eps = unpatchify(eps_tokens, c.height, c.width, c.patch)
        taps = {i: v.reshape(b, c.frames, c.tokens_per_frame, c.dim) for i, v in taps.items()}
        if squeeze:
            return eps[0], {i: v[0] for i, v in taps.items()}
        return eps, taps

    def forward_with_tap(self, xt: torch.Tensor, t, class_ids=None):
        """Returns (eps_pred, tap at the configured tap layer).

        The tap tensor returned here is the one training feeds to the
        alignment loss; there is no second forward pass.
        """
        eps, taps = self.forward_taps(xt, t, class_ids, [self.config.tap_layer])
        return eps, taps[self.config.tap_layer]

    def predict_eps(self, xt: torch.Tensor, t, class_ids=None) -> torch.Tensor:
        return self.forward_taps(xt, t, class_ids, [])[0]

    forward = forward_with_tap


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init: trunc-normal-ish weights, zero biases, zeroed gate layers."""
    gen = torch_gen(seed, "dit-init")
    for name, module in model.named_modules():
        if isinstance(module, nn.Linear):
            if getattr(module, "zero_init", False):
                module.weight.zero_()
                if module.bias is not None:
                    module.bias.zero_()
            else:
                module.weight.normal_(0.0, 0.02, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.Embedding):
            module.weight.normal_(0.0, 0.02, generator=gen)
    for pname, param in model.named_parameters(recurse=False):
        if pname.startswith("pos_"):
            param.normal_(0.0, 0.02, generator=gen)


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank update.

    Effective weight is W + (alpha / rank) * B @ A with B zero-initialised,
    so the adapted module equals the base module until training moves B.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        dtype = base.weight.dtype
        a = torch.empty(rank, base.in_features, dtype=torch.float32)
        a.normal_(0.0, 0.02, generator=gen)
        self.lora_A = nn.Parameter(a.to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = self.alpha / self.rank
        return self.base(x) + scale * ((x @ self.lora_A.T) @ self.lora_B.T)


def _resolve_parent(model: nn.Module, path: str):
    parts = path.split(".")
    parent = model
    for p in parts[:-1]:
        parent = getattr(parent, p)
    return parent, parts[-1]


def inject_lora(
    model: nn.Module,
    targets=DEFAULT_LORA_TARGETS,
    rank: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
) -> list[str]:
    """Wrap every linear whose qualified name ends in one of ``targets``.

    Returns the adapted module paths (deterministic order). Raises
    ConfigError if a target matches nothing.
    """
    gen = torch_gen(seed, "lora-init")
    adapted: list[str] = []
    for target in targets:
        matches = [
            name for name, mod in model.named_modules()
            if isinstance(mod, nn.Linear) and (name == target or name.endswith("." + target))
        ]
        if not matches:
            raise ConfigError(f"LoRA target {target!r} matches no linear layer")
        for name in matches:
            parent, attr = _resolve_parent(model, name)
            setattr(parent, attr, LoRALinear(getattr(parent, attr), rank, alpha, gen))
            adapted.append(name)
    return adapted


def remove_lora(model: nn.Module) -> None:
    """Restore every adapted linear to its wrapped base module."""
    for name, mod in list(model.named_modules()):
        if isinstance(mod, LoRALinear):
            parent, attr = _resolve_parent(model, name)
            setattr(parent, attr, mod.base)


def lora_parameters(model: nn.Module):
    for name, param in model.named_parameters():
        if "lora_A" in name or "lora_B" in name:
            yield param


def _canonical_base_items(model: nn.Module):
    for name, param in model.state_dict().items():
        if "lora_A" in name or "lora_B" in name:
            continue
        yield name.replace(".base.", "."), param


def base_fingerprint(model: nn.Module) -> str:
    """Hash of all non-adapter weights; invariant to LoRA injection/removal."""
    h = hashlib.blake2b(digest_size=16)
    for name, param in sorted(_canonical_base_items(model)):
        h.update(name.encode())
        h.update(np.ascontiguousarray(param.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(model: VideoDiT, path, lora_only: bool = False) -> None:
    """Write a checkpoint; base weights use canonical (pre-injection) names.

    Full saves of an adapted model carry both the base weights and the
    adapter sections, so loading reconstructs the adapted model exactly.
    With ``lora_only=True`` only adapter sections are written, tied to the
    base via its fingerprint.
    """
    cfg = dict(model.config.to_config())
    sections: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    lora_meta = {}
    for name, mod in model.named_modules():
        if isinstance(mod, LoRALinear):
            lora_meta[name] = {"rank": mod.rank, "alpha": mod.alpha}
    for name, param in model.state_dict().items():
        is_lora = "lora_A" in name or "lora_B" in name
        if lora_only and not is_lora:
            continue
        key = name if is_lora else name.replace(".base.", ".")
        arr = param.detach().cpu().numpy()
        sections[key] = arr
        shapes[key] = list(arr.shape)
    cfg["kind"] = "lora" if lora_only else "base"
    cfg["shapes"] = shapes
    cfg["lora"] = lora_meta
    cfg["base_fingerprint"] = base_fingerprint(model)
    write_sections(path, DIT_MAGIC, cfg, sections)


def _lora_spec(meta: dict) -> tuple[tuple, int, float]:
    first = next(iter(meta.values()))
    targets = tuple(sorted({".".join(name.split(".")[-2:]) for name in meta}))
    return targets, int(first["rank"]), float(first["alpha"])


def load_checkpoint(path) -> VideoDiT:
    """Rebuild a model from a full checkpoint (re-injecting adapters if saved)."""
    cfg, sections = read_sections(path, DIT_MAGIC)
    if cfg.get("kind") != "base":
        raise ConfigError(f"{path} is not a base checkpoint")
    shapes = cfg["shapes"]
    config = DiTConfig.from_config(
        {k: v for k, v in cfg.items() if k not in ("kind", "shapes", "lora", "base_fingerprint")}
    )
    model = VideoDiT(config)
    if cfg["lora"]:
        targets, rank, alpha = _lora_spec(cfg["lora"])
        inject_lora(model, targets=targets, rank=rank, alpha=alpha)
    state = {}
    for name in model.state_dict():
        key = name if ("lora_A" in name or "lora_B" in name) else name.replace(".base.", ".")
        state[name] = torch.from_numpy(sections[key].reshape(shapes[key]))
    model.load_state_dict(state)
    return model


def apply_lora_checkpoint(model: VideoDiT, path) -> None:
    """Load adapter sections saved with ``lora_only=True`` onto a base model."""
    cfg, sections = read_sections(path, DIT_MAGIC)
    if cfg.get("kind") != "lora":
        raise ConfigError(f"{path} is not a LoRA checkpoint")
    if cfg.get("base_fingerprint") != base_fingerprint(model):
        raise ConfigError("LoRA checkpoint was trained on a different base model")
    targets, rank, alpha = _lora_spec(cfg["lora"])
    inject_lora(model, targets=targets, rank=rank, alpha=alpha)
    state = dict(model.state_dict())
    for name, arr in sections.items():
        state[name] = torch.from_numpy(arr.reshape(cfg["shapes"][name]))
    model.load_state_dict(state)
