"""Minimal vision transformer used as a frozen feature extractor.

Module/parameter names follow the common ViT checkpoint layout
(patch_embed.proj, cls_token, pos_embed, blocks.N.attn.qkv, ...), so
published ViT-S/16 or ViT-B/16 state dicts load directly via --weights.

Without a weights file the backbone is initialized deterministically from
a seed in an attention-pooling configuration: value and output
projections start as identity, the MLP branch starts silent, and the
class/positional embeddings start at zero. The untrained network then
behaves like a smoothed mean-pool over projected patches, which keeps the
exported geometry sane (class token aligned with its own patches) for
offline testing. Use real pretrained weights for actual experiments.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class BackboneSpec:
    dim: int
    depth: int
    heads: int
    patch: int = 16


BACKBONES: dict[str, BackboneSpec] = {
    "vit_s16": BackboneSpec(dim=384, depth=12, heads=6),
    "vit_b16": BackboneSpec(dim=768, depth=12, heads=12),
}


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    def __init__(self, dim: int, patch: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)


class VisionTransformer(nn.Module):
    """Returns (patch_tokens [B, P, D], class_token [B, D]) after the
    final layer norm."""

    def __init__(self, spec: BackboneSpec, image_size: int = 224):
        super().__init__()
        if image_size % spec.patch:
            raise ValueError(f"image size {image_size} not divisible by patch {spec.patch}")
        self.spec = spec
        self.image_size = image_size
        self.patch_count = (image_size // spec.patch) ** 2
        self.patch_embed = PatchEmbed(spec.dim, spec.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.patch_count + 1, spec.dim))
        self.blocks = nn.ModuleList(Block(spec.dim, spec.heads) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.patch_embed(x)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 1:], x[:, 0]


def _pooling_init(model: VisionTransformer, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    d = model.spec.dim
    eye = torch.eye(d)
    with torch.no_grad():
        model.cls_token.zero_()
        model.pos_embed.zero_()
        nn.init.trunc_normal_(model.patch_embed.proj.weight, std=0.02, generator=g)
        model.patch_embed.proj.bias.zero_()
        for blk in model.blocks:
            qkv = torch.empty(3 * d, d)
            nn.init.trunc_normal_(qkv, std=0.02, generator=g)  # q, k stay random
            qkv[2 * d :] = eye  # value path: identity
            blk.attn.qkv.weight.copy_(qkv)
            blk.attn.qkv.bias.zero_()
            blk.attn.proj.weight.copy_(eye)
            blk.attn.proj.bias.zero_()
            nn.init.trunc_normal_(blk.mlp.fc1.weight, std=0.02, generator=g)
            blk.mlp.fc1.bias.zero_()
            blk.mlp.fc2.weight.zero_()  # MLP branch silent at init
            blk.mlp.fc2.bias.zero_()


def _clean_state_dict(raw: dict) -> dict:
    # unwrap the usual checkpoint containers and drop classifier heads
    for key in ("model", "state_dict", "teacher", "module"):
        if key in raw and isinstance(raw[key], dict):
            raw = raw[key]
    out = {}
    for name, value in raw.items():
        name = name.removeprefix("module.").removeprefix("backbone.")
        if name.startswith("head") or name.startswith("fc_norm"):
            continue
        out[name] = value
    return out


def build_backbone(
    name: str = "vit_s16",
    weights: str | None = None,
    image_size: int = 224,
    seed: int = 0,
) -> VisionTransformer:
    """Construct a frozen backbone: pretrained when a weights file is
    given, deterministic seeded pooling init otherwise."""
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}, expected one of {sorted(BACKBONES)}")
    model = VisionTransformer(BACKBONES[name], image_size=image_size)
    if weights is not None:
        state = _clean_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing:
            raise ValueError(f"weights file {weights} is missing parameters: {sorted(missing)[:5]}")
        if unexpected:
            raise ValueError(f"weights file {weights} has unexpected parameters: {sorted(unexpected)[:5]}")
    else:
        _pooling_init(model, seed)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
