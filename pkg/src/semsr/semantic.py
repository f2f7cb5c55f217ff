"""Frozen hierarchical image encoder producing multi-scale semantic tokens.

Trunk: a patchify stem followed by four stages of multi-scale blocks (MSB),
each stage after the first starting with a stride-2 reduction. Neck: 1x1
lateral projections to a common width, top-down fusion from coarse to fine,
and 2-D sinusoidal positional encodings per scale.

Weights come from a fixed seed and are frozen at construction; real
pretrained weights can be dropped in through ``load_weights``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import param_checksum


@dataclass
class TrunkConfig:
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_widths: tuple[int, ...] = (16, 24, 32, 32)
    patchify_stride: int = 4
    window: int = 4
    heads: int = 2

    def __post_init__(self):
        self.stage_depths = tuple(self.stage_depths)
        self.stage_widths = tuple(self.stage_widths)
        if len(self.stage_depths) != 4 or len(self.stage_widths) != 4:
            raise ValueError("trunk needs exactly 4 stages")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError("stage widths must be non-decreasing")
        if any(w % self.heads for w in self.stage_widths):
            raise ValueError("stage widths must be divisible by the head count")


@dataclass
class ExtractorConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    dim: int = 32
    seed: int = 1234

    def __post_init__(self):
        if isinstance(self.trunk, dict):
            self.trunk = TrunkConfig(**self.trunk)

    @property
    def scale_factors(self) -> list[int]:
        s = self.trunk.patchify_stride
        return [s, 2 * s, 4 * s, 8 * s]


@dataclass
class SemanticEmbedding:
    """Per scale: features (B, tokens, dim) and a positional encoding (tokens, dim)."""

    features: list[torch.Tensor]
    pos: list[torch.Tensor]
    shapes: list[tuple[int, int]]
    scale_factors: list[int]

    @property
    def dim(self) -> int:
        return self.features[0].shape[-1]

    def tokens(self, scale: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        return self.features[scale], self.pos[scale]

    def index(self, idx) -> "SemanticEmbedding":
        return SemanticEmbedding([f[idx] for f in self.features], self.pos, self.shapes,
                                 self.scale_factors)

    @staticmethod
    def cat(items: list["SemanticEmbedding"]) -> "SemanticEmbedding":
        first = items[0]
        feats = [torch.cat([e.features[i] for e in items]) for i in range(len(first.features))]
        return SemanticEmbedding(feats, first.pos, first.shapes, first.scale_factors)


def sinusoidal_pos_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """(h*w, dim) encoding; half the channels code rows, half columns."""
    quarter = max(dim // 4, 1)
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * omega[None]
        parts += [torch.sin(ang), torch.cos(ang)]
    enc = torch.cat(parts, dim=1)
    if enc.shape[1] < dim:
        enc = torch.cat([enc, torch.zeros(enc.shape[0], dim - enc.shape[1], dtype=enc.dtype)], 1)
    return enc[:, :dim]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads, self.window = heads, window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, C, H, W = x.shape
        win = min(self.window, H, W)
        if H % win or W % win:
            win_h, win_w = H, W
        else:
            win_h = win_w = win
        # (B, C, H, W) -> (B * nwin, win_h * win_w, C)
        t = x.view(B, C, H // win_h, win_h, W // win_w, win_w)
        t = t.permute(0, 2, 4, 3, 5, 1).reshape(-1, win_h * win_w, C)
        q, k, v = self.qkv(t).chunk(3, dim=-1)
        split = lambda z: z.view(z.shape[0], z.shape[1], self.heads, -1).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(t.shape)
        o = self.proj(o)
        o = o.view(B, H // win_h, W // win_w, win_h, win_w, C).permute(0, 5, 1, 3, 2, 4)
        return o.reshape(B, C, H, W)


class MSB(nn.Module):
    """Depthwise conv + pointwise MLP + windowed self-attention, each residual."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim, padding_mode="replicate")
        self.norm1 = nn.LayerNorm(dim)
        self.pw = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)

    @staticmethod
    def _ln(norm, x):
        return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, x):
        x = x + self.dw(x)
        x = x + self.pw(self._ln(self.norm1, x).permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        x = x + self.attn(self._ln(self.norm2, x))
        return x


class Trunk(nn.Module):
    def __init__(self, cfg: TrunkConfig, in_ch: int = 3):
        super().__init__()
        self.cfg = cfg
        w = cfg.stage_widths
        self.stem = nn.Conv2d(in_ch, w[0], cfg.patchify_stride, stride=cfg.patchify_stride)
        self.reduce = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(w[i - 1], w[i], 3, stride=2, padding=1,
                                         padding_mode="replicate") for i in range(1, 4)])
        self.stages = nn.ModuleList(
            nn.Sequential(*[MSB(w[i], cfg.heads, cfg.window) for _ in range(cfg.stage_depths[i])])
            for i in range(4))

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        s = self.cfg.patchify_stride
        if img.shape[-1] < s or img.shape[-2] < s:
            raise ValueError(f"image {tuple(img.shape[-2:])} smaller than patchify stride {s}")
        x = self.stem(img * 2.0 - 1.0)
        maps = []
        for reduce, stage in zip(self.reduce, self.stages):
            x = stage(reduce(x))
            maps.append(x)
        return maps


class Neck(nn.Module):
    def __init__(self, in_widths, dim: int):
        super().__init__()
        self.dim = dim
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_widths)

    def forward(self, maps: list[torch.Tensor], scale_factors) -> SemanticEmbedding:
        if len(maps) != 4:
            raise ValueError("neck expects 4 stage maps")
        for fine, coarse in zip(maps, maps[1:]):
            if (fine.shape[-2] + 1) // 2 != coarse.shape[-2] or (fine.shape[-1] + 1) // 2 != coarse.shape[-1]:
                raise ValueError("stage maps must halve in size from one stage to the next")
        lat = [conv(m) for conv, m in zip(self.lateral, maps)]
        fused = [None] * 4
        fused[3] = lat[3]
        for i in (2, 1, 0):
            up = F.interpolate(fused[i + 1], scale_factor=2.0, mode="nearest")
            fused[i] = lat[i] + up[..., : lat[i].shape[-2], : lat[i].shape[-1]]
        feats, pos, shapes = [], [], []
        for f in fused:
            B, C, H, W = f.shape
            feats.append(f.flatten(2).transpose(1, 2))
            pos.append(sinusoidal_pos_2d(H, W, C).to(f.dtype))
            shapes.append((H, W))
        return SemanticEmbedding(feats, pos, shapes, list(scale_factors))


class SemanticExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ExtractorConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.trunk = Trunk(cfg.trunk)
            self.neck = Neck(cfg.trunk.stage_widths, cfg.dim)
        finally:
            torch.random.set_rng_state(gen_state)
        self.freeze()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always in inference mode
        return super().train(False)

    def load_weights(self, state_dict) -> None:
        self.load_state_dict(state_dict)
        self.freeze()

    def checksum(self) -> str:
        return param_checksum(self.parameters())

    def trunk_forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        return self.trunk(img)

    def neck_fuse(self, maps: list[torch.Tensor]) -> SemanticEmbedding:
        return self.neck(maps, self.cfg.scale_factors)

    @torch.no_grad()
    def extract(self, img: torch.Tensor) -> SemanticEmbedding:
        """Embed a batch of images (B, 3, H, W) in [0, 1]."""
        return self.neck_fuse(self.trunk_forward(img))

    forward = extract
