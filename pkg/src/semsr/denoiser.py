"""Conditional noise predictor.

A small U-Net core (frozen during fine-tuning), prompt and semantic
cross-attention blocks at the coarse levels, and a control branch that
copies the core encoder and injects LR-conditioned residuals through
zero-initialised 1x1 convolutions. The attention blocks and the control
branch form the trainable partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Downsample, ResBlock, Upsample, norm, param_checksum, timestep_embedding, zero_module
from .semantic import SemanticEmbedding

TRAINABLE_PREFIXES = ("control.", "attn.")


@dataclass
class ConditioningBundle:
    lr_latent: torch.Tensor | None = None
    prompt_tokens: torch.Tensor | None = None  # (B, n, prompt_dim) or (n, prompt_dim)
    semantic: SemanticEmbedding | None = None

    def with_prompt(self, prompt_tokens) -> "ConditioningBundle":
        return ConditioningBundle(self.lr_latent, prompt_tokens, self.semantic)


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    widths: tuple[int, ...] = (32, 48, 64)
    attention_levels: tuple[int, ...] = (1, 2)
    prompt_dim: int = 32
    semantic_dim: int = 32
    attn_dim: int | None = None
    semantic_scale: int = 0
    control_branch: bool = True
    norm_groups: int = 8
    # a frozen zero output layer would pin the prediction to 0 forever
    zero_init_out: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.attention_levels = tuple(self.attention_levels)
        if not self.attention_levels:
            raise ValueError("at least one level must carry attention blocks")
        if any(not 0 <= l < len(self.widths) for l in self.attention_levels):
            raise ValueError("attention level out of range")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the last two axes; d = q.shape[-1]."""
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    """Residual cross-attention from a feature map onto a token set.

    Queries come from the feature map, keys from tokens plus their positional
    encoding, values from the tokens alone. The output projection starts at
    zero so the block is an exact identity when freshly built.
    """

    def __init__(self, channels: int, context_dim: int, attn_dim: int | None = None):
        super().__init__()
        d = attn_dim or channels
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, d, bias=False)
        self.to_k = nn.Linear(context_dim, d, bias=False)
        self.to_v = nn.Linear(context_dim, d, bias=False)
        self.to_out = zero_module(nn.Linear(d, channels))

    def forward(self, feat, context, pos=None, return_weights: bool = False):
        if context is None or context.shape[-2] == 0:
            return (feat, None) if return_weights else feat
        B, C, H, W = feat.shape
        if context.ndim == 2:
            context = context.expand(B, *context.shape)
        x = feat.flatten(2).transpose(1, 2)
        q = self.to_q(self.norm(x))
        k = self.to_k(context if pos is None else context + pos.to(context.dtype))
        v = self.to_v(context)
        out, weights = attention(q, k, v, return_weights=True)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return (feat + out, weights) if return_weights else feat + out


class ControlBranch(nn.Module):
    """Trainable encoder copy fed with x_t and the LR latent."""

    def __init__(self, cfg: DenoiserConfig, temb_dim: int):
        super().__init__()
        w, g = cfg.widths, cfg.norm_groups
        self.time_embed = nn.Sequential(nn.Linear(w[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        self.hint = nn.Sequential(nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1), nn.SiLU(),
                                  zero_module(nn.Conv2d(w[0], w[0], 3, padding=1)))
        prev = w[0]
        self.down_res, self.downsamplers = nn.ModuleList(), nn.ModuleList()
        for l, ch in enumerate(w):
            self.down_res.append(ResBlock(prev, ch, temb_dim, g))
            self.downsamplers.append(Downsample(ch) if l < len(w) - 1 else nn.Identity())
            prev = ch
        self.mid = ResBlock(w[-1], w[-1], temb_dim, g)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(ch, ch, 1)) for ch in w)
        self.mid_zero = zero_module(nn.Conv2d(w[-1], w[-1], 1))

    def load_from_core(self, core: "Denoiser") -> None:
        for name in ("time_embed", "conv_in", "down_res", "downsamplers", "mid"):
            getattr(self, name).load_state_dict(getattr(core, name).state_dict())

    def forward(self, x_t, t, lr_latent):
        temb = self.time_embed(timestep_embedding(t, self.conv_in.out_channels).to(x_t.dtype))
        h = self.conv_in(x_t) + self.hint(lr_latent)
        residuals = []
        for res, down, zc in zip(self.down_res, self.downsamplers, self.zero_convs):
            h = res(h, temb)
            residuals.append(zc(h))
            h = down(h)
        residuals.append(self.mid_zero(self.mid(h, temb)))
        return residuals


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self._build(cfg)
        finally:
            torch.random.set_rng_state(gen_state)

    def _build(self, cfg):
        w, g = cfg.widths, cfg.norm_groups
        temb = 4 * w[0]
        self.time_embed = nn.Sequential(nn.Linear(w[0], temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[0], 3, padding=1)
        prev = w[0]
        self.down_res, self.downsamplers = nn.ModuleList(), nn.ModuleList()
        for l, ch in enumerate(w):
            self.down_res.append(ResBlock(prev, ch, temb, g))
            self.downsamplers.append(Downsample(ch) if l < len(w) - 1 else nn.Identity())
            prev = ch
        self.mid = ResBlock(w[-1], w[-1], temb, g)
        self.up_res, self.upsamplers = nn.ModuleList(), nn.ModuleList()
        cur = w[-1]
        for l in reversed(range(len(w))):
            self.up_res.append(ResBlock(cur + w[l], w[l], temb, g))
            self.upsamplers.append(Upsample(w[l]) if l > 0 else nn.Identity())
            cur = w[l]
        self.out_norm = norm(w[0], g)
        self.conv_out = nn.Conv2d(w[0], cfg.latent_channels, 3, padding=1)
        if cfg.zero_init_out:
            zero_module(self.conv_out)

        self.attn = nn.ModuleDict()
        for l in cfg.attention_levels:
            for site in ("down", "up") + (("mid",) if l == len(w) - 1 else ()):
                self.attn[f"{site}{l}_pca"] = CrossAttention(w[l], cfg.prompt_dim, cfg.attn_dim)
                self.attn[f"{site}{l}_sca"] = CrossAttention(w[l], cfg.semantic_dim, cfg.attn_dim)
        self.control = ControlBranch(cfg, temb) if cfg.control_branch else None
        if self.control is not None:
            self.control.load_from_core(self)

    # -- parameter partition ---------------------------------------------------

    def is_trainable_name(self, name: str) -> bool:
        return name.startswith(TRAINABLE_PREFIXES)

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if self.is_trainable_name(n)]

    def frozen_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not self.is_trainable_name(n)]

    def freeze_backbone(self) -> None:
        for n, p in self.named_parameters():
            p.requires_grad_(self.is_trainable_name(n))

    def checksums(self) -> dict[str, str]:
        groups = {"backbone": [], "control": [], "attention": []}
        for n, p in self.named_parameters():
            key = "control" if n.startswith("control.") else "attention" if n.startswith("attn.") else "backbone"
            groups[key].append(p)
        return {k: param_checksum(v) for k, v in groups.items()}

    # -- forward -----------------------------------------------------------------

    def _attend(self, key: str, h, cond: ConditioningBundle):
        if f"{key}_pca" not in self.attn:
            return h
        h = self.attn[f"{key}_pca"](h, cond.prompt_tokens)
        if cond.semantic is not None:
            tokens, pos = cond.semantic.tokens(self.cfg.semantic_scale)
            h = self.attn[f"{key}_sca"](h, tokens, pos)
        return h

    def control_branch_forward(self, x_t, t, lr_latent):
        if self.control is None:
            raise ValueError("control branch disabled in this model")
        if lr_latent is None:
            raise ValueError("control branch needs an LR latent")
        if lr_latent.shape != x_t.shape:
            raise ValueError(f"lr_latent shape {tuple(lr_latent.shape)} != x_t shape {tuple(x_t.shape)}")
        return self.control(x_t, t, lr_latent)

    def predict_noise(self, x_t, t, cond: ConditioningBundle | None = None, use_control: bool = True):
        cond = cond or ConditioningBundle()
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        t = t.reshape(-1).expand(x_t.shape[0]) if t.numel() == 1 else t
        residuals = None
        if self.control is not None and use_control:
            residuals = self.control_branch_forward(x_t, t, cond.lr_latent)
        elif cond.lr_latent is not None and cond.lr_latent.shape != x_t.shape:
            raise ValueError("lr_latent and x_t shapes differ")

        w = self.cfg.widths
        temb = self.time_embed(timestep_embedding(t, w[0]).to(x_t.dtype))
        h = self.conv_in(x_t)
        skips = []
        for l, (res, down) in enumerate(zip(self.down_res, self.downsamplers)):
            h = self._attend(f"down{l}", res(h, temb), cond)
            skips.append(h if residuals is None else h + residuals[l])
            h = down(h)
        h = self._attend(f"mid{len(w) - 1}", self.mid(h, temb), cond)
        if residuals is not None:
            h = h + residuals[-1]
        for res, up, l in zip(self.up_res, self.upsamplers, reversed(range(len(w)))):
            h = self._attend(f"up{l}", res(torch.cat([h, skips[l]], dim=1), temb), cond)
            h = up(h)
        return self.conv_out(F.silu(self.out_norm(h)))

    def forward(self, x_t, t, cond=None):
        return self.predict_noise(x_t, t, cond)


def trainable_parameters(model: Denoiser) -> list[nn.Parameter]:
    return [p for _, p in model.trainable_named_parameters()]
