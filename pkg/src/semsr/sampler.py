"""Inference: start-point selection, classifier-free guidance and the reverse chain."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .autoencoder import Autoencoder
from .degradation import SCALE, upsample
from .denoiser import ConditioningBundle, Denoiser
from .diffusion import NoiseSchedule, forward_marginal, respace, reverse_step, timestep_ladder
from .prompts import POSITIVE_PROMPT, StatTagger, embed_prompt, parse_prompt
from .semantic import SemanticExtractor
from .training import to_images, to_tensor


@dataclass
class SamplerConfig:
    start_point: str = "noise"
    guidance_scale: float = 1.0
    num_steps: int = 50
    positive_prompt: list[str] = field(default_factory=list)
    negative_prompt: list[str] = field(default_factory=list)
    seed: int = 0
    start_timestep: int | None = None  # defaults to two thirds of T
    max_pixels: int = 1024 * 1024

    def __post_init__(self):
        self.positive_prompt = parse_prompt(self.positive_prompt)
        self.negative_prompt = parse_prompt(self.negative_prompt)
        if self.start_point not in ("noise", "lr"):
            raise ValueError(f"start_point must be 'noise' or 'lr', got {self.start_point!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")

    def resolved_start(self, T: int) -> int:
        if self.start_point == "noise":
            return T - 1
        t = (2 * T) // 3 if self.start_timestep is None else int(self.start_timestep)
        if not 0 <= t < T:
            raise ValueError(f"start_timestep {t} outside [0, {T})")
        return t

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "synthetic": SamplerConfig(start_point="lr", guidance_scale=0.9),
    "wild": SamplerConfig(start_point="noise", guidance_scale=8.5,
                          positive_prompt=list(POSITIVE_PROMPT)),
}


def preset(name: str, **overrides) -> SamplerConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def init_start(cfg: SamplerConfig, lr_latent: torch.Tensor | None, sched: NoiseSchedule,
               generator: torch.Generator, shape=None) -> tuple[torch.Tensor, int]:
    """Initial latent and timestep: pure noise at T-1, or the LR latent noised to ``start_timestep``."""
    t_start = cfg.resolved_start(sched.T)
    if cfg.start_point == "lr":
        if lr_latent is None:
            raise ValueError("start_point 'lr' requires an LR latent")
        eps = torch.randn(lr_latent.shape, generator=generator, dtype=lr_latent.dtype)
        return forward_marginal(lr_latent, t_start, sched, eps), t_start
    shape = tuple(lr_latent.shape) if shape is None else tuple(shape)
    dtype = lr_latent.dtype if lr_latent is not None else torch.float32
    return torch.randn(shape, generator=generator, dtype=dtype), t_start


def cfg_combine(eps_pos, eps_neg, gs: float):
    if tuple(eps_pos.shape) != tuple(eps_neg.shape):
        raise ValueError("guidance branches disagree in shape")
    if gs == 1:
        return eps_pos
    if gs == 0:
        return eps_neg
    return eps_neg + gs * (eps_pos - eps_neg)


def cfg_predict(model, x_t, t, cond_pos: ConditioningBundle, cond_neg: ConditioningBundle, gs: float):
    """eps_neg + gs * (eps_pos - eps_neg); exact at gs in {0, 1}."""
    return cfg_combine(model(x_t, t, cond_pos), model(x_t, t, cond_neg), gs)


@dataclass
class Models:
    autoencoder: Autoencoder
    denoiser: Denoiser
    extractor: SemanticExtractor
    tagger: object = field(default_factory=StatTagger)


@torch.no_grad()
def build_conditions(cfg: SamplerConfig, lr_image: np.ndarray, models: Models):
    """Positive / negative bundles for one LR image (H, W, 3) in [0, 1]."""
    lr_up = upsample(lr_image, SCALE)
    x = to_tensor(lr_up)
    lr_latent = models.autoencoder.encode_latent(x)
    semantic = models.extractor.extract(x)
    dim = models.denoiser.cfg.prompt_dim
    tags = list(models.tagger(lr_up))
    pos = ConditioningBundle(lr_latent, embed_prompt(tags + cfg.positive_prompt, dim), semantic)
    # no negative prompt: the unconditional branch is the empty prompt
    neg = pos.with_prompt(embed_prompt(cfg.negative_prompt, dim))
    return pos, neg


@torch.no_grad()
def sample(cfg: SamplerConfig, lr_image: np.ndarray, models: Models, sched: NoiseSchedule,
           return_trace: bool = False):
    """Super-resolve one LR image 4x; output is (4H, 4W, 3) in [0, 1]."""
    h, w = lr_image.shape[:2]
    if h * w * SCALE * SCALE > cfg.max_pixels:
        raise ValueError(f"output of {4 * h}x{4 * w} exceeds max_pixels={cfg.max_pixels}")
    models.denoiser.eval()
    gen = torch.Generator().manual_seed(int(cfg.seed))
    pos, neg = build_conditions(cfg, lr_image, models)
    x, t_start = init_start(cfg, pos.lr_latent, sched, gen)
    ladder = timestep_ladder(t_start, cfg.num_steps)
    sub = respace(sched, ladder)
    visited = []
    for i in reversed(range(sub.T)):
        t = int(sub.timesteps[i])
        visited.append(t)
        eps = cfg_predict(models.denoiser, x, t, pos, neg, cfg.guidance_scale)
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) if i > 0 else None
        x = reverse_step(x, i, eps, sub, noise)
    out = to_images(models.autoencoder.decode_latent(x))[0]
    return (out, visited) if return_trace else out
