"""Fine-tuning loop: only the control branch and cross-attention blocks learn.

The autoencoder and semantic extractor are frozen and run once up front;
their outputs are cached in ``TrainingData``. Each step draws its randomness
from a generator seeded by ``(seed, step)``, so a resumed run reproduces the
uninterrupted one exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .autoencoder import Autoencoder
from .degradation import derive_seed, upsample
from .denoiser import ConditioningBundle, Denoiser
from .diffusion import NoiseSchedule, training_loss
from .layers import param_checksum
from .prompts import StatTagger, embed_prompt
from .semantic import SemanticEmbedding, SemanticExtractor

log = logging.getLogger(__name__)


class FrozenParameterError(PermissionError):
    """Raised when an update targets a frozen parameter."""


class FrozenViolationError(RuntimeError):
    """Raised when a frozen module's weights changed during training."""


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-5
    batch_size: int = 8
    prompt_dropout: float = 0.1
    seed: int = 0
    log_every: int = 100


def to_tensor(images: list[np.ndarray] | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack(images) if isinstance(images, list) else images
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(t: torch.Tensor) -> list[np.ndarray]:
    return [x for x in t.detach().cpu().float().numpy().transpose(0, 2, 3, 1)]


def lr_to_hr_size(lr: np.ndarray, hr_shape) -> np.ndarray:
    """Bicubic-upsample an LR image to the HR pixel grid (identity for native-scale LR)."""
    if lr.shape[:2] == tuple(hr_shape[:2]):
        return lr
    factor = hr_shape[0] // lr.shape[0]
    return upsample(lr, factor)


@dataclass
class TrainingData:
    hr_latents: torch.Tensor
    lr_latents: torch.Tensor
    semantic: SemanticEmbedding
    prompt_tokens: torch.Tensor  # (N, n_tags, dim)

    def __len__(self):
        return self.hr_latents.shape[0]

    def batch(self, idx: torch.Tensor, drop_prompt: bool) -> tuple[torch.Tensor, ConditioningBundle]:
        cond = ConditioningBundle(self.lr_latents[idx],
                                  None if drop_prompt else self.prompt_tokens[idx],
                                  self.semantic.index(idx))
        return self.hr_latents[idx], cond


@torch.no_grad()
def prepare_training_data(pairs, autoencoder: Autoencoder, extractor: SemanticExtractor,
                          prompt_dim: int, tagger=None, chunk: int = 16) -> TrainingData:
    """Encode (hr, lr) pixel pairs into cached latents, semantic tokens and tag embeddings."""
    tagger = tagger or StatTagger()
    hr_l, lr_l, sems, prompts = [], [], [], []
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        hr = to_tensor([p[0] for p in part])
        lr_up = [lr_to_hr_size(lr, h.shape) for h, lr in part]
        lr = to_tensor(lr_up)
        hr_l.append(autoencoder.encode_latent(hr))
        lr_l.append(autoencoder.encode_latent(lr))
        sems.append(extractor.extract(lr))
        prompts += [embed_prompt(tagger(img), prompt_dim) for img in lr_up]
    return TrainingData(torch.cat(hr_l), torch.cat(lr_l), SemanticEmbedding.cat(sems),
                        torch.stack(prompts))


class DiffusionTrainer:
    def __init__(self, denoiser: Denoiser, sched: NoiseSchedule, data: TrainingData,
                 cfg: TrainConfig, frozen_modules: dict[str, torch.nn.Module] | None = None):
        self.model, self.sched, self.data, self.cfg = denoiser, sched, data, cfg
        self.frozen_modules = frozen_modules or {}
        denoiser.freeze_backbone()
        for m in self.frozen_modules.values():
            for p in m.parameters():
                p.requires_grad_(False)
        self.params = dict(denoiser.trainable_named_parameters())
        self.opt = torch.optim.Adam(self.params.values(), lr=cfg.lr)
        self.step = 0
        self.history: list[tuple[int, float]] = []
        self.initial_checksums = self.frozen_checksums()

    def frozen_checksums(self) -> dict[str, str]:
        sums = {"backbone": self.model.checksums()["backbone"]}
        for name, m in self.frozen_modules.items():
            sums[name] = param_checksum(m.parameters())
        return sums

    def verify_frozen(self) -> dict[str, str]:
        now = self.frozen_checksums()
        changed = [k for k in now if now[k] != self.initial_checksums.get(k)]
        if changed:
            raise FrozenViolationError(f"frozen weights changed during training: {changed}")
        return now

    @torch.no_grad()
    def assign(self, name: str, value: torch.Tensor) -> None:
        """Overwrite one parameter; only the trainable partition accepts updates."""
        if name not in self.params:
            raise FrozenParameterError(f"parameter {name!r} is frozen or unknown")
        self.params[name].copy_(value)

    def train_step(self) -> float:
        gen = torch.Generator().manual_seed(derive_seed(self.cfg.seed, f"step:{self.step}"))
        n = len(self.data)
        idx = torch.randint(0, n, (min(self.cfg.batch_size, n),), generator=gen)
        drop = bool(torch.rand((), generator=gen) < self.cfg.prompt_dropout)
        x0, cond = self.data.batch(idx, drop)
        t = torch.randint(0, self.sched.T, (x0.shape[0],), generator=gen)
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        loss = training_loss(self.model, x0, cond, t, noise, self.sched)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        value = loss.item()
        self.history.append((self.step, value))
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            log.info("step %d loss %.5f", self.step, value)
        return value

    def train(self, steps: int | None = None) -> list[tuple[int, float]]:
        target = self.step + (self.cfg.steps if steps is None else steps)
        self.model.train()
        while self.step < target:
            self.train_step()
        self.model.eval()
        return self.history

    def state_dict(self) -> dict:
        return {"step": self.step, "optimizer": self.opt.state_dict(), "history": self.history}

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.opt.load_state_dict(state["optimizer"])
        self.history = [tuple(h) for h in state.get("history", [])]
