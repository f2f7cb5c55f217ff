"""Tag prompts: a deterministic image tagger and hashed word embeddings.

The tagger reads a handful of global image statistics and emits one word per
statistic, so every image gets the same number of tags. Any callable
``img -> list[str]`` can replace it.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

POSITIVE_PROMPT = ("clean", "high-resolution", "8K", "ultra-detailed", "ultra-realistic")
NEGATIVE_PROMPT = ("dotted", "noise", "blur", "low-resolution", "smooth",
                   "unrealistic physics", "unnatural shadows")
PROMPT_SETS = {"none": (), "positive": POSITIVE_PROMPT, "negative": NEGATIVE_PROMPT}


def parse_prompt(text: str | list[str] | tuple[str, ...] | None) -> list[str]:
    if text is None:
        return []
    if isinstance(text, str):
        return [w.strip() for w in text.split(",") if w.strip()]
    return [w.strip() for w in text if w.strip()]


def word_embedding(word: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(word.strip().lower().encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def embed_prompt(words, dim: int, dtype=torch.float32) -> torch.Tensor | None:
    """(n_words, dim) token matrix, or ``None`` for an empty prompt."""
    words = parse_prompt(words)
    if not words:
        return None
    return torch.tensor(np.stack([word_embedding(w, dim) for w in words]), dtype=dtype)


class StatTagger:
    """Four tags per image: brightness, saturation, detail and dominant hue."""

    def __call__(self, img: np.ndarray) -> list[str]:
        img = np.asarray(img, dtype=np.float64)
        lum = img.mean(axis=-1)
        sat = (img.max(axis=-1) - img.min(axis=-1)).mean()
        gy, gx = np.gradient(lum)
        detail = np.sqrt(gx ** 2 + gy ** 2).mean()
        hue = ("red", "green", "blue")[int(np.argmax(img.reshape(-1, 3).mean(axis=0)))]
        return ["bright" if lum.mean() > 0.5 else "dark",
                "colorful" if sat > 0.15 else "muted",
                "detailed" if detail > 0.02 else "plain",
                f"{hue}dish"]
