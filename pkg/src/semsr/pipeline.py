"""Glue between config, models, checkpoints and the training loop."""

from __future__ import annotations

import csv
import logging
import pickle
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .autoencoder import Autoencoder, train_autoencoder
from .config import RunConfig, config_from_dict
from .degradation import DatasetManifest
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, build_schedule
from .sampler import Models
from .semantic import SemanticExtractor
from .training import DiffusionTrainer, TrainingData, lr_to_hr_size, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semsr-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return build_schedule(s.T, s.beta_start, s.beta_end, s.kind)


def build_models(cfg: RunConfig) -> Models:
    return Models(Autoencoder(cfg.autoencoder), Denoiser(cfg.denoiser), SemanticExtractor(cfg.extractor))


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, kind: str, cfg: RunConfig, modules: dict[str, torch.nn.Module],
                    trainer_state: dict | None = None, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION,
        "code_version": __version__, "kind": kind, "config": cfg.to_dict(),
        "state_dicts": {k: m.state_dict() for k, m in modules.items()},
        "trainer": trainer_state, "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {payload.get('format_version')}")
    return payload


def load_autoencoder(path) -> Autoencoder:
    payload = read_checkpoint(path)
    cfg = config_from_dict(payload["config"])
    ae = Autoencoder(cfg.autoencoder)
    ae.load_state_dict(payload["state_dicts"]["autoencoder"])
    ae.cfg.scaling_factor = payload["extra"].get("scaling_factor", ae.cfg.scaling_factor)
    return ae.eval()


def load_pipeline(path) -> tuple[RunConfig, Models, dict | None]:
    """Restore config, models and (if present) trainer state from a pipeline checkpoint."""
    payload = read_checkpoint(path)
    if payload["kind"] != "pipeline":
        raise CheckpointError(f"{path} holds a {payload['kind']!r} checkpoint, expected 'pipeline'")
    cfg = config_from_dict(payload["config"])
    models = build_models(cfg)
    sd = payload["state_dicts"]
    models.autoencoder.load_state_dict(sd["autoencoder"])
    models.autoencoder.cfg.scaling_factor = payload["extra"]["scaling_factor"]
    models.autoencoder.eval()
    models.denoiser.load_state_dict(sd["denoiser"])
    models.denoiser.eval()
    models.extractor.load_weights(sd["extractor"])
    return cfg, models, payload["trainer"]


def save_pipeline(path, cfg: RunConfig, models: Models, trainer_state: dict | None = None) -> None:
    save_checkpoint(path, "pipeline", cfg,
                    {"autoencoder": models.autoencoder, "denoiser": models.denoiser,
                     "extractor": models.extractor}, trainer_state,
                    {"scaling_factor": models.autoencoder.cfg.scaling_factor})


# -- training workflow -------------------------------------------------------------

def load_pairs(manifest_path) -> list[tuple[np.ndarray, np.ndarray]]:
    m = DatasetManifest.load(manifest_path)
    return [m.load_pair(r) for r in m.records]


def pretrain_autoencoder(cfg: RunConfig, pairs) -> Autoencoder:
    """Fit the autoencoder on HR patches and upsampled LR patches, then calibrate latent scale."""
    at = cfg.autoencoder_training
    if at.checkpoint:
        log.info("loading autoencoder from %s", at.checkpoint)
        return load_autoencoder(at.checkpoint)
    images = [hr for hr, _ in pairs] + [lr_to_hr_size(lr, hr.shape) for hr, lr in pairs]
    x = to_tensor(images)
    ae = Autoencoder(replace(cfg.autoencoder))
    losses = train_autoencoder(ae, x, at.steps, at.lr, at.batch_size, seed=cfg.seed)
    scale = ae.calibrate_scaling(x)
    log.info("autoencoder: %d steps, final loss %.5f, latent scale %.4f",
             at.steps, losses[-1] if losses else float("nan"), scale)
    return ae


def make_trainer(cfg: RunConfig, models: Models, data: TrainingData) -> DiffusionTrainer:
    return DiffusionTrainer(models.denoiser, schedule_from(cfg), data, replace(cfg.optimizer),
                            frozen_modules={"autoencoder": models.autoencoder,
                                            "extractor": models.extractor})


def write_loss_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])


def plot_loss(path, history, window: int = 100) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not history:
        return
    steps = np.array([h[0] for h in history])
    loss = np.array([h[1] for h in history])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.5, alpha=0.4, label="loss")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_autoencoder(path, cfg: RunConfig, ae: Autoencoder) -> None:
    save_checkpoint(path, "autoencoder", cfg, {"autoencoder": ae},
                    extra={"scaling_factor": ae.cfg.scaling_factor})
