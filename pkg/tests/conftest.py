"""Shared toy fixtures. Everything here is deterministic and CPU-sized."""

from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from semsr.autoencoder import Autoencoder, AutoencoderConfig, train_autoencoder
from semsr.degradation import DatasetConfig, assemble_training_set
from semsr.denoiser import Denoiser, DenoiserConfig
from semsr.diffusion import build_schedule
from semsr.pipeline import load_pairs
from semsr.semantic import SemanticExtractor
from semsr.toy import write_toy_corpus
from semsr.training import DiffusionTrainer, TrainConfig, lr_to_hr_size, prepare_training_data, to_tensor

TOY_SIZE = 64

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return write_toy_corpus(root, size=TOY_SIZE)


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus, tmp_path_factory):
    """Eight patch pairs: four LSDIR, two UGC pairs, two UGC HR."""
    out = tmp_path_factory.mktemp("dataset")
    cfg = DatasetConfig(patch_size=TOY_SIZE, stride=TOY_SIZE)
    assemble_training_set(toy_corpus["lsdir"], toy_corpus["ugc_pairs"], toy_corpus["ugc_hr"], cfg, out)
    return out / "manifest.jsonl"


@pytest.fixture(scope="session")
def toy_pairs(toy_manifest):
    pairs = load_pairs(toy_manifest)
    assert len(pairs) == 8
    return pairs


@pytest.fixture(scope="session")
def ae_history(toy_pairs):
    """Autoencoder trained on HR and upsampled-LR patches; also records per-epoch round-trip MSE."""
    images = to_tensor([hr for hr, _ in toy_pairs] + [lr_to_hr_size(lr, hr.shape) for hr, lr in toy_pairs])
    hr = images[:8]
    ae = Autoencoder(AutoencoderConfig())
    errors = []

    @torch.no_grad()
    def on_epoch(_):
        ae.eval()
        errors.append(torch.mean((ae.decode(ae.encode(hr)[0]) - hr) ** 2).item())
        ae.train()

    train_autoencoder(ae, images, steps=400, lr=3e-3, batch_size=8, seed=0, on_epoch=on_epoch)
    ae.calibrate_scaling(images)
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae, errors, hr


@pytest.fixture(scope="session")
def trained_ae(ae_history):
    return ae_history[0]


@pytest.fixture(scope="session")
def extractor():
    return SemanticExtractor()


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def toy_data(toy_pairs, trained_ae, extractor):
    return prepare_training_data(toy_pairs, trained_ae, extractor, DenoiserConfig().prompt_dim)


@pytest.fixture(scope="session")
def toy_run(toy_data, trained_ae, extractor, schedule):
    """The 2,000-step desk-scale training run, with checksums taken at 0, 100 and 2,000 steps."""
    model = Denoiser(DenoiserConfig())
    trainer = DiffusionTrainer(model, schedule, toy_data, TrainConfig(steps=2000, log_every=0),
                               frozen_modules={"autoencoder": trained_ae, "extractor": extractor})
    sums = {0: {**model.checksums(), **trainer.frozen_checksums()}}
    start = time.perf_counter()
    trainer.train(100)
    sums[100] = {**model.checksums(), **trainer.frozen_checksums()}
    trainer.train(1900)
    sums[2000] = {**model.checksums(), **trainer.frozen_checksums()}
    return {"trainer": trainer, "model": model, "checksums": sums, "seconds": time.perf_counter() - start,
            "losses": np.array([l for _, l in trainer.history])}
