import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from semsr.autoencoder import Autoencoder, AutoencoderConfig, kl_divergence, vae_loss
from semsr.metrics import psnr

from gradcheck import central_difference_check


def test_config_validation():
    with pytest.raises(ValueError):
        AutoencoderConfig(downscale_factor=6)
    with pytest.raises(ValueError):
        AutoencoderConfig(latent_channels=0)
    with pytest.raises(ValueError):
        AutoencoderConfig(kl_weight=-1)


def test_encode_decode_shapes():
    ae = Autoencoder(AutoencoderConfig())
    x = torch.rand(1, 3, 128, 128)
    mean, logvar = ae.encode(x)
    assert mean.shape == logvar.shape == (1, 4, 16, 16)
    assert torch.isfinite(mean).all() and torch.isfinite(logvar).all()
    out = ae.decode(torch.randn(1, 4, 16, 16))
    assert out.shape == (1, 3, 128, 128)
    assert out.min() >= 0 and out.max() <= 1


def test_encode_batch_independent():
    ae = Autoencoder(AutoencoderConfig()).eval()
    x = torch.rand(1, 3, 32, 32)
    mean, _ = ae.encode(torch.cat([x, x]))
    torch.testing.assert_close(mean[0], mean[1], rtol=0, atol=0)


def test_decode_deterministic():
    ae = Autoencoder(AutoencoderConfig()).eval()
    z = torch.randn(2, 4, 4, 4)
    assert torch.equal(ae.decode(z), ae.decode(z))


def test_encode_errors():
    ae = Autoencoder(AutoencoderConfig())
    with pytest.raises(ValueError):
        ae.encode(torch.rand(1, 3, 30, 32))
    with pytest.raises(ValueError):
        ae.encode(torch.full((1, 3, 16, 16), float("nan")))
    with pytest.raises(ValueError):
        ae.decode(torch.zeros(1, 3, 4, 4))


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), factor=st.sampled_from([2, 4, 8]))
def test_shape_round_trip(h, w, factor):
    ae = Autoencoder(AutoencoderConfig(downscale_factor=factor, base_width=8)).eval()
    x = torch.rand(1, 3, h * factor, w * factor)
    assert ae.decode(ae.encode(x)[0]).shape == x.shape


def test_perfect_code_has_zero_loss():
    img = torch.rand(2, 3, 8, 8)
    z = torch.zeros(2, 4, 1, 1)
    assert vae_loss(img, z, z, img).item() == 0.0
    assert kl_divergence(z, z).item() == 0.0


def test_scalar_kl_closed_form():
    # KL(N(1, 1) || N(0, 1)) = 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) = 0.5
    assert kl_divergence(torch.tensor([1.0]), torch.tensor([0.0])).item() == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mean = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    logvar = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    # non-negative up to round-off
    assert kl_divergence(mean, logvar).item() >= -1e-15


def test_vae_loss_rejects_non_finite():
    img = torch.rand(1, 3, 8, 8)
    z = torch.zeros(1, 4, 1, 1)
    with pytest.raises(FloatingPointError):
        vae_loss(img, z, torch.full_like(z, float("inf")), img)


def test_vae_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = AutoencoderConfig(downscale_factor=2, latent_channels=2, base_width=2, norm_groups=2, kl_weight=0.1)
    ae = Autoencoder(cfg).double()
    n_params = sum(p.numel() for p in ae.parameters())
    assert n_params <= 5000
    img = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    noise = torch.randn(2, 2, 2, 2, dtype=torch.float64)

    def loss_fn():
        recon, mean, logvar = ae(img, noise)
        return vae_loss(img, mean, logvar, recon, cfg.kl_weight)

    worst = central_difference_check(loss_fn, list(ae.named_parameters()), per_tensor=3, seed=0)
    assert worst < 1e-4


def test_trained_reconstruction_psnr(ae_history):
    ae, _, hr = ae_history
    with torch.no_grad():
        rec = ae.decode(ae.encode(hr)[0])
    value = psnr(rec.numpy(), hr.numpy())
    assert value > 25.0, value


def test_round_trip_error_non_increasing_over_5_epoch_windows(ae_history):
    _, errors, _ = ae_history
    windows = [float(np.mean(errors[i:i + 5])) for i in range(0, len(errors) - 4, 5)]
    assert len(windows) >= 10
    for a, b in zip(windows, windows[1:]):
        assert b <= a, (a, b)


def test_latent_scaling_round_trip(trained_ae):
    x = torch.rand(1, 3, 16, 16)
    z = trained_ae.encode_latent(x)
    torch.testing.assert_close(z / trained_ae.cfg.scaling_factor, trained_ae.encode(x)[0])
    torch.testing.assert_close(trained_ae.decode_latent(z), trained_ae.decode(trained_ae.encode(x)[0]))
