import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from semsr.denoiser import (ConditioningBundle, CrossAttention, Denoiser, DenoiserConfig, attention,
                            trainable_parameters)
from semsr.diffusion import build_schedule, training_loss
from semsr.semantic import SemanticEmbedding, sinusoidal_pos_2d
from semsr.training import DiffusionTrainer, FrozenParameterError, TrainConfig

from gradcheck import central_difference_check

SMALL = dict(widths=(8, 16), attention_levels=(1,), norm_groups=4, prompt_dim=8, semantic_dim=8)


def semantic(batch, n=4, dim=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    side = int(math.isqrt(n))
    feats = [torch.randn(batch, n, dim, generator=g, dtype=dtype)]
    return SemanticEmbedding(feats, [sinusoidal_pos_2d(side, side, dim).to(dtype)], [(side, side)], [4])


def bundle(batch=2, size=8, seed=0, channels=4, dim=8, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed + 1)
    lr = torch.randn(batch, channels, size, size, generator=g, dtype=dtype)
    prompt = torch.randn(batch, 3, dim, generator=g, dtype=dtype)
    return ConditioningBundle(lr, prompt, semantic(batch, dim=dim, seed=seed, dtype=dtype))


def test_default_shapes_and_empty_conditions():
    model = Denoiser(DenoiserConfig()).eval()
    x = torch.randn(2, 4, 16, 16)
    with torch.no_grad():
        out = model(x, torch.tensor([3, 900]), ConditioningBundle(lr_latent=torch.randn(2, 4, 16, 16)))
        assert out.shape == x.shape and torch.isfinite(out).all()
        out_nc = model.predict_noise(x, 5, None, use_control=False)
        assert out_nc.shape == x.shape


def test_zero_init_out_gives_zero_prediction():
    model = Denoiser(DenoiserConfig(zero_init_out=True, **SMALL)).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 4, 8, 8), 10, bundle(1))
    assert torch.count_nonzero(out) == 0


def test_attention_blocks_and_control_branch_are_identity_at_init():
    model = Denoiser(DenoiserConfig(**SMALL)).eval()
    x = torch.randn(2, 4, 8, 8)
    cond = bundle(2)
    with torch.no_grad():
        full = model(x, 100, cond)
        bare = model.predict_noise(x, 100, ConditioningBundle(cond.lr_latent), use_control=False)
    assert torch.equal(full, bare)


def test_perturbing_zero_convs_changes_output():
    model = Denoiser(DenoiserConfig(**SMALL)).eval()
    x, cond = torch.randn(1, 4, 8, 8), bundle(1)
    with torch.no_grad():
        before = model(x, 50, cond)
        for zc in model.control.zero_convs:
            zc.weight.normal_(0, 0.1)
        model.control.hint[-1].weight.normal_(0, 0.1)
        after = model(x, 50, cond)
    assert not torch.allclose(before, after)


def test_control_branch_residual_shapes():
    model = Denoiser(DenoiserConfig())
    x = torch.randn(1, 4, 16, 16)
    res = model.control_branch_forward(x, torch.tensor([7]), torch.randn_like(x))
    assert [tuple(r.shape) for r in res] == [(1, 32, 16, 16), (1, 48, 8, 8), (1, 64, 4, 4), (1, 64, 4, 4)]
    assert all(torch.count_nonzero(r) == 0 for r in res)


def test_control_branch_input_errors():
    model = Denoiser(DenoiserConfig(**SMALL))
    x = torch.randn(1, 4, 8, 8)
    with pytest.raises(ValueError):
        model.control_branch_forward(x, torch.tensor([1]), None)
    with pytest.raises(ValueError):
        model.control_branch_forward(x, torch.tensor([1]), torch.randn(1, 4, 4, 4))
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(control_branch=False, **SMALL)).control_branch_forward(x, torch.tensor([1]), x)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(attention_levels=())
    with pytest.raises(ValueError):
        DenoiserConfig(attention_levels=(3,))


def test_control_branch_starts_as_core_copy():
    model = Denoiser(DenoiserConfig(**SMALL))
    core = dict(model.named_parameters())
    for name, p in model.control.named_parameters():
        if name.split(".")[0] in ("time_embed", "conv_in", "down_res", "downsamplers", "mid"):
            assert torch.equal(p, core[name])


def test_parameter_partition():
    model = Denoiser(DenoiserConfig(**SMALL))
    names = {n for n, _ in model.named_parameters()}
    train = {n for n, _ in model.trainable_named_parameters()}
    frozen = {n for n, _ in model.frozen_named_parameters()}
    assert train | frozen == names and not train & frozen
    assert train and frozen
    assert all(n.startswith(("control.", "attn.")) for n in train)
    model.freeze_backbone()
    assert {n for n, p in model.named_parameters() if p.requires_grad} == train
    assert len(trainable_parameters(model)) == len(train)


def test_assign_rejects_frozen_parameter(toy_data, schedule):
    model = Denoiser(DenoiserConfig())
    trainer = DiffusionTrainer(model, schedule, toy_data, TrainConfig(steps=1, log_every=0))
    with pytest.raises(FrozenParameterError):
        trainer.assign("conv_out.weight", torch.zeros_like(model.conv_out.weight))
    trainer.assign("control.mid_zero.bias", torch.ones_like(model.control.mid_zero.bias))
    assert torch.all(model.control.mid_zero.bias == 1)


def test_cross_attention_hand_oracle():
    block = CrossAttention(2, 1, 1).double()
    with torch.no_grad():
        block.norm.weight.zero_()
        block.norm.bias.fill_(1.0)
        block.to_q.weight.copy_(torch.tensor([[1.0, 0.0]]))
        block.to_k.weight.fill_(math.log(3.0))
        block.to_v.weight.fill_(1.0)
        block.to_out.weight.copy_(torch.tensor([[1.0], [0.0]]))
        block.to_out.bias.zero_()
    feat = torch.randn(1, 2, 1, 1, dtype=torch.float64)
    ctx = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
    # scores (0, ln 3) -> weights (1/4, 3/4) -> value 3/4 on channel 0
    out, w = block(feat, ctx, return_weights=True)
    assert out[0, 0, 0, 0].item() == pytest.approx(feat[0, 0, 0, 0].item() + 0.75, abs=1e-9)
    assert out[0, 1, 0, 0].item() == pytest.approx(feat[0, 1, 0, 0].item(), abs=1e-12)
    assert w[0, 0].tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
    # positional term enters the keys only: equal keys, values unchanged
    pos = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    out = block(feat, ctx, pos)
    assert out[0, 0, 0, 0].item() == pytest.approx(feat[0, 0, 0, 0].item() + 0.5, abs=1e-9)


def test_attention_function_example():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[math.sqrt(2) * math.log(2), 0.0], [0.0, 0.0]], dtype=torch.float64)
    v = torch.tensor([[3.0], [0.0]], dtype=torch.float64)
    out, w = attention(q, k, v, return_weights=True)
    assert w[0].tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-12)
    assert out.item() == pytest.approx(2.0, abs=1e-12)


def _random_block(channels=8, ctx=8, seed=0):
    torch.manual_seed(seed)
    block = CrossAttention(channels, ctx).double()
    with torch.no_grad():
        block.to_out.weight.normal_()
        block.to_out.bias.normal_()
    return block


def test_single_token_attention_returns_projected_value():
    block = _random_block()
    feat = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    token = torch.randn(1, 1, 8, dtype=torch.float64)
    out = block(feat, token, torch.randn(1, 8, dtype=torch.float64))
    expected = block.to_out(block.to_v(token[0, 0]))
    torch.testing.assert_close(out - feat, expected.view(1, 8, 1, 1).expand(1, 8, 3, 3))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 1000))
def test_attention_weights_rows_sum_to_one_and_permutation_invariant(n, seed):
    block = _random_block(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(2, 8, 2, 3, generator=g, dtype=torch.float64)
    ctx = torch.randn(2, n, 8, generator=g, dtype=torch.float64)
    pos = torch.randn(n, 8, generator=g, dtype=torch.float64)
    out, w = block(feat, ctx, pos, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 6, dtype=torch.float64))
    perm = torch.randperm(n, generator=g)
    torch.testing.assert_close(block(feat, ctx[:, perm], pos[perm]), out)


def test_empty_context_is_identity():
    block = _random_block()
    feat = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    assert torch.equal(block(feat, None), feat)
    assert torch.equal(block(feat, torch.zeros(1, 0, 8, dtype=torch.float64)), feat)


def test_trainable_gradients_match_finite_differences():
    cfg = DenoiserConfig(widths=(4, 4), attention_levels=(1,), norm_groups=2, prompt_dim=4,
                         semantic_dim=4, seed=3)
    model = Denoiser(cfg).double()
    model.freeze_backbone()
    n_train = sum(p.numel() for _, p in model.trainable_named_parameters())
    assert n_train <= 5000
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        # open the zero gates so every trainable tensor lies on the gradient path
        for _, p in model.trainable_named_parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    sched = build_schedule(1000)
    x0 = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    noise = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    t = torch.tensor([10, 700])
    cond = bundle(2, size=4, dim=4, dtype=torch.float64)
    loss_fn = lambda: training_loss(model, x0, cond, t, noise, sched)
    worst = central_difference_check(loss_fn, model.trainable_named_parameters(), per_tensor=2, seed=0)
    assert worst < 1e-4, worst


def test_deterministic_construction():
    a, b = Denoiser(DenoiserConfig(**SMALL)), Denoiser(DenoiserConfig(**SMALL))
    assert a.checksums() == b.checksums()
    c = Denoiser(DenoiserConfig(seed=1, **SMALL))
    assert c.checksums()["backbone"] != a.checksums()["backbone"]


def test_control_branch_matters_after_training(toy_run, toy_data):
    model = toy_run["model"]
    x0, cond = toy_data.batch(torch.arange(2), drop_prompt=False)
    x = torch.randn(x0.shape, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        with_c = model(x, 300, cond)
        without = model.predict_noise(x, 300, cond, use_control=False)
    assert (with_c - without).abs().max().item() > 1e-4
