import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedts.vae import (
    VAE,
    BetaSchedule,
    ContinuousEmbedding,
    DiscreteEmbedding,
    EncoderConfig,
    FeatureLayout,
    LatentStats,
    TrainingDivergence,
    VAETrainConfig,
    decode_latents,
    encode_latents,
    frequency_features,
    hard_decode,
    kl_divergence,
    reconstruction_loss,
    reparameterize,
    train_vae,
    update_beta,
    vae_loss,
)

SMALL = EncoderConfig(d=8, cont_embed_width=8, channels=8, attn_heads=2, attn_ff_width=8,
                      rnn_hidden=12, mlp_hidden=16, decoder_hidden=16)


def toy_batch(layout, B=4, T=5, seed=0):
    g = np.random.default_rng(seed)
    cols = [g.integers(0, 2, (B, T)) for _ in range(layout.n_bin)]
    cols += [g.integers(0, k, (B, T)) for k in layout.cat_cards]
    cols += [g.random((B, T)) for _ in range(layout.n_cont)]
    return torch.tensor(np.stack(cols, axis=-1), dtype=torch.float32)


def test_layout_counts():
    layout = FeatureLayout(n_bin=2, cat_cards=(3, 5), n_cont=1)
    assert (layout.m, layout.F) == (4, 5)
    assert layout.disc_cards == (2, 2, 3, 5)


def test_frequency_features_values():
    out = frequency_features(torch.tensor([0.25], dtype=torch.float64))
    assert out.shape == (1, 16)
    expected = [math.sqrt(0.5), math.sqrt(0.5), 1.0, 0.0, 0.0, -1.0]
    np.testing.assert_allclose(out[0, :6].numpy(), expected, atol=1e-12)


def test_discrete_embedding_shapes_and_range_check():
    emb = DiscreteEmbedding((2, 3), d=7)
    out = emb(torch.tensor([[[0, 2], [1, 1]]]))
    assert out.shape == (1, 2, 2, 7)
    with pytest.raises(ValueError):
        emb(torch.tensor([[[0, 3]]]))


def test_continuous_embedding_ablation_is_affine():
    emb = ContinuousEmbedding(2, width=4, sinusoidal=False)
    nu = torch.rand(3, 5, 2)
    a, b, c = emb(nu), emb(2 * nu), emb(torch.zeros_like(nu))
    torch.testing.assert_close(b - c, 2 * (a - c))


def test_encoder_decoder_shapes():
    layout = FeatureLayout(1, (3,), 2)
    model = VAE(layout, SMALL)
    x = toy_batch(layout)
    heads, stats = model(x)
    assert stats.mu.shape == stats.log_var.shape == (4, 5, 4)
    assert heads["cont"].shape == (4, 5, 2)
    assert heads["bin"].shape == (4, 5, 1)
    assert heads["cat"].shape == (4, 5, 3)
    assert torch.all((heads["cont"] >= 0) & (heads["cont"] <= 1))


def test_all_continuous_layout_has_no_discrete_heads():
    layout = FeatureLayout(0, (), 3)
    model = VAE(layout, SMALL)
    heads, _ = model(torch.rand(2, 4, 3))
    assert heads["bin"].shape[-1] == 0 and heads["cat"].shape[-1] == 0


def test_hard_decode_order():
    layout = FeatureLayout(1, (3,), 1)
    heads = {
        "bin": torch.tensor([[[0.3]]]),
        "cat": torch.tensor([[[0.1, 2.0, -1.0]]]),
        "cont": torch.tensor([[[0.42]]]),
    }
    torch.testing.assert_close(hard_decode(heads, layout), torch.tensor([[[1.0, 1.0, 0.42]]]))


def test_cross_entropy_uniform_logits_is_log_k():
    layout = FeatureLayout(0, (4,), 0)
    x = torch.tensor([[[2.0], [0.0]]])
    heads = {"bin": x[..., :0], "cat": torch.zeros(1, 2, 4), "cont": x[..., :0]}
    total, parts = reconstruction_loss(x, heads, layout)
    assert total.item() == pytest.approx(math.log(4), abs=1e-6)
    assert parts["cont"].item() == 0.0


def test_kl_closed_form_example():
    stats = LatentStats(mu=torch.ones(1, 1, 1), log_var=torch.zeros(1, 1, 1))
    assert kl_divergence(stats).item() == pytest.approx(0.5)
    # summed over a window's entries, averaged over windows
    stats = LatentStats(mu=torch.ones(3, 2, 2), log_var=torch.zeros(3, 2, 2))
    assert kl_divergence(stats).item() == pytest.approx(2.0)
    assert kl_divergence(stats, "mean").item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_divergence(stats, "max")


def test_vae_loss_beta_weighting():
    layout = FeatureLayout(n_bin=0, cat_cards=(), n_cont=2)
    x = torch.full((2, 3, 2), 0.5)
    heads = {"cont": torch.full((2, 3, 2), 0.5), "bin": torch.zeros(2, 3, 0), "cat": torch.zeros(2, 3, 0)}
    stats = LatentStats(mu=torch.ones(2, 3, 2), log_var=torch.zeros(2, 3, 2))
    assert vae_loss(x, heads, stats, 0.0, layout).item() == 0.0
    assert vae_loss(x, heads, stats, 0.1, layout).item() == pytest.approx(0.3)
    assert vae_loss(x, heads, stats, 0.1, layout, kl_reduction="mean").item() == pytest.approx(0.05)


def test_kl_zero_at_prior():
    stats = LatentStats(mu=torch.zeros(2, 3, 4), log_var=torch.zeros(2, 3, 4))
    assert kl_divergence(stats).item() == 0.0


def test_reparameterize_is_seeded():
    stats = LatentStats(mu=torch.zeros(2, 3), log_var=torch.zeros(2, 3))
    torch.testing.assert_close(reparameterize(stats, seed=3), reparameterize(stats, seed=3))
    assert not torch.equal(reparameterize(stats, seed=3), reparameterize(stats, seed=4))


def test_beta_decays_after_patience_and_floors():
    sched = BetaSchedule(patience=3)
    for value in [1.0, 1.0, 1.0]:
        sched = update_beta(sched, value)
    assert sched.beta == pytest.approx(0.1)
    sched = update_beta(sched, 1.0)
    assert sched.beta == pytest.approx(0.07)
    low = BetaSchedule(beta=1.2e-5, patience=1)
    low = update_beta(update_beta(low, 1.0), 1.0)
    assert low.beta == 1e-5


def test_beta_improvement_resets_wait():
    sched = BetaSchedule(patience=3)
    for value in [1.0, 1.0, 1.0, 0.5, 0.5, 0.5]:
        sched = update_beta(sched, value)
    assert sched.beta == pytest.approx(0.1)
    # a change below the relative tolerance does not count as improvement
    sched = update_beta(sched, 0.5 * (1 - 1e-6))
    assert sched.beta == pytest.approx(0.07)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=400))
def test_property_beta_monotone_and_bounded(history):
    sched = BetaSchedule()
    betas = []
    for v in history:
        sched = update_beta(sched, v)
        betas.append(sched.beta)
    assert all(b2 <= b1 for b1, b2 in zip(betas, betas[1:]))
    assert all(1e-5 <= b <= 0.1 for b in betas)


def test_training_reduces_reconstruction_and_is_deterministic():
    layout = FeatureLayout(1, (3,), 2)
    x = toy_batch(layout, B=16, T=6)
    cfg = VAETrainConfig(epochs=60, lr=3e-3, batch_size=8, seed=1, log_every=0)
    m1, h1 = train_vae(x, layout, SMALL, cfg)
    m2, h2 = train_vae(x, layout, SMALL, cfg)
    assert h1.recons == h2.recons
    assert np.mean(h1.recons[-10:]) < np.mean(h1.recons[:10])
    assert not m1.training
    z = encode_latents(m1, x)
    assert z.shape == (16, 6, 4)
    dec = decode_latents(m1, z)
    assert set(np.unique(dec[..., 0])) <= {0.0, 1.0}
    assert set(np.unique(dec[..., 1])) <= {0.0, 1.0, 2.0}


def test_training_divergence_raises():
    layout = FeatureLayout(0, (), 2)
    x = torch.full((4, 3, 2), float("nan"))
    with pytest.raises(TrainingDivergence):
        train_vae(x, layout, SMALL, VAETrainConfig(epochs=2, log_every=0))
