"""End-to-end acceptance gates. Each test records one PASS/FAIL line, printed in the terminal summary."""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

import oracles
from acceptance_log import record
from conftest import TRAFFIC
from mixedts.datasets import synthetic_entities
from mixedts.diffusion import (
    NoisePredictor,
    NoisePredictorConfig,
    diffusion_loss,
    forward_perturb,
    make_schedule,
)
from mixedts.metrics import (
    METRIC_NAMES,
    correlation_ratio,
    discriminative_score,
    evaluate,
    feature_correlation_score,
    format_table,
    pearson_r,
    temporal_discriminative_score,
    theils_u,
)
from mixedts.pipeline import VARIANTS, RunConfig, ablate, prepare, synthesize_like, train
from mixedts.sampling import (
    GenerationRequest,
    generate_processed,
    measure_sampling_time,
    reverse_step,
    sample_conditional,
)
from mixedts.vae import VAE, EncoderConfig, FeatureLayout, LatentStats, kl_divergence, reparameterize, vae_loss


def desk_traffic_config(**overrides) -> RunConfig:
    return RunConfig.from_profile("desk", dataset=str(TRAFFIC), **overrides)


# ---------------------------------------------------------------- 1


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        cols = int(rng.integers(2, 7))
        kinds = rng.integers(0, 2, cols)  # 0 continuous, 1 categorical
        table = [
            rng.integers(0, rng.integers(1, 7), n) if k else rng.normal(size=n) * rng.uniform(0.1, 5)
            for k in kinds
        ]
        for i in range(cols):
            for j in range(cols):
                if i == j:
                    continue
                a, b = table[i], table[j]
                if not kinds[i] and not kinds[j]:
                    got, want = pearson_r(a, b), oracles.pearson(list(a), list(b))
                elif kinds[i] and kinds[j]:
                    got, want = theils_u(a, b), oracles.theil(list(a), list(b))
                elif kinds[i]:
                    got, want = correlation_ratio(a, b), oracles.eta(list(a), list(b))
                else:
                    continue
                worst = max(worst, abs(got - want))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 60
    record(1, ok, f"metric oracles: {checked} pairs on 500 tables, max abs error {worst:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_self_fidelity_floor():
    data = prepare(desk_traffic_config())
    x = data.windows.x_proc
    fc = feature_correlation_score(x, x, data.cards)
    order = np.random.default_rng(0).permutation(len(x))
    a, b = x[order[: len(x) // 2]], x[order[len(x) // 2 :]]
    disc = discriminative_score(a, b, data.cards, seed=0)
    tdisc = temporal_discriminative_score(a, b, data.cards, num_lags=10, seed=0)
    ok = fc == 0.0 and disc <= 0.15 and tdisc <= 0.15
    record(2, ok, f"self fidelity: fc(X,X)={fc:.3f}, disc(halves)={disc:.3f}, tdisc(halves)={tdisc:.3f} (<= 0.15)")
    assert ok


# ---------------------------------------------------------------- 3


def flat_grad(loss_fn, params):
    grads = torch.autograd.grad(loss_fn(), params)
    return torch.cat([g.reshape(-1) for g in grads])


def finite_difference(loss_fn, params, h=1e-6):
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + h
                up = loss_fn().item()
                flat[k] = old - h
                down = loss_fn().item()
                flat[k] = old
                out.append((up - down) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def relative_error(a, b):
    return (torch.linalg.norm(a - b) / torch.linalg.norm(b).clamp_min(1e-12)).item()


def test_criterion_3_numerical_correctness():
    torch.manual_seed(0)
    B, T = 2, 4
    layout = FeatureLayout(n_bin=1, cat_cards=(3,), n_cont=1)
    cfg = EncoderConfig(d=4, cont_embed_width=4, channels=4, attn_heads=2, attn_ff_width=4,
                        rnn_hidden=5, mlp_hidden=6, decoder_hidden=6)
    vae = VAE(layout, cfg).double().eval()
    g = np.random.default_rng(0)
    x = torch.tensor(
        np.stack([g.integers(0, 2, (B, T)), g.integers(0, 3, (B, T)), g.random((B, T))], axis=-1),
        dtype=torch.float64,
    )

    def vae_objective():
        stats = vae.encoder(x)
        z = reparameterize(stats, seed=3)
        return vae_loss(x, vae.decoder(z), stats, 0.1, layout)

    params = [p for p in vae.parameters() if p.requires_grad]
    vae_err = relative_error(flat_grad(vae_objective, params), finite_difference(vae_objective, params))

    eps_cfg = NoisePredictorConfig(encoding_width=4, brnn_hidden=3, brnn_layers=1, mlp_hidden=4)
    model = NoisePredictor(3, eps_cfg).double().eval()
    z0 = torch.randn(B, T, 3, dtype=torch.float64)
    t = torch.linspace(0, 1, T, dtype=torch.float64)
    ts = torch.tensor(g.integers(1, 12, (B, T, 4)))
    schedule = make_schedule(10, 1e-3, 0.2)

    def eps_objective():
        return diffusion_loss(model, z0, t, ts, schedule, seed=5)

    params = [p for p in model.parameters() if p.requires_grad]
    eps_err = relative_error(flat_grad(eps_objective, params), finite_difference(eps_objective, params))

    # closed-form KL against a Monte-Carlo estimate of E_q[log q - log p]
    stats = LatentStats(
        mu=0.4 * torch.randn(B, T, 3, dtype=torch.float64),
        log_var=0.5 * torch.randn(B, T, 3, dtype=torch.float64),
    )
    closed = kl_divergence(stats).item()
    gen = torch.Generator().manual_seed(0)
    S = 1_000_000
    std = torch.exp(0.5 * stats.log_var)
    mc_terms = torch.zeros(B, dtype=torch.float64)
    for chunk in range(10):
        e = torch.randn((S // 10, *stats.mu.shape), generator=gen, dtype=torch.float64)
        z = stats.mu + std * e
        log_q = -0.5 * (e**2 + stats.log_var)
        log_p = -0.5 * z**2
        mc_terms += (log_q - log_p).sum(dim=(2, 3)).sum(dim=0)
    mc = (mc_terms / S).mean().item()
    ok = vae_err < 1e-4 and eps_err < 1e-4 and abs(closed - mc) < 1e-2
    record(3, ok, f"gradients: vae rel err {vae_err:.1e}, diffusion rel err {eps_err:.1e}; "
                  f"KL closed {closed:.4f} vs MC {mc:.4f}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_kernel_consistency():
    S = 100_000
    schedule = make_schedule(100, 1e-3, 0.2)
    gen = torch.Generator().manual_seed(0)
    # non-Gaussian start so the test exercises the mean and scale terms separately
    z0 = torch.rand(S, generator=gen, dtype=torch.float64) * 2 + 1
    z = z0.clone()
    worst = 0.0
    checkpoints = {1, 5, 20, 50, 100}
    for n in range(1, 101):
        a = float(schedule.alpha[n - 1])
        z = np.sqrt(a) * z + np.sqrt(1 - a) * torch.randn(S, generator=gen, dtype=torch.float64)
        if n not in checkpoints:
            continue
        direct, _ = forward_perturb(z0, n, schedule, generator=gen)
        se_mean = np.sqrt(z.var().item() / S + direct.var().item() / S)
        worst = max(worst, abs(z.mean().item() - direct.mean().item()) / se_mean)
        # variance SE from the fourth central moment of each sample
        var_se = np.sqrt(
            sum(((s - s.mean()) ** 4).mean().item() / S - s.var().item() ** 2 / S for s in (z, direct))
        )
        worst = max(worst, abs(z.var().item() - direct.var().item()) / var_se)
    ok = worst <= 3.0
    record(4, ok, f"forward kernel vs sequential composition: worst moment gap {worst:.2f} standard errors (<= 3)")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_sampler_inversion():
    schedule = make_schedule(1, 0.1, 0.1)
    z0 = torch.randn(3, 7, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    z1, noise = forward_perturb(z0, 1, schedule, seed=2)
    back = reverse_step(z1, noise, 1, schedule, noise=torch.randn_like(z0))
    inv_err = (back - z0).abs().max().item()

    torch.manual_seed(0)
    model = NoisePredictor(2, NoisePredictorConfig(label_vocab=3, encoding_width=8, brnn_hidden=6,
                                                   brnn_layers=1, mlp_hidden=8))
    model.trained.fill_(True)
    model.eval()
    t, ts = np.linspace(0, 1, 6), np.zeros((3, 6, 4), int)
    guided = sample_conditional(model, make_schedule(20), t, ts, [0, 1, 2], omega=0.0, seed=4)
    plain = sample_conditional(model, make_schedule(20), t, ts, [0, 1, 2], seed=4, guided=False)
    bitwise = torch.equal(guided, plain)
    ok = inv_err <= 1e-10 and bitwise
    record(5, ok, f"N=1 inversion max error {inv_err:.1e}; omega=0 bitwise equal to conditional-only: {bitwise}")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_desk_scale_traffic():
    start = time.perf_counter()
    config = desk_traffic_config(seed=0)
    data = prepare(config)
    bundle = train(config, data)
    synth = synthesize_like(bundle, data, seed=0)
    real = data.windows.x_proc
    report = evaluate(real, synth, data.cards, data.target_index, data.dataset.target_column, repeats=3, seed=0)
    rng = np.random.default_rng(0)
    shuffled = np.stack([w[rng.permutation(len(w))] for w in real])
    baseline = temporal_discriminative_score(real, shuffled, data.cards, num_lags=10, seed=0)
    elapsed = time.perf_counter() - start
    disc, tdisc, fc = report.discriminative.mean, report.temporal_discriminative.mean, report.feature_correlation.mean
    ok = disc <= 0.30 and tdisc <= 0.30 and fc <= 0.5 and tdisc < baseline and elapsed <= 4 * 3600
    record(6, ok, f"desk Traffic: disc {report.discriminative}, tdisc {report.temporal_discriminative} "
                  f"(shuffled-real {baseline:.3f}), fc {report.feature_correlation}, "
                  f"pred {report.predictive}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_sampling_time_linear_in_steps(tiny_bundle):
    request = GenerationRequest(count=64)
    base = replace(tiny_bundle, schedule=make_schedule(50, 1e-3, 0.2))
    double = replace(tiny_bundle, schedule=make_schedule(100, 1e-3, 0.2))
    measure_sampling_time(base, repeats=1, request=request)  # warm-up
    t1, s1 = measure_sampling_time(base, repeats=10, request=request)
    t2, s2 = measure_sampling_time(double, repeats=10, request=request)
    ratio = t2 / t1

    calls = []
    hook = double.predictor.register_forward_hook(lambda *_: calls.append(1))
    try:
        generate_processed(GenerationRequest(count=300), double)
    finally:
        hook.remove()
    ok = 1.4 <= ratio <= 2.6 and len(calls) == 100
    record(7, ok, f"sampling time N=50 {t1:.3f}({s1:.3f})s, N=100 {t2:.3f}({s2:.3f})s, ratio {ratio:.2f}; "
                  f"{len(calls)} network calls for 300 windows")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_conditional_level_ordering():
    start = time.perf_counter()
    levels = (0.0, 5.0, 10.0)
    ds = synthetic_entities(n_entities=3, length=200, levels=levels, seed=0)
    ds.T = 24
    config = RunConfig.from_profile("desk", adapter="csv", conditional=True, T=24, seed=0)
    data = prepare(config, dataset=ds)
    bundle = train(config, data)
    labels = ["e0", "e1", "e2"]
    value = bundle.schema.index_of("value")
    means = []
    for lbl in labels:
        x, _ = generate_processed(GenerationRequest(count=32, lbl=[lbl] * 32, seed=1), bundle)
        means.append(float(x[..., value].mean()))
    rank = np.corrcoef(np.argsort(np.argsort(means)), np.arange(3))[0, 1]
    elapsed = time.perf_counter() - start
    ok = rank == pytest.approx(1.0) and elapsed < 30 * 60
    record(8, ok, f"conditional levels {levels}: generated means (scaled) "
                  f"{', '.join(f'{m:.3f}' for m in means)}, rank corr {rank:.2f}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_ablation_harness():
    reports = ablate(desk_traffic_config(seed=0), VARIANTS, repeats=3)
    table = format_table(reports)
    expected = ["full", *VARIANTS]
    complete = list(reports) == expected and all(
        np.isfinite(getattr(r, m).mean) and len(getattr(r, m).scores) == 3 for r in reports.values() for m in METRIC_NAMES
    )
    rows = [line.split()[0] for line in table.splitlines()[1:]]
    ok = complete and rows == list(METRIC_NAMES) and all(name in table for name in expected)
    print(table)
    record(9, ok, f"ablation report columns {list(reports)}; rows {rows}")
    assert ok
