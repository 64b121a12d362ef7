import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hybridiff.backbone import ModelConfig, build_model
from hybridiff.diffusion import (DEFAULT_GUIDANCE, DEFAULT_STEPS, P_UNCOND, GaussianEpsilon, cfg_combine,
                                 dpm_solver_sample, make_schedule, q_sample, sampling_taus, training_loss)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


def test_schedule_endpoints_and_products(schedule):
    assert schedule.T == 1000
    assert schedule.betas[0].item() == pytest.approx(1e-4) and schedule.betas[-1].item() == pytest.approx(2e-2)
    ab = np.cumprod(1 - np.linspace(1e-4, 2e-2, 1000))
    np.testing.assert_allclose(schedule.alpha_bar.numpy(), ab, rtol=1e-12)
    assert bool((schedule.alpha_bar[1:] < schedule.alpha_bar[:-1]).all())


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, kind="cosine")


def test_log_snr_round_trip(schedule):
    tau = np.linspace(0, 999, 57)
    lam = schedule.log_snr(tau)
    assert np.all(np.diff(lam) < 0)
    np.testing.assert_allclose(schedule.tau_from_log_snr(lam), tau, atol=1e-6)
    a, s = schedule.alpha_sigma(tau)
    np.testing.assert_allclose(a ** 2 + s ** 2, 1.0, rtol=1e-12)


def test_q_sample_formula(schedule):
    x0 = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([0, 10, 500, 999])
    out = q_sample(x0, t, eps, schedule)
    for i, ti in enumerate(t.tolist()):
        ab = schedule.alpha_bar[ti].item()
        torch.testing.assert_close(out[i], ab ** 0.5 * x0[i] + (1 - ab) ** 0.5 * eps[i])
    with pytest.raises(ValueError):
        q_sample(x0, torch.tensor([1000, 0, 0, 0]), eps, schedule)


@settings(max_examples=20, deadline=None)
@given(w=st.floats(-3, 10), seed=st.integers(0, 100))
def test_cfg_combine(w, seed):
    g = torch.Generator().manual_seed(seed)
    c, u = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    torch.testing.assert_close(cfg_combine(c, u, w), u + w * (c - u))
    torch.testing.assert_close(cfg_combine(c, u, 1.0), c)
    torch.testing.assert_close(cfg_combine(c, u, 0.0), u)


def test_defaults():
    assert DEFAULT_STEPS == 20 and DEFAULT_GUIDANCE == 4.5 and P_UNCOND == 0.1


def test_sampling_taus(schedule):
    taus = sampling_taus(schedule, 20)
    assert len(taus) == 21 and taus[0] == 999 and taus[-1] == 0
    assert np.all(np.diff(taus) < 0)
    np.testing.assert_allclose(np.diff(schedule.log_snr(taus)), np.diff(schedule.log_snr(taus)).mean(), rtol=1e-4)


def test_gaussian_oracle_is_exact_epsilon(schedule):
    # for x0 ~ N(mu, s^2), E[eps | x_t] = sigma (x - alpha mu) / (alpha^2 s^2 + sigma^2)
    oracle = GaussianEpsilon(schedule, mu=2.0, sigma=0.5)
    g = torch.Generator().manual_seed(0)
    n = 400_000
    x0 = 2.0 + 0.5 * torch.randn(n, generator=g, dtype=torch.float64)
    eps = torch.randn(n, generator=g, dtype=torch.float64)
    t = 300
    xt = q_sample(x0, torch.tensor(t), eps, schedule)
    pred = oracle(xt.reshape(n, 1), torch.full((n,), float(t), dtype=torch.float64)).reshape(n)
    # the conditional-mean property: residual uncorrelated with x_t
    resid = eps - pred
    assert abs(float(resid.mean())) < 5e-3
    assert abs(float(torch.corrcoef(torch.stack([resid, xt]))[0, 1])) < 5e-3


def _sample_error(schedule, steps, n=4000):
    oracle = GaussianEpsilon(schedule, mu=2.0, sigma=0.5)
    noise = torch.randn(n, 1, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    text, mask = torch.zeros(n, 1, 1), torch.ones(n, 1, dtype=torch.bool)
    out = dpm_solver_sample(oracle, text, mask, schedule, steps=steps, guidance=1.0, noise=noise)
    exact = oracle.flow(noise, schedule.T - 1, 0)
    return out, float(torch.sqrt(((out - exact) ** 2).mean()))


def test_sampler_recovers_gaussian_and_converges(schedule):
    errors = [_sample_error(schedule, s)[1] for s in (1, 5, 20)]
    assert errors[0] > errors[1] > errors[2]
    out, _ = _sample_error(schedule, 20)
    assert abs(out.mean().item() - 2.0) / 2.0 < 0.05
    assert abs(out.var().item() - 0.25) / 0.25 < 0.10


def test_guidance_one_skips_null_pass(schedule):
    calls = []

    def model(x, t, text, mask, drop_text=None):
        calls.append(x.shape[0])
        return torch.zeros_like(x)

    dpm_solver_sample(model, torch.zeros(3, 1, 1), torch.ones(3, 1, dtype=torch.bool), schedule, steps=4,
                      guidance=1.0, noise=torch.zeros(3, 1))
    assert calls == [3] * 4
    calls.clear()
    dpm_solver_sample(model, torch.zeros(3, 1, 1), torch.ones(3, 1, dtype=torch.bool), schedule, steps=4,
                      guidance=4.5, noise=torch.zeros(3, 1))
    assert calls == [6] * 4


def test_sampler_rejects_zero_steps(schedule):
    with pytest.raises(ValueError):
        dpm_solver_sample(GaussianEpsilon(schedule, 0, 1), torch.zeros(1, 1, 1), torch.ones(1, 1, dtype=torch.bool),
                          schedule, steps=0, noise=torch.zeros(1, 1))


def test_training_loss_is_seeded(schedule):
    model = build_model(ModelConfig(hidden=16, d_text=8))
    x0 = torch.rand(4, 3, 16, 16) * 2 - 1
    text, mask = torch.randn(4, 3, 8), torch.ones(4, 3, dtype=torch.bool)
    a = training_loss(model, x0, text, mask, torch.Generator().manual_seed(5), schedule)
    b = training_loss(model, x0, text, mask, torch.Generator().manual_seed(5), schedule)
    c = training_loss(model, x0, text, mask, torch.Generator().manual_seed(6), schedule)
    assert a.item() == b.item() != c.item()
    assert a.requires_grad
    with pytest.raises(ValueError):
        training_loss(model, x0[:0], text[:0], mask[:0], torch.Generator(), schedule)
