"""Forward noising, epsilon-MSE objective, guidance and DPM-Solver sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_GUIDANCE = 4.5
DEFAULT_STEPS = 20
P_UNCOND = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    # Sampling runs on a continuous index tau in [0, T-1]: log(alpha) is
    # interpolated linearly between the integer timesteps.
    def log_alpha(self, tau) -> np.ndarray:
        grid = 0.5 * np.log(self.alpha_bar.numpy())
        return np.interp(tau, np.arange(self.T), grid)

    def alpha_sigma(self, tau):
        la = self.log_alpha(tau)
        return np.exp(la), np.sqrt(-np.expm1(2 * la))

    def log_snr(self, tau) -> np.ndarray:
        la = self.log_alpha(tau)
        return la - 0.5 * np.log(-np.expm1(2 * la))

    def tau_from_log_snr(self, lam) -> np.ndarray:
        # alpha^2 = sigmoid(2 lam) in closed form, then invert the piecewise-linear log(alpha)
        la = -0.5 * np.logaddexp(0.0, -2.0 * np.asarray(lam, dtype=np.float64))
        grid = 0.5 * np.log(self.alpha_bar.numpy())
        # log(alpha) decreases with tau; np.interp wants increasing abscissae
        return np.interp(la, grid[::-1], np.arange(self.T)[::-1].astype(float))


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got {T}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, dim=0))


def _per_sample(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = values[t].to(like.dtype)
    return out.reshape(-1, *([1] * (like.ndim - 1))) if out.ndim else out


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 0) or torch.any(t >= schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T})")
    ab = _per_sample(schedule.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def training_loss(model, x0: torch.Tensor, text: torch.Tensor, mask: torch.Tensor,
                  generator: torch.Generator, schedule: NoiseSchedule, p_uncond: float = P_UNCOND) -> torch.Tensor:
    """Epsilon MSE at uniformly drawn timesteps; a fraction ``p_uncond`` of the
    samples sees the null condition instead of its caption."""
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    t = torch.randint(0, schedule.T, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    drop = torch.rand(B, generator=generator) < p_uncond
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(x_t, t.to(x0.dtype), text, mask, drop_text=drop)
    return torch.mean((pred - eps) ** 2)


def cfg_combine(eps_cond, eps_uncond, w: float):
    return eps_uncond + w * (eps_cond - eps_uncond)


def sampling_taus(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """``steps + 1`` time points from tau=T-1 down to 0, uniform in log-SNR."""
    lam = np.linspace(schedule.log_snr(schedule.T - 1), schedule.log_snr(0), steps + 1)
    taus = schedule.tau_from_log_snr(lam)
    taus[0], taus[-1] = schedule.T - 1, 0.0
    return taus


def dpm_solver_sample(model, text: torch.Tensor, mask: torch.Tensor, schedule: NoiseSchedule, *,
                      steps: int = DEFAULT_STEPS, guidance: float = DEFAULT_GUIDANCE,
                      generator: torch.Generator | None = None, shape=None, noise: torch.Tensor | None = None,
                      clip_denoised: float | None = None) -> torch.Tensor:
    """Second-order multistep DPM-Solver (data-prediction form).

    ``model(x, t, text, mask, drop_text=...)`` predicts epsilon. Guidance runs
    the conditional and null-conditioned passes as one doubled batch.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if noise is not None:
        x = noise.clone()
    else:
        if shape is None:
            cfg = model.config
            shape = (text.shape[0], cfg.in_channels, cfg.resolution, cfg.resolution)
        dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float64
        x = torch.randn(shape, generator=generator, dtype=dtype)
    B = x.shape[0]

    def data_pred(x, tau):
        alpha, sigma = (float(v) for v in schedule.alpha_sigma(tau))
        t = torch.full((B,), tau, dtype=x.dtype)
        if guidance == 1.0:
            eps = model(x, t, text, mask, drop_text=torch.zeros(B, dtype=torch.bool))
        else:
            both = model(torch.cat([x, x]), torch.cat([t, t]), torch.cat([text, text]), torch.cat([mask, mask]),
                         drop_text=torch.arange(2 * B) >= B)
            eps = cfg_combine(both[:B], both[B:], guidance)
        x0 = (x - sigma * eps) / alpha
        return x0.clamp(-clip_denoised, clip_denoised) if clip_denoised else x0

    taus = sampling_taus(schedule, steps)
    lams = schedule.log_snr(taus)
    prev_d = prev_h = None
    with torch.no_grad():
        for i in range(1, steps + 1):
            d = data_pred(x, taus[i - 1])
            h = float(lams[i] - lams[i - 1])
            if prev_d is None:
                d_eff = d
            else:
                r = prev_h / h
                d_eff = (1 + 0.5 / r) * d - (0.5 / r) * prev_d
            alpha_t, sigma_t = (float(v) for v in schedule.alpha_sigma(taus[i]))
            _, sigma_s = (float(v) for v in schedule.alpha_sigma(taus[i - 1]))
            x = (sigma_t / sigma_s) * x - alpha_t * math.expm1(-h) * d_eff
            prev_d, prev_h = d, h
    return x


class GaussianEpsilon:
    """Exact noise prediction for data distributed as N(mu, sigma^2 I).

    Usable anywhere a model is expected; ignores the text condition.
    """

    def __init__(self, schedule: NoiseSchedule, mu: float, sigma: float):
        self.schedule, self.mu, self.sigma = schedule, mu, sigma

    def __call__(self, x, t, text=None, mask=None, drop_text=None):
        tau = t.detach().double().numpy()
        alpha, s = self.schedule.alpha_sigma(tau)
        alpha = torch.as_tensor(alpha, dtype=x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
        s = torch.as_tensor(s, dtype=x.dtype).reshape(alpha.shape)
        return s * (x - alpha * self.mu) / (alpha ** 2 * self.sigma ** 2 + s ** 2)

    def flow(self, x_T: torch.Tensor, tau_from: float, tau_to: float) -> torch.Tensor:
        """Exact probability-flow map: the standardised value is constant in time."""
        a0, s0 = self.schedule.alpha_sigma(tau_from)
        a1, s1 = self.schedule.alpha_sigma(tau_to)
        z = (x_T - a0 * self.mu) / math.sqrt(a0 ** 2 * self.sigma ** 2 + s0 ** 2)
        return a1 * self.mu + math.sqrt(a1 ** 2 * self.sigma ** 2 + s1 ** 2) * z
