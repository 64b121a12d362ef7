#!/usr/bin/env python3
"""The sampler against a case with a known answer: for Gaussian data the
optimal noise predictor and the probability-flow map are closed form, so the
solver error can be read off directly as the step count grows."""

import argparse

import torch

from hybridiff.diffusion import GaussianEpsilon, dpm_solver_sample, make_schedule, sampling_taus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mu", type=float, default=2.0)
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--n", type=int, default=4000)
    args = ap.parse_args()

    schedule = make_schedule()
    oracle = GaussianEpsilon(schedule, args.mu, args.sigma)
    noise = torch.randn(args.n, 1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    exact = oracle.flow(noise, schedule.T - 1, 0)
    text, mask = torch.zeros(args.n, 1, 1), torch.ones(args.n, 1, dtype=torch.bool)

    print("time points for 5 steps:", [round(float(t), 1) for t in sampling_taus(schedule, 5)])
    print(f"\n{'steps':>5} {'mean':>8} {'var':>8} {'rmse vs exact flow':>20}")
    for steps in (1, 2, 5, 10, 20, 50):
        out = dpm_solver_sample(oracle, text, mask, schedule, steps=steps, guidance=1.0, noise=noise)
        rmse = float(((out - exact) ** 2).mean().sqrt())
        print(f"{steps:>5} {out.mean().item():8.4f} {out.var().item():8.4f} {rmse:20.2e}")
    print(f"target: mean {args.mu}, var {args.sigma ** 2}")


if __name__ == "__main__":
    main()
