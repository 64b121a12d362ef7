#!/usr/bin/env python3
"""FLOPs, state memory and measured throughput for hybrids with K Mamba
sublayers per attention sublayer, against a pure-attention stack of the same
depth. The closed forms are checked against counted operations first."""

import argparse

import torch

from hybridiff.backbone import ModelConfig
from hybridiff.bench import CostModel, compare_ratios, crossover_length, instrumented_flops, scan_constant


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", default="64,256,1024,4096")
    ap.add_argument("--ratios", default="1,2,3,5")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default="runs/notebook_bench")
    args = ap.parse_args()
    torch.set_num_threads(1)
    grid = [int(x) for x in args.grid.split(",")]
    ratios = [int(x) for x in args.ratios.split(",")]

    base = ModelConfig()
    print(f"scan constant (ops per token, channel, state): {scan_constant(base.d_inner, base.ssm_state, 16):.3f}")
    for cfg in (base, base.replace(ratio_k=2), base.replace(mixer="attention")):
        counted = instrumented_flops(cfg)["total"]
        modeled = CostModel(cfg).breakdown(cfg.seq_len)["total"]
        print(f"{cfg.mixer:>9} K={cfg.ratio_k}: counted {counted:.4g} modeled {modeled:.4g}")
    print(f"FLOP crossover vs equal-depth attention: L* = {crossover_length(base):.0f} tokens\n")

    report = compare_ratios(ratios, grid, depth=12, reps=args.reps, out_dir=args.out)
    print(report["summary"])
    print(f"tables written to {args.out}")


if __name__ == "__main__":
    main()
