"""FLOP and state-memory model plus measured throughput across sequence
lengths and attention:Mamba ratios.

FLOPs count a multiply-add as two operations. Dense layers are counted from
their matmul shapes. The scan is elementwise, so its cost is
``c_scan * L * H * N`` with ``c_scan`` measured once per (H, N, chunk) by
counting every arithmetic op the scan issues.

CSV schema (``ratios.csv``; ``modeled.csv`` holds the deterministic columns
only)::

    config_id, mixer, ratio_k, n_blocks, L,
    flops_attention, flops_mamba, flops_mlp, flops_other, flops_total,
    state_bytes, crossover_L,
    tokens_per_s_median, tokens_per_s_p10, tokens_per_s_p90, peak_bytes,
    threads, status
"""

from __future__ import annotations

import csv
import functools
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import brentq
from torch.utils._python_dispatch import TorchDispatchMode

from . import ssm
from .backbone import ModelConfig, build_model

BYTES = 4  # float32

# -- instrumented counter -------------------------------------------------------

_MATMUL = {"mm", "addmm", "bmm", "baddbmm", "convolution"}
_ELEMENTWISE = {"mul", "add", "sub", "div", "exp", "neg", "sum", "softplus", "silu", "sigmoid", "tanh"}


class OpCounter(TorchDispatchMode):
    """Counts matmul FLOPs everywhere, and elementwise ops inside :meth:`elementwise`."""

    def __init__(self):
        super().__init__()
        self.flops = 0
        self.by_op: dict[str, int] = {}
        self._depth = 0

    @contextmanager
    def elementwise(self):
        self._depth += 1
        try:
            yield self
        finally:
            self._depth -= 1

    def _add(self, name, n):
        self.flops += n
        self.by_op[name] = self.by_op.get(name, 0) + n

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        name = func.overloadpacket.__name__.rstrip("_")
        if name in ("mm", "addmm"):
            a, b = args[-2], args[-1]
            self._add(name, 2 * a.shape[0] * a.shape[1] * b.shape[1])
        elif name in ("bmm", "baddbmm"):
            a, b = args[-2], args[-1]
            self._add(name, 2 * a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
        elif name == "convolution":
            w = args[1]
            self._add(name, 2 * out.numel() * w.shape[1] * math.prod(w.shape[2:]))
        elif self._depth and name in _ELEMENTWISE:
            self._add(name, args[0].numel() if name == "sum" else out.numel())
        return out


@contextmanager
def _count_scan(counter: OpCounter):
    """Route the model's scan calls through the counter's elementwise region."""
    orig = ssm.selective_scan_chunked

    def wrapped(*args, **kwargs):
        with counter.elementwise():
            return orig(*args, **kwargs)

    ssm.selective_scan_chunked = wrapped
    try:
        yield
    finally:
        ssm.selective_scan_chunked = orig


@functools.lru_cache(maxsize=None)
def scan_constant(d_inner: int, d_state: int, chunk: int) -> float:
    """Arithmetic ops per (token, channel, state) of one chunked scan direction.

    Counted at ``L = 8 * chunk`` so every chunk-carry path is exercised.
    """
    L = 8 * max(chunk, 1)
    g = torch.Generator().manual_seed(0)
    u = torch.randn(1, L, d_inner, generator=g)
    delta = torch.rand(1, L, d_inner, generator=g)
    a = -torch.rand(d_inner, d_state, generator=g) - 0.1
    b = torch.randn(1, L, d_state, generator=g)
    c = torch.randn(1, L, d_state, generator=g)
    d = torch.randn(d_inner, generator=g)
    counter = OpCounter()
    with torch.no_grad(), counter, counter.elementwise():
        ssm.selective_scan_chunked(u, delta, a, b, c, d, chunk=chunk)
    return counter.flops / (L * d_inner * d_state)


def instrumented_flops(config: ModelConfig, text_len: int = 16) -> dict:
    """Forward-pass FLOPs of ``build_model(config)`` on a single sample."""
    model = build_model(config, seed=0)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, config.in_channels, config.resolution, config.resolution, generator=g)
    text = torch.randn(1, text_len, config.d_text, generator=g)
    mask = torch.ones(1, text_len, dtype=torch.bool)
    counter = OpCounter()
    with torch.no_grad(), counter, _count_scan(counter):
        model(x, torch.tensor([500]), text, mask)
    return {"total": counter.flops, "by_op": dict(counter.by_op)}


# -- closed-form cost model -----------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Per-layer closed forms for one config. ``L`` may be fractional."""

    config: ModelConfig
    text_len: int = 16
    c_scan: float | None = None

    @property
    def scan_c(self) -> float:
        if self.c_scan is not None:
            return self.c_scan
        cfg = self.config
        return scan_constant(cfg.d_inner, cfg.ssm_state, cfg.scan_chunk)

    # attention sublayer
    def attention_scores(self, L):
        return 2 * L * L * self.config.hidden

    def attention_values(self, L):
        return 2 * L * L * self.config.hidden

    def attention_proj(self, L):
        return 8 * L * self.config.hidden ** 2

    def attention_layer(self, L):
        return self.attention_scores(L) + self.attention_values(L) + self.attention_proj(L)

    def cross_layer(self, L):
        h, M = self.config.hidden, self.text_len
        return 4 * L * h * h + 4 * M * self.config.d_text * h + 4 * L * M * h

    # Mamba sublayer
    def scan(self, L):
        cfg = self.config
        return 2 * self.scan_c * L * cfg.d_inner * cfg.ssm_state  # two directions

    def mamba_proj(self, L):
        cfg = self.config
        h, H, N, R, w = cfg.hidden, cfg.d_inner, cfg.ssm_state, cfg.resolved_dt_rank, cfg.conv_width
        per_dir = 2 * L * H * w + 2 * L * H * (R + 2 * N) + 2 * L * R * H
        return 2 * L * h * 2 * H + 2 * per_dir + 2 * L * H * h

    def mamba_layer(self, L):
        return self.scan(L) + self.mamba_proj(L)

    def mlp_layer(self, L):
        return 2 * self.config.mlp_ratio * L * self.config.hidden ** 2 * 2

    def other(self, L):
        cfg = self.config
        h, pd = cfg.hidden, cfg.in_channels * cfg.patch ** 2
        return 2 * L * pd * h * 2 + 2 * cfg.freq_dim * h + 2 * h * h + 2 * h * 3 * h

    def breakdown(self, L) -> dict[str, float]:
        cfg = self.config
        k, n = cfg.ratio_k, cfg.n_blocks
        attn = self.attention_layer(L) + self.cross_layer(L)
        if cfg.mixer == "hybrid":
            mamba = k * self.mamba_layer(L)
        else:
            mamba = 0.0
            attn += k * self.attention_layer(L)
        parts = {"attention": n * attn, "mamba": n * mamba, "mlp": n * self.mlp_layer(L), "other": self.other(L)}
        parts["total"] = sum(parts.values())
        return parts

    def state_bytes(self, L) -> float:
        """Modeled sequence-mixing memory per sample.

        Attention layers hold an ``L x L`` score map per head plus keys and
        values; cross-attention an ``L x M`` map; a Mamba layer only its
        recurrent and conv state for both directions.
        """
        cfg = self.config
        attn = cfg.n_heads * L * L + 2 * L * cfg.hidden
        cross = cfg.n_heads * L * self.text_len + 2 * self.text_len * cfg.hidden
        mamba = 2 * (cfg.d_inner * cfg.ssm_state + cfg.d_inner * (cfg.conv_width - 1))
        n_attn = cfg.n_blocks * (1 + (cfg.ratio_k if cfg.mixer == "attention" else 0))
        n_mamba = cfg.n_blocks * cfg.ratio_k if cfg.mixer == "hybrid" else 0
        return BYTES * (n_attn * attn + cfg.n_blocks * cross + n_mamba * mamba)

    def activation_bytes(self, L, batch: int = 1) -> float:
        """Rough peak forward working set: the state model plus a few (L, hidden) buffers."""
        cfg = self.config
        return batch * (self.state_bytes(L) + BYTES * 8 * L * max(cfg.mlp_hidden, cfg.d_inner * cfg.ssm_state))


def flops(config: ModelConfig, L: float, text_len: int = 16) -> dict[str, float]:
    return CostModel(config, text_len).breakdown(L)


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def attention_control(config: ModelConfig) -> ModelConfig:
    """Pure-attention stack with the same depth and width as ``config``."""
    return config.replace(mixer="attention")


def crossover_length(config: ModelConfig, lo: float = 1.0, hi: float = 1e7, text_len: int = 16) -> float:
    """Smallest L where the pure-attention stack costs more FLOPs than ``config``."""
    hybrid = CostModel(config.replace(mixer="hybrid"), text_len)
    attn = CostModel(attention_control(config), text_len, c_scan=hybrid.scan_c)
    gap = lambda L: attn.breakdown(L)["total"] - hybrid.breakdown(L)["total"]  # noqa: E731
    if gap(lo) > 0:
        return lo
    if gap(hi) <= 0:
        return math.inf
    return float(brentq(gap, lo, hi, xtol=1e-9))


# -- measurement ----------------------------------------------------------------

def config_for_length(config: ModelConfig, L: int) -> ModelConfig:
    grid = math.isqrt(L)
    if grid * grid != L:
        raise ValueError(f"L={L} is not a square token grid")
    return config.replace(resolution=grid * config.patch)


def config_id(config: ModelConfig) -> str:
    if config.mixer == "attention":
        return f"attn-d{config.n_blocks * (config.ratio_k + 1)}-h{config.hidden}"
    return f"hyb-k{config.ratio_k}-b{config.n_blocks}-h{config.hidden}"


@dataclass
class Measurement:
    config_id: str
    L: int
    median: float
    p10: float
    p90: float
    peak_bytes: float
    threads: int
    status: str = "ok"

    @property
    def dispersion(self) -> float:
        return self.p90 / self.p10 if self.p10 > 0 else math.inf


def measure_throughput(config: ModelConfig, L_grid, reps: int = 5, mode: str = "forward", *, batch: int = 1,
                       warmup: int = 3, threads: int | None = None, text_len: int = 16,
                       memory_budget: float = 2e9) -> list[Measurement]:
    """Tokens per second at each L; grid points over budget or out of memory
    become ``status="oom"`` rows with NaN rates."""
    if mode not in ("forward", "train_step"):
        raise ValueError(f"mode must be forward or train_step, got {mode!r}")
    if warmup < 3:
        raise ValueError("at least 3 warmup repetitions are required")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if threads:
        torch.set_num_threads(threads)
    threads = torch.get_num_threads()
    rows = []
    for L in L_grid:
        cfg = config_for_length(config, L)
        peak = CostModel(cfg, text_len).activation_bytes(L, batch) * (3 if mode == "train_step" else 1)
        cid = config_id(cfg)
        if peak > memory_budget:
            rows.append(Measurement(cid, L, math.nan, math.nan, math.nan, peak, threads, "oom"))
            continue
        try:
            rates = _time_model(cfg, L, reps, mode, batch, warmup, text_len)
        except (MemoryError, RuntimeError) as err:
            if isinstance(err, RuntimeError) and "memory" not in str(err).lower():
                raise
            rows.append(Measurement(cid, L, math.nan, math.nan, math.nan, peak, threads, "oom"))
            continue
        p10, med, p90 = np.percentile(rates, [10, 50, 90])
        rows.append(Measurement(cid, L, float(med), float(p10), float(p90), peak, threads))
    return rows


def _time_model(cfg: ModelConfig, L: int, reps: int, mode: str, batch: int, warmup: int, text_len: int):
    model = build_model(cfg, seed=0)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(batch, cfg.in_channels, cfg.resolution, cfg.resolution, generator=g)
    text = torch.randn(batch, text_len, cfg.d_text, generator=g)
    mask = torch.ones(batch, text_len, dtype=torch.bool)
    t = torch.full((batch,), 500)

    def run():
        if mode == "forward":
            with torch.no_grad():
                model(x, t, text, mask)
        else:
            model.zero_grad(set_to_none=True)
            model(x, t, text, mask).square().mean().backward()

    for _ in range(warmup):
        run()
    rates = []
    for _ in range(reps):
        start = time.perf_counter()
        run()
        rates.append(batch * L / (time.perf_counter() - start))
    return rates


# -- ratio comparison -----------------------------------------------------------

def ratio_configs(K_list, depth: int = 12, base: ModelConfig | None = None) -> list[ModelConfig]:
    """Hybrids with ``depth`` sequence-mixing sublayers each, plus a pure-attention
    control of the same depth and width."""
    base = base or ModelConfig()
    out = []
    for k in K_list:
        if depth % (k + 1):
            raise ValueError(f"depth {depth} is not divisible by K+1={k + 1}")
        out.append(base.replace(ratio_k=k, n_blocks=depth // (k + 1), mixer="hybrid"))
    out.append(base.replace(ratio_k=1, n_blocks=depth // 2, mixer="attention"))
    return out


MODELED = ["config_id", "mixer", "ratio_k", "n_blocks", "L", "flops_attention", "flops_mamba", "flops_mlp",
           "flops_other", "flops_total", "state_bytes", "crossover_L"]
MEASURED = ["tokens_per_s_median", "tokens_per_s_p10", "tokens_per_s_p90", "peak_bytes", "threads", "status"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else ("inf" if math.isinf(v) else f"{v:.6g}")
    return str(v)


def compare_ratios(K_list, L_grid, *, depth: int = 12, base: ModelConfig | None = None, reps: int = 5,
                   measure: bool = True, mode: str = "forward", threads: int | None = None,
                   out_dir=None, text_len: int = 16) -> dict:
    """FLOPs, modeled state and (optionally) measured throughput for each ratio."""
    configs = ratio_configs(K_list, depth, base)
    c_scan = scan_constant(configs[0].d_inner, configs[0].ssm_state, configs[0].scan_chunk)
    rows = []
    for cfg in configs:
        model = CostModel(cfg, text_len, c_scan)
        cross = crossover_length(cfg, text_len=text_len) if cfg.mixer == "hybrid" else math.nan
        measured = {}
        if measure:
            measured = {m.L: m for m in measure_throughput(cfg, L_grid, reps, mode, threads=threads,
                                                           text_len=text_len)}
        for L in L_grid:
            f = model.breakdown(L)
            row = {"config_id": config_id(cfg), "mixer": cfg.mixer, "ratio_k": cfg.ratio_k,
                   "n_blocks": cfg.n_blocks, "L": L, "flops_attention": float(f["attention"]),
                   "flops_mamba": float(f["mamba"]), "flops_mlp": float(f["mlp"]), "flops_other": float(f["other"]),
                   "flops_total": float(f["total"]), "state_bytes": float(model.state_bytes(L)),
                   "crossover_L": float(cross)}
            m = measured.get(L)
            row.update({"tokens_per_s_median": m.median if m else math.nan,
                        "tokens_per_s_p10": m.p10 if m else math.nan,
                        "tokens_per_s_p90": m.p90 if m else math.nan,
                        "peak_bytes": m.peak_bytes if m else math.nan,
                        "threads": m.threads if m else torch.get_num_threads(),
                        "status": m.status if m else "modeled"})
            rows.append(row)
    report = {"rows": rows, "c_scan": c_scan, "summary": summary_table(rows)}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "modeled.csv", rows, MODELED)
        write_csv(out / "ratios.csv", rows, MODELED + MEASURED)
        (out / "summary.txt").write_text(report["summary"])
    return report


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def summary_table(rows) -> str:
    head = f"{'config':<22}{'L':>7}{'GFLOP':>10}{'state MB':>11}{'tok/s':>11}{'p90/p10':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        disp = r["tokens_per_s_p90"] / r["tokens_per_s_p10"] if r["tokens_per_s_p10"] > 0 else math.nan
        lines.append(f"{r['config_id']:<22}{r['L']:>7}{r['flops_total'] / 1e9:>10.4f}"
                     f"{r['state_bytes'] / 1e6:>11.3f}{_fmt(r['tokens_per_s_median']):>11}{_fmt(disp):>9}")
    return "\n".join(lines) + "\n"
