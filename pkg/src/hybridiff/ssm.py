"""Bidirectional selective state-space layer.

Shapes follow the usual ``(batch, length, channels)`` layout. The scan
functions accept any number of leading batch dimensions.

    u      (..., L, H)   input to the recurrence
    delta  (..., L, H)   per-token timescale, >= 0
    a      (H, N)        continuous-time diagonal state matrix, < 0
    b, c   (..., L, N)   per-token input / output maps
    d_skip (H,)          skip coefficient
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def discretize(a: torch.Tensor, b: torch.Tensor, delta: torch.Tensor):
    """Zero-order hold for ``a`` and the Euler rule for ``b``.

    Returns ``(a_bar, b_bar)``, both of shape ``(..., L, H, N)``.
    """
    if torch.any(a >= 0):
        raise ValueError("state matrix must be strictly negative")
    if torch.any(delta < 0):
        raise ValueError("delta must be non-negative")
    dt = delta.unsqueeze(-1)
    a_bar = torch.exp(dt * a)
    b_bar = dt * b.unsqueeze(-2)
    return a_bar, b_bar


def _check_shapes(u, delta, a, b, c, d_skip):
    H, N = a.shape
    if u.shape[-1] != H or delta.shape != u.shape:
        raise ValueError(f"u {tuple(u.shape)} / delta {tuple(delta.shape)} do not match a {tuple(a.shape)}")
    if b.shape[-1] != N or c.shape[-1] != N or b.shape[:-1] != u.shape[:-1] or c.shape[:-1] != u.shape[:-1]:
        raise ValueError(f"b {tuple(b.shape)} / c {tuple(c.shape)} do not match u {tuple(u.shape)} with N={N}")
    if d_skip.shape != (H,):
        raise ValueError(f"d_skip must have shape ({H},), got {tuple(d_skip.shape)}")
    if u.shape[-2] < 1:
        raise ValueError("sequence length must be >= 1")


def selective_scan_sequential(u, delta, a, b, c, d_skip):
    """Reference recurrence, one token at a time.

    h_t = a_bar_t * h_{t-1} + b_bar_t * u_t,  y_t = <c_t, h_t> + d_skip * u_t
    """
    _check_shapes(u, delta, a, b, c, d_skip)
    a_bar, b_bar = discretize(a, b, delta)
    x = b_bar * u.unsqueeze(-1)
    h = torch.zeros_like(x[..., 0, :, :])
    ys = []
    # unbind keeps the backward pass from materialising a full-size gradient per slice
    for a_t, x_t, c_t in zip(a_bar.unbind(-3), x.unbind(-3), c.unbind(-2)):
        h = a_t * h + x_t
        ys.append((h * c_t.unsqueeze(-2)).sum(-1))
    return torch.stack(ys, dim=-2) + d_skip * u


def selective_scan_chunked(u, delta, a, b, c, d_skip, chunk: int = 16):
    """Two-level scan for long sequences.

    The sequence is cut into chunks; a loop over positions inside a chunk runs
    every chunk at once from a zero state while accumulating prefix products
    of ``a_bar``, a short loop over chunks carries the boundary states, and a
    second pass over positions adds each carried state through its prefix
    product. Discretisation happens per position, so no ``(L, H, N)``
    intermediate is ever formed. ``chunk=1`` is the sequential scan.
    """
    if chunk <= 0:
        raise ValueError(f"chunk must be positive, got {chunk}")
    if chunk == 1:
        return selective_scan_sequential(u, delta, a, b, c, d_skip)
    _check_shapes(u, delta, a, b, c, d_skip)
    if torch.any(a >= 0):
        raise ValueError("state matrix must be strictly negative")
    if torch.any(delta < 0):
        raise ValueError("delta must be non-negative")

    L = u.shape[-2]
    n_chunks = -(-L // chunk)
    pad = n_chunks * chunk - L
    du = delta * u
    if pad:
        # delta=0 padding gives a_bar=1 and no input, leaving the carried state untouched
        delta, du = F.pad(delta, (0, 0, 0, pad)), F.pad(du, (0, 0, 0, pad))
        b, c = F.pad(b, (0, 0, 0, pad)), F.pad(c, (0, 0, 0, pad))
    lead = u.shape[:-2]

    def by_position(t):
        # (..., n_chunks * chunk, D) -> chunk tensors of shape (..., n_chunks, D)
        return t.reshape(*lead, n_chunks, chunk, t.shape[-1]).unbind(-2)

    deltas, dus, bs, cs = by_position(delta), by_position(du), by_position(b), by_position(c)

    h = prod = None
    a_bars, y_local = [], []
    for d_j, du_j, b_j, c_j in zip(deltas, dus, bs, cs):
        a_j = torch.exp(d_j.unsqueeze(-1) * a)
        x_j = du_j.unsqueeze(-1) * b_j.unsqueeze(-2)
        h = x_j if h is None else a_j * h + x_j
        prod = a_j if prod is None else prod * a_j
        a_bars.append(a_j)
        y_local.append((h @ c_j.unsqueeze(-1)).squeeze(-1))

    if n_chunks == 1:
        y = torch.stack(y_local, dim=-2).reshape(*lead, chunk, u.shape[-1])[..., :L, :]
        return y + d_skip * u

    # state entering chunk k
    carry = torch.zeros_like(h[..., 0, :, :])
    incoming = []
    for decay_k, end_k in zip(prod.unbind(-3), h.unbind(-3)):
        incoming.append(carry)
        carry = decay_k * carry + end_k
    h_in = torch.stack(incoming, dim=-3)

    ys = []
    prod = None
    for a_j, c_j, y_j in zip(a_bars, cs, y_local):
        prod = a_j if prod is None else prod * a_j
        ys.append(y_j + ((prod * h_in) @ c_j.unsqueeze(-1)).squeeze(-1))
    y = torch.stack(ys, dim=-2).reshape(*lead, n_chunks * chunk, u.shape[-1])[..., :L, :]
    return y + d_skip * u


_compiled_scan = None
_compiled_cache = None


def set_compiled_scan(enabled: bool) -> None:
    """Route :class:`SelectiveSSM` through a ``torch.compile``'d chunked scan.

    Fusing the per-position elementwise ops roughly halves a CPU training
    step. Each new input shape triggers a one-off compilation of about a
    minute, so this pays off only for long fixed-shape runs.
    """
    global _compiled_scan, _compiled_cache
    if enabled and _compiled_cache is None:
        _compiled_cache = torch.compile(selective_scan_chunked, dynamic=False)
    _compiled_scan = _compiled_cache if enabled else None


def _inverse_softplus(x: torch.Tensor) -> torch.Tensor:
    return x + torch.log(-torch.expm1(-x))


class SelectiveSSM(nn.Module):
    """Bidirectional Mamba-style mixer (no normalisation, no residual).

    Both directions share the SSM projections (``x_proj``, ``dt_proj``,
    ``a_log``, ``d_skip``); each direction has its own depthwise conv.
    The two direction outputs are summed before the gated output projection.
    """

    def __init__(self, hidden: int, d_state: int = 16, expand: int = 2, conv_width: int = 4,
                 dt_rank: int | None = None, chunk: int = 16, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        if min(hidden, d_state, expand, conv_width) < 1:
            raise ValueError("hidden, d_state, expand and conv_width must be >= 1")
        self.hidden = hidden
        self.d_state = d_state
        self.d_inner = expand * hidden
        self.conv_width = conv_width
        self.dt_rank = dt_rank or math.ceil(hidden / 16)
        self.chunk = chunk

        H, N, R = self.d_inner, d_state, self.dt_rank
        self.in_proj = nn.Linear(hidden, 2 * H)
        self.conv_fwd = nn.Conv1d(H, H, conv_width, groups=H)
        self.conv_bwd = nn.Conv1d(H, H, conv_width, groups=H)
        self.x_proj = nn.Linear(H, R + 2 * N, bias=False)
        self.dt_proj = nn.Linear(R, H)
        self.a_log = nn.Parameter(torch.log(torch.arange(1, N + 1, dtype=torch.float32)).repeat(H, 1))
        self.d_skip = nn.Parameter(torch.ones(H))
        self.out_proj = nn.Linear(H, hidden)

        nn.init.uniform_(self.dt_proj.weight, -R ** -0.5, R ** -0.5)
        dt = torch.exp(torch.rand(H) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(_inverse_softplus(dt))

    @property
    def a(self) -> torch.Tensor:
        return -torch.exp(self.a_log)

    def ssm_inputs(self, u: torch.Tensor):
        """Per-token (delta, b, c) computed from the post-conv activations."""
        dbc = self.x_proj(u)
        dt, b, c = torch.split(dbc, [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        return delta, b, c

    def _direction(self, xs: torch.Tensor, conv: nn.Conv1d, scan_chunk: int) -> torch.Tensor:
        # causal depthwise conv over (B, H, L)
        u = F.pad(xs.transpose(1, 2), (self.conv_width - 1, 0))
        u = F.silu(conv(u)).transpose(1, 2)
        delta, b, c = self.ssm_inputs(u)
        scan = _compiled_scan if _compiled_scan is not None and scan_chunk > 1 else selective_scan_chunked
        return scan(u, delta, self.a, b, c, self.d_skip, chunk=scan_chunk)

    def forward(self, x: torch.Tensor, scan_chunk: int | None = None) -> torch.Tensor:
        chunk = self.chunk if scan_chunk is None else scan_chunk
        xs, z = self.in_proj(x).chunk(2, dim=-1)
        y = self._direction(xs, self.conv_fwd, chunk)
        y = y + self._direction(xs.flip(1), self.conv_bwd, chunk).flip(1)
        return self.out_proj(y * F.silu(z))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def mamba_layer_forward(x: torch.Tensor, mixer: SelectiveSSM, shift: torch.Tensor, scale: torch.Tensor,
                        gate: torch.Tensor, scan_chunk: int | None = None) -> torch.Tensor:
    """AdaLN-modulated residual Mamba sublayer.

    ``shift``, ``scale`` and ``gate`` are ``(B, hidden)``. With ``gate == 0``
    the result is ``x`` exactly.
    """
    if shift.shape[-1] != x.shape[-1] or scale.shape != shift.shape or gate.shape != shift.shape:
        raise ValueError("modulation signals must be (batch, hidden)")
    h = modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
    return x + gate.unsqueeze(1) * mixer(h, scan_chunk=scan_chunk)
