"""Hybrid Mamba/attention diffusion backbone.

Each block is ``[K Mamba sublayers] -> self-attention -> cross-attention -> MLP``.
Every sublayer is a pre-norm residual whose shift/scale/gate come from one
timestep vector produced by a single shared MLP, plus a learned per-sublayer
table. Gates start at zero, so a freshly built model's blocks are identity maps.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttention, SelfAttention
from .ssm import SelectiveSSM, modulate


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    hidden: int = 64
    ratio_k: int = 1
    patch: int = 2
    in_channels: int = 3
    resolution: int = 16
    d_text: int = 32
    max_text_tokens: int = 64
    mlp_ratio: float = 4.0
    head_dim: int = 16
    ssm_state: int = 16
    ssm_expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0  # 0 -> ceil(hidden / 16)
    scan_chunk: int = 16
    freq_dim: int = 256
    num_timesteps: int = 1000
    mixer: str = "hybrid"  # "attention": the K Mamba sublayers become self-attention
    pe: str = "sincos"  # or "learned"

    def __post_init__(self):
        bad = [f.name for f in dataclasses.fields(self)
               if f.type in ("int", "float") and f.name != "dt_rank" and getattr(self, f.name) < 1]
        if self.dt_rank < 0:
            bad.append("dt_rank")
        if self.hidden >= 1 and self.head_dim >= 1 and self.hidden % self.head_dim:
            bad.append("head_dim")
        if self.patch >= 1 and self.resolution % self.patch:
            bad.append("resolution")
        if self.mixer not in ("hybrid", "attention"):
            bad.append("mixer")
        if self.pe not in ("sincos", "learned"):
            bad.append("pe")
        if bad:
            raise ConfigError("invalid model config fields: " + ", ".join(dict.fromkeys(bad)))

    @property
    def n_heads(self) -> int:
        return self.hidden // self.head_dim

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def seq_len(self) -> int:
        return self.grid ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden * self.mlp_ratio)

    @property
    def d_inner(self) -> int:
        return self.ssm_expand * self.hidden

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or math.ceil(self.hidden / 16)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        conv = {"int": int, "float": float, "str": str}
        return cls(**{k: conv[names[k]](v) for k, v in d.items()})


# text features are assumed already projected to the model width
_FULL_SIZE = dict(head_dim=64, resolution=128, in_channels=4, max_text_tokens=350)


def xl_config(**kw) -> ModelConfig:
    return ModelConfig(**{**_FULL_SIZE, "n_blocks": 28, "hidden": 1152, "d_text": 1152, **kw})


def giant_config(**kw) -> ModelConfig:
    return ModelConfig(**{**_FULL_SIZE, "n_blocks": 40, "hidden": 1408, "d_text": 1408, **kw})


# -- patching and positional embeddings ------------------------------------

def patchify(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """(…, C, H, W) -> (…, L, C*patch*patch), row-major patch order."""
    *lead, C, H, W = latent.shape
    if H % patch or W % patch:
        raise ValueError(f"patch {patch} does not divide {H}x{W}")
    gh, gw = H // patch, W // patch
    x = latent.reshape(*lead, C, gh, patch, gw, patch)
    x = x.movedim(-5, -1)  # (…, gh, p, gw, p, C)
    x = x.movedim(-4, -3)  # (…, gh, gw, p, p, C)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def unpatchify(tokens: torch.Tensor, patch: int, channels: int, height: int, width: int) -> torch.Tensor:
    *lead, L, D = tokens.shape
    gh, gw = height // patch, width // patch
    if L != gh * gw or D != patch * patch * channels:
        raise ValueError(f"tokens {tuple(tokens.shape)} do not tile a {channels}x{height}x{width} image")
    x = tokens.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.movedim(-3, -4)  # (…, gh, p, gw, p, C)
    x = x.movedim(-1, -5)  # (…, C, gh, p, gw, p)
    return x.reshape(*lead, channels, height, width)


def _sincos_1d(dim: int, pos: torch.Tensor) -> torch.Tensor:
    omega = 1.0 / 10000 ** (torch.arange(dim // 2, dtype=torch.float64) / (dim / 2.0))
    out = pos.reshape(-1, 1).double() * omega[None]
    return torch.cat([out.sin(), out.cos()], dim=1)


def sincos_2d(side: int, hidden: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding of a ``side x side`` token grid, (side², hidden)."""
    if hidden % 4:
        raise ValueError("hidden must be a multiple of 4 for the 2-D sinusoidal embedding")
    coords = torch.arange(side, dtype=torch.float64)
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    emb = torch.cat([_sincos_1d(hidden // 2, gy), _sincos_1d(hidden // 2, gx)], dim=1)
    return emb.float()


def interpolate_pe(pe: torch.Tensor, new_side: int) -> torch.Tensor:
    """Bilinear (align-corners) upsampling of an (L, hidden) grid embedding."""
    L, hidden = pe.shape
    side = math.isqrt(L)
    if side * side != L:
        raise ValueError(f"{L} tokens do not form a square grid")
    if new_side < side:
        raise ValueError(f"cannot shrink a {side}x{side} embedding to {new_side}x{new_side}")
    if new_side == side:
        return pe
    grid = pe.T.reshape(1, hidden, side, side)
    up = F.interpolate(grid, size=(new_side, new_side), mode="bilinear", align_corners=True)
    return up.reshape(hidden, new_side * new_side).T.contiguous()


# -- timestep conditioning -------------------------------------------------

def timestep_frequencies(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_frequencies(t, self.freq_dim).to(dtype))


# -- sublayers -------------------------------------------------------------

class Sublayer(nn.Module):
    """Pre-norm residual ``x + gate * f(modulate(LN(x)))``.

    ``ada`` is the per-sublayer (shift, scale, gate) table added to the shared
    timestep vector.
    """

    def __init__(self, hidden: int):
        super().__init__()
        self.ada = nn.Parameter(torch.cat([torch.randn(2, hidden) / hidden ** 0.5, torch.zeros(1, hidden)]))

    def signals(self, shared: torch.Tensor):
        sig = shared + self.ada[None]
        return sig[:, 0], sig[:, 1], sig[:, 2]

    def body(self, h: torch.Tensor, text=None, mask=None) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x, shared, text=None, mask=None):
        shift, scale, gate = self.signals(shared)
        h = modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
        return x + gate.unsqueeze(1) * self.body(h, text, mask)


class MambaSublayer(Sublayer):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.hidden)
        self.mixer = SelectiveSSM(cfg.hidden, cfg.ssm_state, cfg.ssm_expand, cfg.conv_width,
                                  cfg.resolved_dt_rank, cfg.scan_chunk)

    def body(self, h, text=None, mask=None):
        return self.mixer(h)


class AttentionSublayer(Sublayer):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.hidden)
        self.attn = SelfAttention(cfg.hidden, cfg.n_heads)

    def body(self, h, text=None, mask=None):
        return self.attn(h)


class CrossAttentionSublayer(Sublayer):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.hidden)
        self.attn = CrossAttention(cfg.hidden, cfg.n_heads, cfg.d_text)

    def body(self, h, text=None, mask=None):
        return self.attn(h, text, mask)


class MlpSublayer(Sublayer):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg.hidden)
        self.fc1 = nn.Linear(cfg.hidden, cfg.mlp_hidden)
        self.fc2 = nn.Linear(cfg.mlp_hidden, cfg.hidden)

    def body(self, h, text=None, mask=None):
        return self.fc2(F.gelu(self.fc1(h), approximate="tanh"))


class HybridBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        mixer_cls = MambaSublayer if cfg.mixer == "hybrid" else AttentionSublayer
        self.mixers = nn.ModuleList(mixer_cls(cfg) for _ in range(cfg.ratio_k))
        self.attn = AttentionSublayer(cfg)
        self.cross = CrossAttentionSublayer(cfg)
        self.mlp = MlpSublayer(cfg)

    def sublayers(self) -> list[Sublayer]:
        return [*self.mixers, self.attn, self.cross, self.mlp]

    def forward(self, x, shared, text, mask):
        for layer in self.sublayers():
            x = layer(x, shared, text, mask)
        return x


# -- model -----------------------------------------------------------------

class HybridDiffusionModel(nn.Module):
    """Epsilon-prediction network: ``model(x_t, t, text, mask) -> eps``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        h = cfg.hidden
        patch_dim = cfg.in_channels * cfg.patch ** 2
        self.x_embedder = nn.Linear(patch_dim, h)
        pe = sincos_2d(cfg.grid, h)
        if cfg.pe == "learned":
            self.pos_embed = nn.Parameter(pe)
        else:
            self.register_buffer("pos_embed", pe)
        self.t_embedder = TimestepEmbedder(h, cfg.freq_dim)
        self.t_block = nn.Sequential(nn.SiLU(), nn.Linear(h, 3 * h))
        with torch.no_grad():
            # the shared gate rows start at zero so every sublayer starts as identity
            self.t_block[1].weight[2 * h:].zero_()
            self.t_block[1].bias[2 * h:].zero_()
        self.null_text = nn.Parameter(torch.randn(1, cfg.d_text) / cfg.d_text ** 0.5)
        self.blocks = nn.ModuleList(HybridBlock(cfg) for _ in range(cfg.n_blocks))
        self.final_ada = nn.Parameter(torch.randn(2, h) / h ** 0.5)
        self.final_proj = nn.Linear(h, patch_dim)

    def sublayers(self) -> list[Sublayer]:
        return [layer for block in self.blocks for layer in block.sublayers()]

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        """Shared per-timestep vector, (B, 3, hidden)."""
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if torch.any(t < 0) or torch.any(t >= self.config.num_timesteps):
            raise ValueError(f"timestep outside [0, {self.config.num_timesteps})")
        t_emb = self.t_embedder(t)
        return self.t_block(t_emb).view(-1, 3, self.config.hidden), t_emb

    def null_condition(self, batch: int, length: int = 1):
        text = torch.zeros(batch, length, self.config.d_text, dtype=self.null_text.dtype)
        text[:, 0] = self.null_text[0]
        mask = torch.zeros(batch, length, dtype=torch.bool)
        mask[:, 0] = True
        return text, mask

    def embed(self, latent: torch.Tensor) -> torch.Tensor:
        return self.x_embedder(patchify(latent, self.config.patch)) + self.pos_embed

    def final_layer(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        shift, scale = (self.final_ada[None] + t_emb[:, None]).unbind(1)
        x = modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
        return self.final_proj(x)

    def forward(self, latent, t, text, mask, drop_text: torch.Tensor | None = None):
        cfg = self.config
        B, C, H, W = latent.shape
        if C != cfg.in_channels or H != cfg.resolution or W != cfg.resolution:
            raise ValueError(f"latent {tuple(latent.shape)} does not match config "
                             f"({cfg.in_channels}, {cfg.resolution}, {cfg.resolution})")
        if text.shape[0] != B or mask.shape != text.shape[:2]:
            raise ValueError("text features / mask do not match the latent batch")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if drop_text is not None and bool(drop_text.any()):
            null_text, null_mask = self.null_condition(B, text.shape[1])
            text = torch.where(drop_text[:, None, None], null_text.to(text.dtype), text)
            mask = torch.where(drop_text[:, None], null_mask, mask.bool())
        shared, t_emb = self.time_embedding(t)
        x = self.embed(latent)
        for block in self.blocks:
            x = block(x, shared, text, mask)
        return unpatchify(self.final_layer(x, t_emb), cfg.patch, C, H, W)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> HybridDiffusionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HybridDiffusionModel(config)
    return model.to(dtype)


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable element count of ``build_model(config)``."""
    h, dt = config.hidden, config.d_text
    patch_dim = config.in_channels * config.patch ** 2
    lin = lambda i, o: i * o + o  # noqa: E731
    ada = 3 * h

    attn = 4 * lin(h, h) + ada
    cross = 2 * lin(h, h) + 2 * lin(dt, h) + ada
    mlp = lin(h, config.mlp_hidden) + lin(config.mlp_hidden, h) + ada
    if config.mixer == "hybrid":
        H, N, R, w = config.d_inner, config.ssm_state, config.resolved_dt_rank, config.conv_width
        mixer = (lin(h, 2 * H) + 2 * (H * w + H) + H * (R + 2 * N) + lin(R, H)
                 + H * N + H + lin(H, h) + ada)
    else:
        mixer = attn
    block = config.ratio_k * mixer + attn + cross + mlp

    total = lin(patch_dim, h)
    total += config.seq_len * h if config.pe == "learned" else 0
    total += lin(config.freq_dim, h) + lin(h, h) + lin(h, 3 * h)
    total += dt
    total += config.n_blocks * block
    total += 2 * h + lin(h, patch_dim)
    return total


def numel(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def time_embedding(model: HybridDiffusionModel, t) -> torch.Tensor:
    return model.time_embedding(t)[0]


def forward(model: HybridDiffusionModel, noisy_latent, t, text_features, text_mask) -> torch.Tensor:
    return model(noisy_latent, t, text_features, text_mask)
