"""Multi-head self- and cross-attention with explicit softmax weights."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class EmptyConditionError(ValueError):
    """Every text token is masked; substitute the null-condition embedding."""


def attention_weights(q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the last axis; ``key_mask`` True = keep."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return scores.softmax(dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int):
        super().__init__()
        if hidden % n_heads:
            raise ValueError(f"hidden={hidden} is not divisible by n_heads={n_heads}")
        self.hidden = hidden
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, hidden)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        B, _, L, _ = x.shape
        return x.transpose(1, 2).reshape(B, L, self.hidden)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        q, k, v = self._heads(self.q_proj(x)), self._heads(self.k_proj(x)), self._heads(self.v_proj(x))
        w = attention_weights(q, k)
        out = self.out_proj(self._merge(w @ v))
        return (out, w) if return_weights else out


class CrossAttention(SelfAttention):
    """Queries from image tokens, keys/values from (masked) text features."""

    def __init__(self, hidden: int, n_heads: int, d_text: int):
        super().__init__(hidden, n_heads)
        self.d_text = d_text
        self.k_proj = nn.Linear(d_text, hidden)
        self.v_proj = nn.Linear(d_text, hidden)

    def forward(self, x: torch.Tensor, text: torch.Tensor, mask: torch.Tensor, return_weights: bool = False):
        if text.shape[-1] != self.d_text:
            raise ValueError(f"text features have width {text.shape[-1]}, expected {self.d_text}")
        mask = mask.bool()
        if not bool(mask.any(dim=-1).all()):
            raise EmptyConditionError("empty condition: every text token is masked")
        q = self._heads(self.q_proj(x))
        k, v = self._heads(self.k_proj(text)), self._heads(self.v_proj(text))
        w = attention_weights(q, k, mask)
        out = self.out_proj(self._merge(w @ v))
        return (out, w) if return_weights else out


def self_attention(x: torch.Tensor, params: SelfAttention) -> torch.Tensor:
    return params(x)


def cross_attention(x: torch.Tensor, text: torch.Tensor, mask: torch.Tensor, params: CrossAttention) -> torch.Tensor:
    return params(x, text, mask)
