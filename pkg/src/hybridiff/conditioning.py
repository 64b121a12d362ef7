"""Deterministic toy text encoder: hash-bucket tokenizer, embedding table and
one frozen bidirectional mixing layer."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn

VOCAB_SIZE = 2 ** 14
PAD_ID = 0
NULL_ID = 1
N_SPECIAL = 2
DEFAULT_MAX_TOKENS = 64

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ValueError("ids and mask differ in length")

    @property
    def n_tokens(self) -> int:
        return sum(self.mask)


def word_id(word: str, vocab_size: int = VOCAB_SIZE) -> int:
    return N_SPECIAL + zlib.crc32(word.encode("utf-8")) % (vocab_size - N_SPECIAL)


def tokenize(text: str, max_tokens: int = DEFAULT_MAX_TOKENS, vocab_size: int = VOCAB_SIZE) -> TokenSequence:
    """Lowercase, split on whitespace and punctuation, hash into buckets.

    Empty text becomes the single null-condition token.
    """
    words = _WORD.findall(text.lower())[:max_tokens]
    ids = [word_id(w, vocab_size) for w in words] or [NULL_ID]
    n = len(ids)
    pad = max_tokens - n
    return TokenSequence(tuple(ids + [PAD_ID] * pad), tuple([True] * n + [False] * pad))


class TextEncoder(nn.Module):
    """Frozen after construction; parameters never receive gradients."""

    def __init__(self, d_text: int, vocab_size: int = VOCAB_SIZE, max_tokens: int = DEFAULT_MAX_TOKENS):
        super().__init__()
        self.d_text = d_text
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(vocab_size, d_text)
        self.mix = nn.Conv1d(d_text, d_text, kernel_size=3, padding=1)
        nn.init.normal_(self.mix.weight, std=(3 * d_text) ** -0.5)
        self.requires_grad_(False)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if torch.any(ids >= self.vocab_size) or torch.any(ids < 0):
            raise ValueError(f"token id outside vocabulary of size {self.vocab_size}")
        m = mask[..., None].to(self.embedding.weight.dtype)
        e = self.embedding(ids) * m
        mixed = e + 0.5 * torch.tanh(self.mix(e.transpose(1, 2)).transpose(1, 2))
        return mixed * m

    def encode(self, texts: list[str]):
        """Tokenize and embed a batch of strings -> (features, mask)."""
        seqs = [tokenize(t, self.max_tokens, self.vocab_size) for t in texts]
        ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
        mask = torch.tensor([s.mask for s in seqs], dtype=torch.bool)
        with torch.no_grad():
            return self(ids, mask), mask


def build_text_encoder(d_text: int, seed: int = 0, max_tokens: int = DEFAULT_MAX_TOKENS) -> TextEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TextEncoder(d_text, max_tokens=max_tokens)


def encode(tokens: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.tensor([tokens.mask], dtype=torch.bool)
    with torch.no_grad():
        return encoder(ids, mask)[0]
