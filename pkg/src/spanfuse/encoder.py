"""Token encoder: a small from-scratch transformer.

Produces one contextual vector per token for a single sequence at a time,
which keeps shapes aligned with the span grid downstream. Sized for CPU
experiments by default; swap the config up for anything serious.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

log = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


def build_vocab(sequences: Iterable[Sequence[str]]) -> dict[str, int]:
    """Token vocabulary in first-occurrence order, after pad and unk."""
    vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for tokens in sequences:
        for token in tokens:
            if token not in vocab:
                vocab[token] = len(vocab)
    return vocab


def encode_tokens(tokens: Sequence[str], vocab: dict[str, int]) -> torch.Tensor:
    """Token ids as a 1-D LongTensor; unknown tokens map to unk."""
    return torch.tensor([vocab.get(t, UNK_ID) for t in tokens], dtype=torch.long)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int | None = None
    max_len: int = 512
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover pad and unk")

    @property
    def hidden_ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.dim

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.output = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length, dim = x.shape
        shape = (length, self.num_heads, self.head_dim)
        q = self.query(x).view(shape).transpose(0, 1)
        k = self.key(x).view(shape).transpose(0, 1)
        v = self.value(x).view(shape).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(0, 1).reshape(length, dim)
        return self.output(mixed)


class EncoderLayer(nn.Module):
    """Post-LN transformer block: LN(x + attn), then LN(x + ffn)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(config.dim, config.num_heads)
        self.ffn = nn.Sequential(
            nn.Linear(config.dim, config.hidden_ffn),
            nn.GELU(),
            nn.Linear(config.hidden_ffn, config.dim),
        )
        self.norm1 = nn.LayerNorm(config.dim)
        self.norm2 = nn.LayerNorm(config.dim)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.attention(x)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class TokenEncoder(nn.Module):
    """Maps token ids [L] to contextual states [L, dim]."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.dim, padding_idx=PAD_ID)
        self.position_embedding = nn.Embedding(config.max_len, config.dim)
        self.input_norm = nn.LayerNorm(config.dim)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.dropout = nn.Dropout(config.dropout)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.position_embedding.weight, std=0.02)
        with torch.no_grad():
            self.token_embedding.weight[PAD_ID].zero_()

    @property
    def dim(self) -> int:
        return self.config.dim

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim != 1:
            raise ValueError(f"expected 1-D token ids, got shape {tuple(token_ids.shape)}")
        length = token_ids.shape[0]
        if length == 0:
            raise ValueError("cannot encode an empty sequence")
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        positions = torch.arange(length, device=token_ids.device)
        x = self.token_embedding(token_ids) + self.position_embedding(positions)
        x = self.dropout(self.input_norm(x))
        for layer in self.layers:
            x = layer(x)
        return x
