"""Span grid scoring head and losses.

The head turns per-token states into an L x L x C grid of span probabilities:
start/end projections feed a multi-head biaffine decoder, a window-masked
attention pass mixes nearby grid cells along each row, and a fused projection
scores every (start, end, channel) cell. Extension channels participate in
training only; decoding reads target channels alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import AnnotatedSample, LabelVocabulary, Span, TokenSequence, tokenize
from .encoder import EncoderConfig, TokenEncoder, encode_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    """Span head dimensions: endpoint projection, grid width, heads, window."""

    projection_dim: int = 200
    biaffine_dim: int = 200
    biaffine_heads: int = 4
    attention_heads: int = 10
    window: int = 3

    def __post_init__(self) -> None:
        if self.biaffine_dim % self.attention_heads != 0:
            raise ValueError(
                f"biaffine_dim {self.biaffine_dim} not divisible by attention_heads {self.attention_heads}"
            )
        if self.biaffine_dim % self.biaffine_heads != 0:
            raise ValueError(
                f"biaffine_dim {self.biaffine_dim} not divisible by biaffine_heads {self.biaffine_heads}"
            )
        if self.projection_dim % self.biaffine_heads != 0:
            raise ValueError(
                f"projection_dim {self.projection_dim} not divisible by biaffine_heads {self.biaffine_heads}"
            )
        if self.window < 0:
            raise ValueError("window must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.biaffine_dim // self.attention_heads

    def to_dict(self) -> dict:
        return {
            "projection_dim": self.projection_dim,
            "biaffine_dim": self.biaffine_dim,
            "biaffine_heads": self.biaffine_heads,
            "attention_heads": self.attention_heads,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeadConfig":
        return cls(**data)


@dataclass(frozen=True)
class LossWeights:
    """Per-extension-channel weights and the synthetic-loss multiplier."""

    alpha: tuple[float, ...] = ()
    beta: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if any(a < 0 for a in self.alpha):
            raise ValueError("alpha weights must be non-negative")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class SpanForward:
    """All intermediate grids from one forward pass."""

    start_states: torch.Tensor  # [L, D']
    end_states: torch.Tensor  # [L, D']
    grid: torch.Tensor  # [L, L, Dg] biaffine output
    attended: torch.Tensor  # [L, L, Dg] local attention output
    fused: torch.Tensor  # [L, L, Dg] LayerNorm(grid + attended)
    scores: torch.Tensor  # [L, L, C] pre-sigmoid
    probs: torch.Tensor  # [L, L, C]


def local_mask(
    length: int,
    window: int,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> torch.Tensor:
    """Additive mask: 0 where |i - j| <= window, -inf elsewhere."""
    if length < 1:
        raise ValueError("length must be at least 1")
    if window < 0:
        raise ValueError("window must be non-negative")
    idx = torch.arange(length, device=device)
    far = (idx[:, None] - idx[None, :]).abs() > window
    mask = torch.zeros((length, length), dtype=dtype, device=device)
    mask[far] = float("-inf")
    return mask


class SpanScorer(nn.Module):
    """Grid scorer over the states of one sequence.

    forward(hidden [L, D]) -> SpanForward with probabilities [L, L, C] where
    channels order target labels first, then extension labels.
    """

    def __init__(self, input_dim: int, config: HeadConfig, num_target: int, num_extension: int):
        super().__init__()
        if num_target < 1:
            raise ValueError("need at least one target channel")
        if num_extension < 0:
            raise ValueError("num_extension must be non-negative")
        self.config = config
        self.input_dim = input_dim
        self.num_target = num_target
        self.num_extension = num_extension

        proj = config.projection_dim
        grid_dim = config.biaffine_dim
        heads = config.biaffine_heads
        self.slice_dim = proj // heads
        self.out_slice = grid_dim // heads

        self.start_proj = nn.Linear(input_dim, proj)
        self.end_proj = nn.Linear(input_dim, proj)
        self.activation = nn.LeakyReLU()
        self.bilinear = nn.Parameter(torch.empty(heads, self.slice_dim, self.out_slice, self.slice_dim))
        self.linear = nn.Parameter(torch.empty(heads, self.out_slice, 2 * self.slice_dim))
        self.bias = nn.Parameter(torch.zeros(heads, self.out_slice))

        self.query = nn.Linear(grid_dim, grid_dim)
        self.key = nn.Linear(grid_dim, grid_dim)
        self.value = nn.Linear(grid_dim, grid_dim)
        self.attn_out = nn.Linear(grid_dim, grid_dim)
        self.norm = nn.LayerNorm(grid_dim)
        self.channel_proj = nn.Linear(grid_dim, num_target + num_extension)
        self.gelu = nn.GELU()
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.xavier_uniform_(self.bilinear)
        nn.init.xavier_uniform_(self.linear)
        for module in (
            self.start_proj,
            self.end_proj,
            self.query,
            self.key,
            self.value,
            self.attn_out,
            self.channel_proj,
        ):
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def num_channels(self) -> int:
        return self.num_target + self.num_extension

    def project_endpoints(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Start and end representations, [L, projection_dim] each."""
        if hidden.ndim != 2 or hidden.shape[1] != self.input_dim:
            raise ValueError(f"expected [L, {self.input_dim}] states, got {tuple(hidden.shape)}")
        return self.activation(self.start_proj(hidden)), self.activation(self.end_proj(hidden))

    def biaffine_grid(self, h_start: torch.Tensor, h_end: torch.Tensor) -> torch.Tensor:
        """Per-head bilinear + linear + bias over endpoint slices, [L, L, Dg].

        Endpoint vectors are split into biaffine_heads slices; each head k
        scores cell (i, j) from slice k of h_start[i] and h_end[j], and head
        outputs are concatenated along the channel axis.
        """
        length = h_start.shape[0]
        heads = self.config.biaffine_heads
        hs = h_start.view(length, heads, self.slice_dim)
        he = h_end.view(length, heads, self.slice_dim)
        bilinear = torch.einsum("iad,adce,jae->ijac", hs, self.bilinear, he)
        lin_s, lin_e = self.linear[..., : self.slice_dim], self.linear[..., self.slice_dim :]
        start_term = torch.einsum("iad,acd->iac", hs, lin_s)
        end_term = torch.einsum("jad,acd->jac", he, lin_e)
        grid = bilinear + start_term[:, None] + end_term[None, :] + self.bias
        return grid.reshape(length, length, self.config.biaffine_dim)

    def local_attention(self, grid: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Multi-head attention along each row of the grid, masked to a window.

        Row i is a length-L sequence over end positions; the additive mask
        removes pairs farther than the window, so a cell only mixes with
        nearby columns of its own row.
        """
        length = grid.shape[0]
        heads = self.config.attention_heads
        head_dim = self.config.head_dim
        shape = (length, length, heads, head_dim)
        # [rows, heads, cols, head_dim]
        q = self.query(grid).view(shape).permute(0, 2, 1, 3)
        k = self.key(grid).view(shape).permute(0, 2, 1, 3)
        v = self.value(grid).view(shape).permute(0, 2, 1, 3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        weights = torch.softmax(scores + mask, dim=-1)
        mixed = (weights @ v).permute(0, 2, 1, 3).reshape(length, length, -1)
        return self.attn_out(mixed)

    def score_grid(self, grid: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        """Probability grid from the biaffine and fused grids, [L, L, C]."""
        return torch.sigmoid(self.span_scores(grid, fused))

    def span_scores(self, grid: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        return self.gelu(self.channel_proj(grid + fused))

    def forward(self, hidden: torch.Tensor) -> SpanForward:
        h_start, h_end = self.project_endpoints(hidden)
        grid = self.biaffine_grid(h_start, h_end)
        mask = local_mask(grid.shape[0], self.config.window, dtype=grid.dtype, device=grid.device)
        attended = self.local_attention(grid, mask)
        fused = self.norm(grid + attended)
        scores = self.span_scores(grid, fused)
        return SpanForward(
            start_states=h_start,
            end_states=h_end,
            grid=grid,
            attended=attended,
            fused=fused,
            scores=scores,
            probs=torch.sigmoid(scores),
        )


def gold_grid(
    sample: AnnotatedSample,
    vocab: LabelVocabulary,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> torch.Tensor:
    """Ground-truth grid [L, L, C]; cells with i > j stay zero."""
    length = len(sample.sequence)
    grid = torch.zeros((length, length, vocab.num_channels), dtype=dtype, device=device)
    for span in sample.target_spans | sample.extension_spans:
        grid[span.start, span.end, vocab.channel(span.label)] = 1.0
    return grid


def bce_per_channel(probs: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Summed binary cross entropy per channel, probabilities clamped."""
    p = probs.clamp(1e-7, 1.0 - 1e-7)
    cell = -(gold * torch.log(p) + (1.0 - gold) * torch.log(1.0 - p))
    return cell.sum(dim=(0, 1))


def span_loss(
    probs: torch.Tensor,
    sample: AnnotatedSample,
    vocab: LabelVocabulary,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted BCE over all grid cells and channels.

    Target channels enter with weight 1; extension channel c enters with
    weights.alpha[c]. Every cell participates, including i > j cells whose
    label is zero.
    """
    if len(weights.alpha) != vocab.num_extension:
        raise ValueError(
            f"alpha has {len(weights.alpha)} entries for {vocab.num_extension} extension labels"
        )
    expected = (len(sample.sequence), len(sample.sequence), vocab.num_channels)
    if tuple(probs.shape) != expected:
        raise ValueError(f"expected grid shape {expected}, got {tuple(probs.shape)}")
    gold = gold_grid(sample, vocab, dtype=probs.dtype, device=probs.device)
    channel_bce = bce_per_channel(probs, gold)
    loss = channel_bce[: vocab.num_target].sum()
    if vocab.num_extension:
        alpha = torch.tensor(weights.alpha, dtype=probs.dtype, device=probs.device)
        loss = loss + (alpha * channel_bce[vocab.num_target :]).sum()
    return loss


def combined_loss(
    loss_original: torch.Tensor | float,
    loss_synthetic: torch.Tensor | float,
    beta: float,
) -> torch.Tensor | float:
    """Original loss plus beta times the synthetic loss."""
    return loss_original + beta * loss_synthetic


def dynamic_alpha(
    extension_counts: Sequence[float],
    target_counts: Sequence[float],
) -> list[float]:
    """Per-extension-label weights 0.5 * (mean target count / C_i).

    Clamped to [0, 1]; labels absent from the data (C_i = 0) get weight 0.
    """
    if any(c < 0 for c in extension_counts) or any(c < 0 for c in target_counts):
        raise ValueError("label counts must be non-negative")
    mean_target = sum(target_counts) / len(target_counts) if target_counts else 0.0
    alphas = []
    for count in extension_counts:
        if count == 0:
            alphas.append(0.0)
        else:
            alphas.append(min(1.0, max(0.0, 0.5 * (mean_target / count))))
    return alphas


def decode(
    probs: torch.Tensor,
    vocab: LabelVocabulary,
    threshold: float = 0.5,
) -> set[Span]:
    """Target spans {(i, j, label) : i <= j, P >= threshold}.

    Extension channels are never read, so their values cannot influence
    the output.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    target = probs[:, :, : vocab.num_target]
    hits = (target >= threshold).nonzero(as_tuple=False)
    return {
        Span(int(i), int(j), vocab.target_labels[int(c)])
        for i, j, c in hits.tolist()
        if i <= j
    }


class SpanModel(nn.Module):
    """Encoder plus span head with everything needed for standalone decoding."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        head_config: HeadConfig,
        vocab: LabelVocabulary,
        token_vocab: dict[str, int],
        tokenizer: str = "char",
    ):
        super().__init__()
        self.encoder = TokenEncoder(encoder_config)
        self.scorer = SpanScorer(
            encoder_config.dim, head_config, vocab.num_target, vocab.num_extension
        )
        self.vocab = vocab
        self.token_vocab = dict(token_vocab)
        self.tokenizer = tokenizer

    def forward(self, token_ids: torch.Tensor) -> SpanForward:
        return self.scorer(self.encoder(token_ids))

    def forward_text(self, sequence: TokenSequence) -> SpanForward:
        ids = encode_tokens(sequence.tokens, self.token_vocab)
        device = next(self.parameters()).device
        return self(ids.to(device))

    @torch.no_grad()
    def predict(self, text: str, threshold: float = 0.5) -> set[Span]:
        sequence = TokenSequence.from_text(text, self.tokenizer)
        was_training = self.training
        self.eval()
        try:
            out = self.forward_text(sequence)
        finally:
            self.train(was_training)
        return decode(out.probs, self.vocab, threshold)

    def save(self, path) -> None:
        meta = {
            "encoder_config": self.encoder.config.to_dict(),
            "head_config": self.scorer.config.to_dict(),
            "label_vocab": self.vocab.to_dict(),
            "token_vocab": self.token_vocab,
            "tokenizer": self.tokenizer,
        }
        save_checkpoint(path, dict(self.state_dict()), meta)

    @classmethod
    def load(cls, path) -> "SpanModel":
        tensors, meta = load_checkpoint(path)
        model = cls(
            encoder_config=EncoderConfig.from_dict(meta["encoder_config"]),
            head_config=HeadConfig.from_dict(meta["head_config"]),
            vocab=LabelVocabulary.from_dict(meta["label_vocab"]),
            token_vocab=meta["token_vocab"],
            tokenizer=meta["tokenizer"],
        )
        model.load_state_dict(tensors)
        return model
