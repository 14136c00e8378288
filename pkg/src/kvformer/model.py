# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Decoder-only transformer over token ids, with a grammar-masked softmax and loss.

The input of each position is its token embedding plus a position vector, either the
key/value encoding computed from the automaton's stack (sharing the token embedding
matrix) or one of the comparison encodings.  Blocks are pre-norm with a 4x MLP, and the
output head is untied from the embedding.
"""
import math
from typing import Optional

import attrs
import torch
from attrs import field, frozen
from torch import nn

from kvformer.encoding import PositionEncodingKind, sinusoidal_table, sum_stack_embeddings
from kvformer.tokenizer import GRAMMAR_SIZE

INIT_STD = 0.02


@frozen
class ModelError(Exception):
    """An invalid model configuration, input or numerical state."""

    message: str


def _check_positive(_: object, attribute: "attrs.Attribute[int]", value: int) -> None:
    if value < 1:
        raise ModelError("%s must be positive, got %d" % (attribute.name, value))


@frozen
class ModelConfig:
    """Model shape: dim d, heads h, layers L, max length n, vocabulary size v."""

    dim: int = field(validator=_check_positive)
    heads: int = field(validator=_check_positive)
    layers: int = field(validator=_check_positive)
    max_length: int = field(validator=_check_positive)
    vocab_size: int
    pe_kind: PositionEncodingKind = PositionEncodingKind.KVPE
    dropout: float = 0.0
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ModelError("Embedding dimension %d is not divisible by %d heads" % (self.dim, self.heads))
        if self.vocab_size < GRAMMAR_SIZE + 1:
            raise ModelError("Vocabulary of size %d has no content tokens" % self.vocab_size)
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("Dropout rate must be in [0, 1), got %s" % self.dropout)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(x).split(dim, dim=-1)
        q, k, v = (t.view(batch, length, self.heads, head_dim).transpose(1, 2) for t in (q, k, v))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        causal = torch.ones((length, length), dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(batch, length, dim)
        return self.proj(out)  # type: ignore[no-any-return]


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attention = CausalSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim), nn.Dropout(dropout))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attention(self.norm1(x)))
        return x + self.mlp(self.norm2(x))  # type: ignore[no-any-return]


class Transformer(nn.Module):
    """Token embedding, position encoding, transformer blocks, final norm and output head."""

    sinusoidal: torch.Tensor

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.dim)
        self.position_embedding: Optional[nn.Embedding] = None
        if config.pe_kind is PositionEncodingKind.ABSOLUTE:
            self.position_embedding = nn.Embedding(config.max_length, config.dim)
        if config.pe_kind is PositionEncodingKind.SINUSOIDAL:
            self.register_buffer("sinusoidal", sinusoidal_table(config.max_length, config.dim), persistent=False)
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([Block(config.dim, config.heads, config.dropout) for _ in range(config.layers)])
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, config.vocab_size, bias=False)

    def embed(
        self, ids: torch.Tensor, stack_ids: Optional[torch.Tensor] = None, stack_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Token embedding plus position vector for every position, shape (b, n, d)."""
        batch, length = ids.shape
        if length > self.config.max_length:
            raise ModelError("Sequence of length %d exceeds the model's maximum of %d" % (length, self.config.max_length))
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise ModelError("Token id out of range for vocabulary of size %d" % self.config.vocab_size)
        x = self.token_embedding(ids)
        kind = self.config.pe_kind
        if kind is PositionEncodingKind.KVPE:
            if stack_ids is None or stack_mask is None:
                raise ModelError("The key/value position encoding requires the recorded stacks")
            x = x + sum_stack_embeddings(stack_ids, stack_mask, self.token_embedding.weight)
        elif kind is PositionEncodingKind.ABSOLUTE:
            assert self.position_embedding is not None
            x = x + self.position_embedding(torch.arange(length, device=ids.device))[None].expand(batch, -1, -1)
        elif kind is PositionEncodingKind.SINUSOIDAL:
            x = x + self.sinusoidal[:length][None]
        return x  # type: ignore[no-any-return]

    def forward(
        self, ids: torch.Tensor, stack_ids: Optional[torch.Tensor] = None, stack_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Logits of shape (b, n, v); row i scores the token at position i+1."""
        x = self.dropout(self.embed(ids, stack_ids, stack_mask))
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.norm(x))
        if not torch.isfinite(logits).all():
            raise ModelError("Non-finite activation in forward pass")
        return logits  # type: ignore[no-any-return]


def _normal(generator: torch.Generator, tensor: torch.Tensor) -> None:
    sample = torch.randn(tensor.shape, generator=generator, dtype=torch.float64) * INIT_STD
    tensor.copy_(sample.to(tensor.dtype))


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> None:
    """Re-initialize weights from a seeded stream: normal(0, 0.02), zero biases, unit norm gains."""
    generator = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Embedding)):
            _normal(generator, module.weight)
            if getattr(module, "bias", None) is not None:
                module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            module.weight.fill_(1.0)
            module.bias.zero_()


def init_parameters(config: ModelConfig, seed: Optional[int] = None) -> Transformer:
    """Build a model with parameters initialized reproducibly from the seed (config.seed by default)."""
    model = Transformer(config)
    reset_parameters(model, config.seed if seed is None else seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(parameter.numel() for parameter in model.parameters())


def masked_logits(logits: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    """Replace masked-out logits with the most negative finite value of their dtype.

    After max-subtraction the sentinel underflows to exactly zero probability, while
    staying finite so that gradients and log-probabilities never produce NaN.
    """
    if mask is None:
        return logits
    return logits.masked_fill(~mask, torch.finfo(logits.dtype).min)


def masked_distribution(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the unmasked entries; masked entries get probability exactly 0."""
    if not bool(mask.any(dim=-1).all()):
        raise ModelError("Validity mask has no permitted token")
    return torch.softmax(masked_logits(logits, mask), dim=-1)


def loss(logits: torch.Tensor, targets: torch.Tensor, masks: Optional[torch.Tensor], loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the targets over positions selected by loss_mask.

    With masks None (guardrails off) this is plain cross-entropy over the vocabulary.
    """
    if masks is not None:
        valid = masks.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        if bool((loss_mask & ~valid).any()):
            raise ModelError("A loss target is not a valid next token; the automaton and tokenizer disagree")
    count = int(loss_mask.sum())
    if count == 0:
        raise ModelError("No positions contribute to the loss")
    log_probs = torch.log_softmax(masked_logits(logits, masks), dim=-1)
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    picked = torch.where(loss_mask, picked, torch.zeros_like(picked))
    return -picked.sum() / count


def invalid_mass(logits: torch.Tensor, masks: torch.Tensor, loss_mask: torch.Tensor, guardrails: bool = True) -> float:
    """Mean probability mass placed on grammar-invalid tokens at loss positions."""
    count = int(loss_mask.sum())
    if count == 0:
        return 0.0
    with torch.no_grad():
        probs = torch.softmax(masked_logits(logits, masks if guardrails else None), dim=-1)
        mass = (probs * (~masks).to(probs.dtype)).sum(dim=-1)
        return float(torch.where(loss_mask, mass, torch.zeros_like(mass)).sum()) / count
