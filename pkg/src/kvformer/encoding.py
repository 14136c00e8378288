# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Position encodings.

The key/value position encoding of a token is the sum of the token embeddings of the
stack symbols recorded for it by the automaton: its object markers, key path and array
position.  It shares the token embedding matrix, so it has no parameters of its own.
Absolute learned, sinusoidal and no position encoding are provided for comparison.
"""
import math
from enum import Enum
from typing import Optional, Sequence, Tuple

import torch
from attrs import frozen

from kvformer.automaton import Stack, symbol_token
from kvformer.tokenizer import Vocabulary


@frozen
class EncodingError(Exception):
    """An error computing a position encoding."""

    message: str


class PositionEncodingKind(Enum):
    KVPE = "kvpe"
    ABSOLUTE = "absolute"
    SINUSOIDAL = "sinusoidal"
    NONE = "none"


def encode_trace(
    trace: Sequence[Stack], vocab: Vocabulary, length: Optional[int] = None, depth: Optional[int] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Encode recorded stacks as (stack ids, stack mask), both of shape (length, depth).

    Positions past the end of the trace are padding and have an empty stack.  Symbols
    missing from the vocabulary (only possible for unseen documents) use the UNKNOWN id.
    """
    length = len(trace) if length is None else length
    if len(trace) > length:
        raise EncodingError("Trace of length %d does not fit in %d positions" % (len(trace), length))
    deepest = max((len(stack) for stack in trace), default=0)
    depth = max(deepest, 1) if depth is None else depth
    if deepest > depth:
        raise EncodingError("Stack depth %d exceeds the encoded depth %d" % (deepest, depth))
    ids = torch.zeros((length, depth), dtype=torch.long)
    mask = torch.zeros((length, depth), dtype=torch.bool)
    for position, stack in enumerate(trace):
        for level, symbol in enumerate(stack):
            ids[position, level] = vocab.id_of(symbol_token(symbol))
            mask[position, level] = True
    return ids, mask


def sum_stack_embeddings(stack_ids: torch.Tensor, stack_mask: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Sum embedding rows over the stack dimension, bottom of the stack first.

    The sum is accumulated one level at a time so that the result for a given stack is
    bitwise identical no matter how deep the batch it appears in is padded.
    """
    result = torch.zeros(stack_ids.shape[:-1] + (weight.shape[1],), dtype=weight.dtype, device=weight.device)
    for level in range(stack_ids.shape[-1]):
        rows = weight[stack_ids[..., level]]
        result = result + torch.where(stack_mask[..., level, None], rows, torch.zeros_like(rows))
    return result


def kvpe(trace: Sequence[Stack], weight: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """Key/value position encoding for every position of a trace, shape (len(trace), d)."""
    ids, mask = encode_trace(trace, vocab)
    return sum_stack_embeddings(ids, mask, weight)


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    """Fixed sine/cosine encoding with base 10000: sin on even columns, cos on odd."""
    positions = torch.arange(length, dtype=torch.float64)[:, None]
    frequencies = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros((length, dim), dtype=torch.float64)
    table[:, 0::2] = torch.sin(positions * frequencies)
    table[:, 1::2] = torch.cos(positions * frequencies)[:, : dim // 2]
    return table.to(torch.float32)


def baseline_pe(kind: PositionEncodingKind, length: int, dim: int, table: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Position vectors for positions 0..length-1 under one of the comparison encodings."""
    if kind is PositionEncodingKind.KVPE:
        raise EncodingError("The key/value position encoding depends on the token stack, not the position")
    if kind is PositionEncodingKind.NONE:
        return torch.zeros((length, dim))
    if kind is PositionEncodingKind.SINUSOIDAL:
        return sinusoidal_table(length, dim)
    if table is None:
        raise EncodingError("Absolute position encoding requires a learned table")
    if length > table.shape[0]:
        raise EncodingError("Position %d is outside the learned table of %d positions" % (length - 1, table.shape[0]))
    return table[:length]
