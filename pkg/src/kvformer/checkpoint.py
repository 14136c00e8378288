# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Portable model checkpoints.

A checkpoint is a directory holding three files:

    manifest.yaml   format version, model config, vocabulary checksum and tensor table
    tensors.bin     every named tensor as little-endian float32, in manifest order
    vocab.txt       the vocabulary, one token per line

Loading verifies the manifest against the vocabulary and the model's own parameter
shapes, so a loaded model computes exactly the same logits as the one that was saved.
"""
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from attrs import field, frozen

from kvformer.converter import CONVERTER
from kvformer.model import ModelConfig, Transformer
from kvformer.tokenizer import TokenizerError, Vocabulary, load_vocabulary, save_vocabulary

FORMAT_VERSION = 1
MANIFEST = "manifest.yaml"
TENSORS = "tensors.bin"
VOCAB = "vocab.txt"

_DTYPE = np.dtype("<f4")


@frozen
class CheckpointError(Exception):
    """A checkpoint could not be written, or is inconsistent on load."""

    message: str


@frozen
class TensorEntry:
    name: str
    shape: Tuple[int, ...] = field(converter=tuple)
    offset: int  # in bytes, within tensors.bin
    count: int


@frozen
class Manifest:
    format_version: int
    model: ModelConfig
    vocab_checksum: str
    tensors: Tuple[TensorEntry, ...] = field(converter=tuple)
    training: Optional[Dict[str, Any]] = None


@frozen(eq=False)
class Checkpoint:
    """A trained model together with the vocabulary it was trained on."""

    model: Transformer
    vocab: Vocabulary
    training: Optional[Dict[str, Any]] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    """Write a checkpoint directory, creating it if necessary."""
    if len(checkpoint.vocab) != checkpoint.config.vocab_size:
        raise CheckpointError("Vocabulary size %d does not match model config" % len(checkpoint.vocab))
    os.makedirs(path, exist_ok=True)
    entries: List[TensorEntry] = []
    offset = 0
    with open(os.path.join(path, TENSORS), "wb") as fp:
        for name, tensor in checkpoint.model.state_dict().items():
            blob = tensor.detach().cpu().to(torch.float32).numpy().astype(_DTYPE).tobytes()
            fp.write(blob)
            entries.append(TensorEntry(name=name, shape=tuple(tensor.shape), offset=offset, count=tensor.numel()))
            offset += len(blob)
    manifest = Manifest(
        format_version=FORMAT_VERSION,
        model=checkpoint.config,
        vocab_checksum=checkpoint.vocab.checksum(),
        tensors=tuple(entries),
        training=checkpoint.training,
    )
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fp:
        fp.write(CONVERTER.to_yaml(manifest))
    save_vocabulary(os.path.join(path, VOCAB), checkpoint.vocab)


def _read_manifest(path: str) -> Manifest:
    try:
        with open(os.path.join(path, MANIFEST), "r", encoding="utf-8") as fp:
            return CONVERTER.from_yaml(fp.read(), Manifest)
    except OSError as e:
        raise CheckpointError("Checkpoint manifest is not readable: %s" % path) from e
    except Exception as e:  # pylint: disable=broad-except
        raise CheckpointError("Checkpoint manifest is invalid: %s" % path) from e


def load_checkpoint(path: str) -> Checkpoint:
    """Load and verify a checkpoint directory; the model is returned in eval mode."""
    manifest = _read_manifest(path)
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointError("Unsupported checkpoint format version %d" % manifest.format_version)
    try:
        vocab = load_vocabulary(os.path.join(path, VOCAB))
    except (OSError, TokenizerError) as e:
        raise CheckpointError("Checkpoint vocabulary is not readable: %s" % path) from e
    if vocab.checksum() != manifest.vocab_checksum:
        raise CheckpointError("Checkpoint vocabulary does not match its manifest checksum")
    if len(vocab) != manifest.model.vocab_size:
        raise CheckpointError("Vocabulary size %d does not match model config" % len(vocab))
    model = Transformer(manifest.model)
    expected = model.state_dict()
    if [entry.name for entry in manifest.tensors] != list(expected.keys()):
        raise CheckpointError("Checkpoint tensor names do not match the model")
    with open(os.path.join(path, TENSORS), "rb") as fp:
        data = fp.read()
    state = {}
    for entry in manifest.tensors:
        shape = tuple(expected[entry.name].shape)
        if entry.shape != shape:
            raise CheckpointError("Tensor %s has shape %s, expected %s" % (entry.name, entry.shape, shape))
        if entry.offset + entry.count * _DTYPE.itemsize > len(data):
            raise CheckpointError("Tensor %s extends past the end of %s" % (entry.name, TENSORS))
        values = np.frombuffer(data, dtype=_DTYPE, count=entry.count, offset=entry.offset)
        state[entry.name] = torch.from_numpy(values.astype(np.float32)).reshape(entry.shape)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model=model, vocab=vocab, training=manifest.training)
