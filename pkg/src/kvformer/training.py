# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Training loop.

Adam with a fixed learning rate over a stream of batches, with held-out evaluation every
eval_every steps.  Given the same corpus, config and seed a run is reproducible.
"""
import csv
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, TextIO

import torch
from attrs import evolve, field, frozen

from kvformer.automaton import mask_table
from kvformer.checkpoint import Checkpoint
from kvformer.converter import CONVERTER
from kvformer.document import Document
from kvformer.encoding import PositionEncodingKind
from kvformer.inference import DecodeOptions, classify_batch
from kvformer.model import ModelConfig, ModelError, Transformer, init_parameters, invalid_mass, loss
from kvformer.pipeline import (
    Batch,
    EncodedCorpus,
    Example,
    UpscaledCorpus,
    batch_examples,
    encode_corpus,
    prefetch,
    reshuffled_batches,
)
from kvformer.tokenizer import Vocabulary, build_vocabulary, tokenize

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Search ranges for the model hyperparameters, for documentation and external sweeps
HYPERPARAMETER_GRID: Dict[str, List[float]] = {
    "dim": [16, 24, 32, 48, 52, 64, 96, 128, 160],
    "heads": [2, 4, 8],
    "layers": [2, 3, 4, 5, 6],
    "upscale": [1, 4, 10, 40, 100, 400, 1000],
    "batchSize": [10, 50, 100],
    "lr": [0.001, 0.0005, 0.0001],
    "numBatches": [10000, 20000, 30000, 50000],
}


@frozen
class TrainingError(Exception):
    """Training could not start, or diverged."""

    message: str


@frozen
class TrainConfig:
    """Everything needed to reproduce a training run."""

    dim: int = 128
    heads: int = 4
    layers: int = 4
    pe_kind: PositionEncodingKind = PositionEncodingKind.KVPE
    dropout: float = 0.0
    batch_size: int = 100
    lr: float = 0.001
    num_batches: int = 1000
    guardrails: bool = True
    eval_every: int = 100
    upscale: int = 1
    shuffle: bool = True
    reshuffle_each_epoch: bool = False
    seed: int = 0
    max_length: Optional[int] = None  # longest training document when unset
    max_vocab: Optional[int] = None
    target_key: Optional[str] = None
    pin_target_last: bool = False
    clip_grad: Optional[float] = None
    test_fraction: float = 0.2
    eval_train: bool = False
    eval_batch_size: int = 256

    def __attrs_post_init__(self) -> None:
        if self.eval_every < 1:
            raise TrainingError("eval_every must be at least 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise TrainingError("Batch sizes must be positive")
        if self.num_batches < 0:
            raise TrainingError("Number of batches must not be negative")
        if self.upscale < 1:
            raise TrainingError("Upscaling factor must be at least 1")
        if not self.lr > 0.0:
            raise TrainingError("Learning rate must be positive")
        if self.max_length is not None and self.max_length < 1:
            raise TrainingError("Maximum sequence length must be positive")

    def model_config(self, vocab_size: int) -> ModelConfig:
        if self.max_length is None:
            raise TrainingError("Maximum sequence length is not set")
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            layers=self.layers,
            max_length=self.max_length,
            vocab_size=vocab_size,
            pe_kind=self.pe_kind,
            dropout=self.dropout,
            seed=self.seed,
        )

    def length_for(self, corpus: Sequence[Document]) -> int:
        """The configured max_length, or the token length of the longest corpus document if unset."""
        if self.max_length is not None:
            return self.max_length
        return max(len(tokenize(doc)) for doc in corpus)


@frozen
class MetricsEntry:
    """One training step; evaluation fields are set only on evaluation steps."""

    step: int
    train_loss: float
    invalid_mass: float
    test_accuracy: Optional[float] = None
    test_loss: Optional[float] = None
    train_accuracy: Optional[float] = None
    train_eval_loss: Optional[float] = None  # loss over the whole training corpus, without upscaling


@frozen(eq=False)
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[MetricsEntry] = field(factory=list)
    discarded: int = 0


def n_success(metrics: Sequence[MetricsEntry]) -> Optional[int]:
    """First step at which held-out accuracy reached 1.0, or None if it never did."""
    for entry in metrics:
        if entry.test_accuracy is not None and entry.test_accuracy >= 1.0:
            return entry.step
    return None


class MetricsWriter:
    """Append-only CSV metrics log with columns step, train_loss, test_accuracy."""

    HEADER = ["step", "train_loss", "test_accuracy"]

    def __init__(self, fp: TextIO) -> None:
        self._writer = csv.writer(fp, lineterminator="\n")
        self._fp = fp
        self._writer.writerow(self.HEADER)

    def write(self, entry: MetricsEntry) -> None:
        accuracy = "" if entry.test_accuracy is None else repr(entry.test_accuracy)
        self._writer.writerow([entry.step, repr(entry.train_loss), accuracy])
        self._fp.flush()


def write_metrics_csv(path: str, metrics: Sequence[MetricsEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = MetricsWriter(fp)
        for entry in metrics:
            writer.write(entry)


def _forward(model: Transformer, batch: Batch) -> torch.Tensor:
    return model(batch.ids, batch.stack_ids, batch.stack_mask)  # type: ignore[no-any-return]


def evaluate_loss(model: Transformer, vocab: Vocabulary, examples: Sequence[Example], config: TrainConfig) -> Optional[float]:
    """Mean per-token loss over the examples, weighted by their number of loss positions."""
    if not examples:
        return None
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for batch in batch_examples(examples, vocab, config.eval_batch_size, config.guardrails, config.seed):
            positions = int(batch.loss_mask.sum())
            if positions == 0:
                continue
            value = loss(_forward(model, batch), batch.targets, batch.masks if config.guardrails else None, batch.loss_mask)
            total += float(value) * positions
            count += positions
    return total / count if count else None


def _accuracy(model: Transformer, vocab: Vocabulary, docs: Sequence[Document], config: TrainConfig) -> Optional[float]:
    if not docs or config.target_key is None:
        return None
    results = classify_batch(model, vocab, docs, config.target_key, DecodeOptions(), config.eval_batch_size)
    return sum(1 for result in results if result.correct) / len(results)


def _batches(
    corpus: Sequence[Document], vocab: Vocabulary, config: TrainConfig, max_length: int, examples: Sequence[Example]
) -> Iterator[Batch]:
    if config.reshuffle_each_epoch and config.shuffle:
        pin_last = config.target_key if config.pin_target_last else None
        stream = reshuffled_batches(
            corpus,
            vocab,
            max_length,
            config.batch_size,
            config.guardrails,
            config.seed,
            config.num_batches,
            factor=config.upscale,
            pin_last=pin_last,
        )
    else:
        stream = batch_examples(examples, vocab, config.batch_size, config.guardrails, config.seed, config.num_batches)
    return prefetch(stream)


def train(
    corpus: Sequence[Document],
    config: TrainConfig,
    test: Optional[Sequence[Document]] = None,
    metrics_fp: Optional[TextIO] = None,
    tag: Optional[str] = None,
) -> TrainResult:
    """Train a model on the corpus, evaluating on the test documents every eval_every steps."""
    tag = tag or "seed=%d" % config.seed
    if not corpus:
        raise TrainingError("Cannot train on an empty corpus")
    max_length = config.length_for(corpus)
    config = evolve(config, max_length=max_length)
    logging.info("[%s] Sequences are limited to %d tokens", tag, max_length)
    torch.manual_seed(config.seed)
    vocab = build_vocabulary(corpus, max_size=config.max_vocab)
    logging.info("[%s] Built vocabulary of %d tokens from %d documents", tag, len(vocab), len(corpus))

    pin_last = config.target_key if config.pin_target_last else None
    docs = UpscaledCorpus(corpus, config.upscale, config.seed, shuffle=config.shuffle, pin_last=pin_last)
    examples = EncodedCorpus(docs, vocab, max_length)
    if not examples:
        raise TrainingError("No training document fits within %d tokens" % max_length)
    test_docs = list(test or [])
    test_examples = encode_corpus(test_docs, vocab, max_length, discard_overlong=True)
    train_examples = encode_corpus(corpus, vocab, max_length, discard_overlong=True) if config.eval_train else []

    model = init_parameters(config.model_config(len(vocab)))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)
    writer = MetricsWriter(metrics_fp) if metrics_fp else None
    metrics: List[MetricsEntry] = []
    table = mask_table(vocab)
    logging.info("[%s] Training %d batches of %d on %d sequences", tag, config.num_batches, config.batch_size, len(examples))

    for step, batch in enumerate(_batches(corpus, vocab, config, max_length, examples), start=1):
        model.train()
        try:
            logits = _forward(model, batch)
        except ModelError as e:
            raise TrainingError("[%s] Step %d: %s" % (tag, step, e.message)) from e
        value = loss(logits, batch.targets, batch.masks if config.guardrails else None, batch.loss_mask)
        if not math.isfinite(float(value)):
            raise TrainingError("[%s] Non-finite loss %s at step %d (lr=%s)" % (tag, float(value), step, config.lr))
        optimizer.zero_grad()
        value.backward()  # type: ignore[no-untyped-call]
        if config.clip_grad is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_grad)
        optimizer.step()

        mass = invalid_mass(logits.detach(), table[batch.classes], batch.loss_mask, config.guardrails)
        entry = MetricsEntry(step=step, train_loss=float(value), invalid_mass=mass)
        logging.debug("[%s] step %d loss %.4f", tag, step, entry.train_loss)
        if step % config.eval_every == 0 or step == config.num_batches:
            entry = MetricsEntry(
                step=step,
                train_loss=entry.train_loss,
                invalid_mass=mass,
                test_accuracy=_accuracy(model, vocab, test_docs, config),
                test_loss=evaluate_loss(model, vocab, test_examples, config),
                train_accuracy=_accuracy(model, vocab, corpus, config) if config.eval_train else None,
                train_eval_loss=evaluate_loss(model, vocab, train_examples, config),
            )
            logging.info(
                "[%s] step %d loss %.4f test accuracy %s test loss %s",
                tag,
                step,
                entry.train_loss,
                entry.test_accuracy,
                entry.test_loss,
            )
        metrics.append(entry)
        if writer:
            writer.write(entry)

    model.eval()
    logging.info("[%s] Training finished after %d steps", tag, len(metrics))
    checkpoint = Checkpoint(model=model, vocab=vocab, training=CONVERTER.unstructure(config))
    return TrainResult(checkpoint=checkpoint, metrics=metrics, discarded=examples.discarded)
