# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Dataset preparation: sibling shuffling, permutation upscaling, splitting and batching.
"""
import logging
import queue
import threading
from typing import Any, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union, overload

import numpy as np
import torch
from attrs import field, frozen

from kvformer.automaton import MaskClass, initial_state, mask_class, mask_table, step
from kvformer.document import Array, Document, Object
from kvformer.encoding import encode_trace
from kvformer.tokenizer import Grammar, OverlongError, Vocabulary, encode, structural_unknown, tokenize

T = TypeVar("T")

Seed = Union[int, np.random.Generator]


@frozen
class PipelineError(Exception):
    """An error preparing a dataset."""

    message: str


@frozen
class DatasetSplit:
    train: Tuple[Document, ...] = field(converter=tuple)
    test: Tuple[Document, ...] = field(converter=tuple)
    seed: int
    fraction: float


@frozen(eq=False)
class Example:
    """One encoded training sequence of fixed length n."""

    ids: torch.Tensor  # (n,)
    targets: torch.Tensor  # (n,), ids shifted left by one, PAD at the end
    classes: torch.Tensor  # (n,), mask class of the state after each token
    loss_mask: torch.Tensor  # (n,)
    stack_ids: torch.Tensor  # (n, depth)
    stack_mask: torch.Tensor  # (n, depth)


@frozen(eq=False)
class Batch:
    """A batch of b examples; masks is all true when guardrails are off."""

    ids: torch.Tensor  # (b, n)
    targets: torch.Tensor  # (b, n)
    classes: torch.Tensor  # (b, n), mask class of the state after each token
    masks: torch.Tensor  # (b, n, v)
    loss_mask: torch.Tensor  # (b, n)
    stack_ids: torch.Tensor  # (b, n, depth)
    stack_mask: torch.Tensor  # (b, n, depth)

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _shuffle_value(value: Document, rng: np.random.Generator) -> Document:
    if isinstance(value, Object):
        return _shuffle_object(value, rng, None)
    if isinstance(value, Array):
        return Array(tuple(_shuffle_value(item, rng) for item in value.items))
    return value


def _shuffle_object(obj: Object, rng: np.random.Generator, pin_last: Optional[str]) -> Object:
    pairs = [(key, _shuffle_value(value, rng)) for key, value in obj.pairs]
    order = rng.permutation(len(pairs))
    shuffled = [pairs[index] for index in order]
    if pin_last is not None:
        shuffled = [pair for pair in shuffled if pair[0] != pin_last] + [pair for pair in shuffled if pair[0] == pin_last]
    return Object(tuple(shuffled))


def shuffle_document(doc: Document, seed: Seed, pin_last: Optional[str] = None) -> Document:
    """Independently permute the key/value pairs of every object level; arrays keep their order.

    With pin_last, that top-level key (if present) is moved to the end after shuffling.
    """
    if not isinstance(doc, Object):
        raise PipelineError("Only objects can be shuffled, got %s" % type(doc).__name__)
    return _shuffle_object(doc, _rng(seed), pin_last)


class UpscaledCorpus(Sequence[Document]):
    """The factor shuffled copies of every document, produced on access.

    Copy k of document j is shuffled with its own stream derived from (seed, epoch, j, k),
    so the corpus is a fixed set that never has to be held in memory at once.
    """

    def __init__(
        self,
        corpus: Sequence[Document],
        factor: int,
        seed: int,
        shuffle: bool = True,
        pin_last: Optional[str] = None,
        epoch: int = 0,
    ) -> None:
        if factor < 1:
            raise PipelineError("Upscaling factor must be at least 1, got %d" % factor)
        self.corpus = corpus
        self.factor = factor
        self.seed = seed
        self.shuffle = shuffle
        self.pin_last = pin_last
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.corpus) * self.factor

    @overload
    def __getitem__(self, index: int) -> Document: ...

    @overload
    def __getitem__(self, index: slice) -> Sequence[Document]: ...

    def __getitem__(self, index: Union[int, slice]) -> Union[Document, Sequence[Document]]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if not -len(self) <= index < len(self):
            raise IndexError(index)
        index %= len(self)
        source, copy = divmod(index, self.factor)
        if not self.shuffle:
            return self.corpus[source]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch, source, copy]))
        return shuffle_document(self.corpus[source], rng, self.pin_last)


def upscale(
    corpus: Sequence[Document], factor: int, seed: int, shuffle: bool = True, pin_last: Optional[str] = None
) -> List[Document]:
    """Materialize factor copies of every document, each independently shuffled if enabled."""
    return list(UpscaledCorpus(corpus, factor, seed, shuffle=shuffle, pin_last=pin_last))


def split(corpus: Sequence[T], fraction: float, seed: int) -> DatasetSplit:
    """Seeded uniform shuffle, then the first fraction of the corpus trains and the rest tests."""
    if not 0.0 < fraction < 1.0:
        raise PipelineError("Split fraction must be strictly between 0 and 1, got %s" % fraction)
    order = np.random.default_rng(seed).permutation(len(corpus))
    cut = int(round(len(corpus) * fraction))
    if cut == 0 or cut == len(corpus):
        raise PipelineError("Split of %d documents at %s leaves one side empty" % (len(corpus), fraction))
    train = [corpus[index] for index in order[:cut]]
    test = [corpus[index] for index in order[cut:]]
    return DatasetSplit(train=train, test=test, seed=seed, fraction=fraction)  # type: ignore[arg-type]


def kfold_indices(count: int, folds: int, seed: int) -> List[Tuple[List[int], List[int]]]:
    """(train indices, test indices) for each of k seeded folds."""
    if not 2 <= folds <= count:
        raise PipelineError("Cannot make %d folds over %d items" % (folds, count))
    order = np.random.default_rng(seed).permutation(count)
    parts = np.array_split(order, folds)
    result = []
    for index, test in enumerate(parts):
        train = np.concatenate([part for other, part in enumerate(parts) if other != index])
        result.append((sorted(int(i) for i in train), sorted(int(i) for i in test)))
    return result


def encode_example(doc: Document, vocab: Vocabulary, max_length: int) -> Example:
    """Encode one document for teacher-forced training.

    Positions whose target is PAD are excluded from the loss, as is everything from the
    first key or array length missing from the vocabulary onward, since the encoded
    sequence has no grammatical reading past it.
    """
    tokens = tokenize(doc)
    ids = encode(tokens, vocab, pad_to=max_length)
    state = initial_state()
    trace = []
    classes = []
    for position, token in enumerate(tokens):
        state, recorded = step(state, token, position=position)
        trace.append(recorded)
        classes.append(int(mask_class(state)))
    classes.extend([int(MaskClass.ACCEPTED)] * (max_length - len(tokens)))
    targets = ids[1:] + [Grammar.PAD.value]
    cut = structural_unknown(tokens, vocab)
    limit = len(tokens) if cut is None else cut
    loss_mask = [position + 1 < limit and target != Grammar.PAD.value for position, target in enumerate(targets)]
    stack_ids, stack_mask = encode_trace(trace, vocab, length=max_length)
    return Example(
        ids=torch.tensor(ids, dtype=torch.long),
        targets=torch.tensor(targets, dtype=torch.long),
        classes=torch.tensor(classes, dtype=torch.long),
        loss_mask=torch.tensor(loss_mask, dtype=torch.bool),
        stack_ids=stack_ids,
        stack_mask=stack_mask,
    )


def encode_corpus(
    corpus: Iterable[Document], vocab: Vocabulary, max_length: int, discard_overlong: bool = False
) -> List[Example]:
    """Encode every document, optionally discarding (with a warning) those longer than max_length."""
    examples = []
    discarded = 0
    for doc in corpus:
        try:
            examples.append(encode_example(doc, vocab, max_length))
        except OverlongError:
            if not discard_overlong:
                raise
            discarded += 1
    if discarded:
        logging.warning("Discarded %d documents longer than %d tokens", discarded, max_length)
    return examples


class EncodedCorpus(Sequence[Example]):
    """Documents that fit within max_length, encoded on access."""

    def __init__(self, docs: Sequence[Document], vocab: Vocabulary, max_length: int) -> None:
        self.docs = docs
        self.vocab = vocab
        self.max_length = max_length
        self.indices = [index for index, doc in enumerate(docs) if len(tokenize(doc)) <= max_length]
        if self.discarded:
            logging.warning("Discarded %d documents longer than %d tokens", self.discarded, max_length)

    @property
    def discarded(self) -> int:
        return len(self.docs) - len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    @overload
    def __getitem__(self, index: int) -> Example: ...

    @overload
    def __getitem__(self, index: slice) -> Sequence[Example]: ...

    def __getitem__(self, index: Union[int, slice]) -> Union[Example, Sequence[Example]]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        return encode_example(self.docs[self.indices[index]], self.vocab, self.max_length)


def collate(examples: Sequence[Example], vocab: Vocabulary, guardrails: bool) -> Batch:
    """Stack examples into a batch, padding stack depth to the deepest example."""
    depth = max(int(example.stack_ids.shape[1]) for example in examples)

    def pad(tensor: torch.Tensor) -> torch.Tensor:
        padded = torch.zeros((tensor.shape[0], depth), dtype=tensor.dtype)
        padded[:, : tensor.shape[1]] = tensor
        return padded

    classes = torch.stack([example.classes for example in examples])
    if guardrails:
        masks = mask_table(vocab)[classes]
    else:
        masks = torch.ones(classes.shape + (len(vocab),), dtype=torch.bool)
    return Batch(
        ids=torch.stack([example.ids for example in examples]),
        targets=torch.stack([example.targets for example in examples]),
        classes=classes,
        masks=masks,
        loss_mask=torch.stack([example.loss_mask for example in examples]),
        stack_ids=torch.stack([pad(example.stack_ids) for example in examples]),
        stack_mask=torch.stack([pad(example.stack_mask) for example in examples]),
    )


def _epochs(count: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from (int(index) for index in rng.permutation(count))


def batch_examples(
    examples: Sequence[Example],
    vocab: Vocabulary,
    batch_size: int,
    guardrails: bool,
    seed: int,
    num_batches: Optional[int] = None,
) -> Iterator[Batch]:
    """Yield batches in a seeded order.

    Without num_batches this is a single pass and the final batch may be short.  With
    num_batches the examples are cycled, in a fresh order each epoch.
    """
    if not examples:
        raise PipelineError("Cannot batch an empty corpus")
    if batch_size < 1:
        raise PipelineError("Batch size must be positive, got %d" % batch_size)
    rng = np.random.default_rng(seed)
    if num_batches is None:
        order = [int(index) for index in rng.permutation(len(examples))]
        for start in range(0, len(order), batch_size):
            yield collate([examples[index] for index in order[start : start + batch_size]], vocab, guardrails)
        return
    indices = _epochs(len(examples), rng)
    for _ in range(num_batches):
        yield collate([examples[next(indices)] for _ in range(batch_size)], vocab, guardrails)


def make_batches(
    corpus: Sequence[Document],
    vocab: Vocabulary,
    max_length: int,
    batch_size: int,
    guardrails: bool,
    seed: int,
    num_batches: Optional[int] = None,
) -> Iterator[Batch]:
    """Encode a corpus and batch it; documents that do not fit raise OverlongError."""
    examples = encode_corpus(corpus, vocab, max_length)
    return batch_examples(examples, vocab, batch_size, guardrails, seed, num_batches)


def reshuffled_batches(
    corpus: Sequence[Document],
    vocab: Vocabulary,
    max_length: int,
    batch_size: int,
    guardrails: bool,
    seed: int,
    num_batches: int,
    factor: int = 1,
    pin_last: Optional[str] = None,
) -> Iterator[Batch]:
    """Batches drawn from freshly shuffled copies of the corpus every epoch, instead of a fixed upscaled set."""
    rng = np.random.default_rng(seed)
    produced = 0
    epoch = 0
    while produced < num_batches:
        examples = EncodedCorpus(UpscaledCorpus(corpus, factor, seed, pin_last=pin_last, epoch=epoch), vocab, max_length)
        if len(examples) < batch_size:
            raise PipelineError("Only %d documents fit, fewer than one batch of %d" % (len(examples), batch_size))
        order = rng.permutation(len(examples))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield collate([examples[int(index)] for index in order[start : start + batch_size]], vocab, guardrails)
            produced += 1
            if produced == num_batches:
                return
        epoch += 1


_DONE = object()
_POLL_SECONDS = 0.05


def prefetch(iterator: Iterator[T], depth: int = 2) -> Iterator[T]:
    """Run an iterator ahead on a worker thread, delivering items in their original order.

    Closing the returned generator stops the worker and waits for it to exit.
    """
    if depth < 1:
        raise PipelineError("Prefetch depth must be positive, got %d" % depth)
    buffer: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item: Any) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def worker() -> None:
        try:
            for item in iterator:
                if not offer(item):
                    return
            offer(_DONE)
        except BaseException as e:  # pylint: disable=broad-except
            offer(e)

    thread = threading.Thread(target=worker, name="prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        thread.join()
