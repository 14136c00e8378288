# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Grammar-constrained generation.

Every decoding step masks the model's logits with the automaton's valid-next set, so
whatever is generated is a valid token sequence and always detokenizes.  Several
streams can be decoded together; each stream owns its own automaton state.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import torch
from attrs import field, frozen

from kvformer.automaton import (
    AutomatonError,
    AutomatonState,
    Control,
    Stack,
    initial_state,
    run,
    step,
    valid_next,
    value_complete,
)
from kvformer.document import Array, Document, Object
from kvformer.encoding import encode_trace
from kvformer.model import Transformer, masked_distribution, masked_logits
from kvformer.tokenizer import Grammar, KeyTok, Token, TokenizerError, Vocabulary, detokenize, structural_unknown, tokenize

Stop = Callable[[AutomatonState], bool]


@frozen
class InferenceError(Exception):
    """A prompt cannot be decoded, or decoding did not finish."""

    message: str


@frozen
class DecodeOptions:
    """Greedy or sampled decoding; duplicate keys are suppressed unless disabled."""

    greedy: bool = True
    temperature: float = 1.0
    seed: int = 0
    no_duplicate_keys: bool = True
    max_new_tokens: int = 256


@frozen
class Prompt:
    context: Object
    target_key: str
    options: DecodeOptions = field(factory=DecodeOptions)


@frozen
class ClassifyResult:
    truth: Document
    prediction: Optional[Document]  # None if the instance was discarded or decoding failed
    correct: bool


def _stream_tensors(
    ids: Sequence[List[int]], traces: Sequence[List[Stack]], vocab: Vocabulary
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    length = max(len(row) for row in ids)
    depth = max(1, max(len(stack) for trace in traces for stack in trace))
    batch_ids = torch.full((len(ids), length), Grammar.PAD.value, dtype=torch.long)
    stack_ids = torch.zeros((len(ids), length, depth), dtype=torch.long)
    stack_mask = torch.zeros((len(ids), length, depth), dtype=torch.bool)
    for row, (row_ids, trace) in enumerate(zip(ids, traces)):
        batch_ids[row, : len(row_ids)] = torch.tensor(row_ids, dtype=torch.long)
        stack_ids[row], stack_mask[row] = encode_trace(trace, vocab, length=length, depth=depth)
    return batch_ids, stack_ids, stack_mask


def _choose(logits: torch.Tensor, mask: torch.Tensor, options: DecodeOptions, generator: Optional[torch.Generator]) -> int:
    if options.greedy:
        return int(torch.argmax(masked_logits(logits, mask)))  # first maximum, so ties go to the lowest id
    probs = masked_distribution(logits / options.temperature, mask)
    return int(torch.multinomial(probs, 1, generator=generator))


def complete_batch(
    model: Transformer, vocab: Vocabulary, prefixes: Sequence[Sequence[Token]], stop: Stop, options: DecodeOptions
) -> List[Optional[List[Token]]]:
    """Extend each prefix under the automaton's masks until stop holds for its state.

    Returns the generated tokens for each stream, or None for a stream that ran out of
    new tokens or reached the model's maximum length first.
    """
    if not options.greedy and options.temperature <= 0.0:
        raise InferenceError("Sampling temperature must be positive, got %s" % options.temperature)
    states: List[AutomatonState] = []
    traces = []
    ids = []
    for prefix in prefixes:
        try:
            state, trace = run(prefix, initial_state(options.no_duplicate_keys))
        except AutomatonError as e:
            raise InferenceError("Prompt is not a valid prefix: %s" % e.message) from e
        states.append(state)
        traces.append(trace)
        ids.append([vocab.stream_id(token) for token in prefix])
    generated: List[Optional[List[Token]]] = [[] for _ in prefixes]
    active = [not stop(state) for state in states]
    generator = None if options.greedy else torch.Generator().manual_seed(options.seed)
    limit = model.config.max_length
    model.eval()
    with torch.no_grad():
        while True:
            for index, tokens in enumerate(generated):
                if active[index] and (len(ids[index]) >= limit or len(tokens) >= options.max_new_tokens):  # type: ignore[arg-type]
                    active[index] = False
                    generated[index] = None
            rows = [index for index in range(len(prefixes)) if active[index]]
            if not rows:
                break
            batch_ids, stack_ids, stack_mask = _stream_tensors([ids[i] for i in rows], [traces[i] for i in rows], vocab)
            logits = model(batch_ids, stack_ids, stack_mask)
            for row, index in enumerate(rows):
                choice = _choose(logits[row, len(ids[index]) - 1], valid_next(states[index], vocab), options, generator)
                token = vocab.token_of(choice)
                states[index], recorded = step(states[index], token)
                traces[index].append(recorded)
                ids[index].append(choice)
                generated[index].append(token)  # type: ignore[union-attr]
                active[index] = not stop(states[index])
    return generated


def _field_prefix(prompt: Prompt, vocab: Vocabulary) -> List[Token]:
    if not isinstance(prompt.context, Object):
        raise InferenceError("Prompt context must be an object")
    if prompt.target_key in prompt.context.keys():
        raise InferenceError("Target key %s is already present in the context" % prompt.target_key)
    if KeyTok(prompt.target_key) not in vocab:
        raise InferenceError("Target key %s is not in the vocabulary" % prompt.target_key)
    prefix = tokenize(prompt.context)[:-1] + [KeyTok(prompt.target_key)]
    if structural_unknown(prefix, vocab) is not None:
        raise InferenceError("Prompt context contains a key or array length that is not in the vocabulary")
    return prefix


def _field_value(target_key: str, tokens: List[Token]) -> Document:
    try:
        value = detokenize([Grammar.START, KeyTok(target_key)] + tokens + [Grammar.END]).get(target_key)
    except TokenizerError as e:
        raise InferenceError("Generated value does not detokenize: %s" % e.message) from e
    assert value is not None
    return value


def _field_complete(state: AutomatonState) -> bool:
    return value_complete(state, 1)


def predict_field(model: Transformer, vocab: Vocabulary, prompt: Prompt) -> Document:
    """Decode the value of the target key, appended last after the context pairs."""
    generated = complete_batch(model, vocab, [_field_prefix(prompt, vocab)], _field_complete, prompt.options)[0]
    if generated is None:
        raise InferenceError("Value for %s did not complete within the decoding limits" % prompt.target_key)
    return _field_value(prompt.target_key, generated)


def predict_fields(
    model: Transformer, vocab: Vocabulary, prompts: Sequence[Prompt], options: DecodeOptions, batch_size: int = 64
) -> List[Optional[Document]]:
    """Batched predict_field; a prompt that cannot be decoded yields None instead of raising."""
    results: List[Optional[Document]] = [None] * len(prompts)
    pending: List[Tuple[int, List[Token]]] = []
    for index, prompt in enumerate(prompts):
        try:
            pending.append((index, _field_prefix(prompt, vocab)))
        except InferenceError as e:
            logging.debug("Skipping prompt %d: %s", index, e.message)
    for start in range(0, len(pending), batch_size):
        chunk = pending[start : start + batch_size]
        generated = complete_batch(model, vocab, [prefix for _, prefix in chunk], _field_complete, options)
        for (index, _), tokens in zip(chunk, generated):
            if tokens is not None:
                results[index] = _field_value(prompts[index].target_key, tokens)
    return results


def _accepted(state: AutomatonState) -> bool:
    return state.control is Control.ACCEPTED


def autocomplete(model: Transformer, vocab: Vocabulary, partial_prefix: Sequence[Token], options: DecodeOptions) -> Object:
    """Decode from a valid prefix until END and return the completed document."""
    generated = complete_batch(model, vocab, [list(partial_prefix)], _accepted, options)[0]
    if generated is None:
        raise InferenceError("Document did not complete within the decoding limits")
    return detokenize(list(partial_prefix) + generated)


def labels_match(truth: Document, prediction: Optional[Document]) -> bool:
    """Exact match for single values; arrays compare as sets of labels, ignoring duplicates."""
    if prediction is None:
        return False
    if isinstance(truth, Array):
        return isinstance(prediction, Array) and set(truth.items) == set(prediction.items)
    return truth == prediction


def classify_batch(
    model: Transformer,
    vocab: Vocabulary,
    docs: Sequence[Document],
    target_key: str,
    options: DecodeOptions,
    batch_size: int = 64,
) -> List[ClassifyResult]:
    """Predict the target key of every document and score it against the removed ground truth.

    Documents longer than the model's maximum length are discarded and scored incorrect.
    """
    truths = []
    usable: List[Tuple[int, Prompt]] = []
    for index, doc in enumerate(docs):
        truth = doc.get(target_key) if isinstance(doc, Object) else None
        if truth is None:
            raise InferenceError("Document has no target key %s" % target_key)
        truths.append(truth)
        if len(tokenize(doc)) <= model.config.max_length:
            usable.append((index, Prompt(doc.without(target_key), target_key, options)))  # type: ignore[union-attr]
    if len(usable) < len(docs):
        logging.warning("Discarded %d documents longer than %d tokens", len(docs) - len(usable), model.config.max_length)
    predictions: List[Optional[Document]] = [None] * len(docs)
    decoded = predict_fields(model, vocab, [prompt for _, prompt in usable], options, batch_size)
    for (index, _), prediction in zip(usable, decoded):
        predictions[index] = prediction
    return [
        ClassifyResult(truth=truth, prediction=prediction, correct=labels_match(truth, prediction))
        for truth, prediction in zip(truths, predictions)
    ]


def classify(
    model: Transformer, vocab: Vocabulary, doc: Document, target_key: str, options: Optional[DecodeOptions] = None
) -> ClassifyResult:
    """Remove the target key, predict it back and compare with the ground truth."""
    return classify_batch(model, vocab, [doc], target_key, options or DecodeOptions())[0]
