# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
# pylint: disable=too-many-branches:

"""
Reversible mapping between documents and token sequences, and between tokens and ids.

Tokenization walks an object depth-first.  Keys become key tokens, primitive values
become value tokens, nested objects are bracketed by OBJ_START/OBJ_END and arrays are
introduced by an array token carrying their length.  The vocabulary assigns contiguous
ids: the seven fixed grammar tokens first, then every other token in order of first
occurrence in the training corpus.

Array lengths that only ever appear as element-position counters on the automaton
stack are kept in the vocabulary for their embeddings, but are written as counter
entries and never encoded or generated as array values.
"""
import hashlib
import json
from collections import Counter
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

import torch
from attrs import field, frozen

from kvformer.document import (
    Array,
    Bool,
    Document,
    Float,
    Int,
    Null,
    Object,
    Primitive,
    Str,
    canonical_float,
)

UNKNOWN_TEXT = "[UNKNOWN]"  # what an unknown value deserializes to


@frozen
class TokenizerError(Exception):
    """An error tokenizing, detokenizing, encoding or decoding."""

    message: str
    position: Optional[int] = None


@frozen
class OverlongError(Exception):
    """A token sequence is longer than the padded length and truncation is disabled."""

    message: str
    length: int
    limit: int


class Grammar(Enum):
    """Fixed grammar tokens; the value is the token's id in every vocabulary."""

    START = 0
    END = 1
    OBJ_START = 2
    OBJ_END = 3
    OBJ = 4
    UNKNOWN = 5
    PAD = 6


GRAMMAR_SIZE = len(Grammar)


@frozen
class KeyTok:
    name: str


@frozen
class ValTok:
    value: Primitive


@frozen
class ArrayTok:
    length: int


Token = Union[Grammar, KeyTok, ValTok, ArrayTok]


class TokenKind(Enum):
    GRAMMAR = "grammar"
    ARRAY = "array"  # array tokens are grammar tokens, but are learned like keys and values
    KEY = "key"
    VALUE = "value"


def token_kind(token: Token) -> TokenKind:
    if isinstance(token, Grammar):
        return TokenKind.GRAMMAR
    if isinstance(token, ArrayTok):
        return TokenKind.ARRAY
    if isinstance(token, KeyTok):
        return TokenKind.KEY
    return TokenKind.VALUE


def _value_tokens(value: Document, counters: bool) -> Iterator[Token]:
    if isinstance(value, Object):
        yield Grammar.OBJ_START
        for key, item in value.pairs:
            yield KeyTok(key)
            yield from _value_tokens(item, counters)
        yield Grammar.OBJ_END
    elif isinstance(value, Array):
        length = len(value.items)
        yield ArrayTok(length)
        for index, item in enumerate(value.items):
            if counters:
                yield ArrayTok(length - index)  # the array-position stack symbol for this element
            yield from _value_tokens(item, counters)
    else:
        yield ValTok(value)  # type: ignore[arg-type]


def _document_tokens(doc: Document, counters: bool) -> Iterator[Token]:
    if not isinstance(doc, Object):
        raise TokenizerError("Only objects can be tokenized, got %s" % type(doc).__name__)
    yield Grammar.START
    for key, value in doc.pairs:
        yield KeyTok(key)
        yield from _value_tokens(value, counters)
    yield Grammar.END


def tokenize(doc: Document) -> List[Token]:
    """Tokenize an object depth-first, without padding."""
    return list(_document_tokens(doc, counters=False))


class _Frame:
    """Partially built object or array while detokenizing."""

    def __init__(self, length: Optional[int] = None) -> None:
        self.length = length  # None for objects
        self.pairs: List[Tuple[str, Document]] = []
        self.items: List[Document] = []
        self.pending: Optional[str] = None

    @property
    def is_object(self) -> bool:
        return self.length is None

    @property
    def expects_value(self) -> bool:
        return not self.is_object or self.pending is not None


def detokenize(tokens: Sequence[Token]) -> Object:
    """Rebuild the object encoded by a token sequence; trailing pads are ignored."""
    frames: List[_Frame] = []
    result: Optional[Object] = None

    def fail(position: int, reason: str) -> TokenizerError:
        return TokenizerError("Rejected token sequence at position %d: %s" % (position, reason), position=position)

    def emit(value: Document) -> None:
        while True:
            top = frames[-1]
            if top.is_object:
                top.pairs.append((top.pending, value))  # type: ignore[arg-type]
                top.pending = None
                return
            top.items.append(value)
            if len(top.items) < top.length:  # type: ignore[operator]
                return
            frames.pop()
            value = Array(tuple(top.items))

    for position, token in enumerate(tokens):
        if result is not None:
            if token is not Grammar.PAD:
                raise fail(position, "only padding may follow END")
            continue
        if not frames:
            if token is not Grammar.START:
                raise fail(position, "sequence must begin with START")
            frames.append(_Frame())
            continue
        top = frames[-1]
        if not top.expects_value:
            if isinstance(token, KeyTok):
                top.pending = token.name
            elif token is Grammar.END and len(frames) == 1:
                result = Object(tuple(top.pairs))
                frames.pop()
            elif token is Grammar.OBJ_END and len(frames) > 1:
                frames.pop()
                emit(Object(tuple(top.pairs)))
            else:
                raise fail(position, "expected a key or the end of the object, got %s" % token_to_line(token))
        elif isinstance(token, ValTok):
            emit(token.value)
        elif token is Grammar.UNKNOWN:
            emit(Str(UNKNOWN_TEXT))
        elif isinstance(token, ArrayTok):
            if token.length == 0:
                emit(Array(()))
            else:
                frames.append(_Frame(length=token.length))
        elif token is Grammar.OBJ_START:
            frames.append(_Frame())
        else:
            raise fail(position, "expected a value, got %s" % token_to_line(token))

    if result is None:
        raise fail(len(tokens), "sequence ended before END")
    return result


def token_to_line(token: Token) -> str:
    """Render a token as one line of a vocabulary file."""
    if isinstance(token, Grammar):
        return "G:%s" % token.name
    if isinstance(token, ArrayTok):
        return "G:ARRAY:%d" % token.length
    if isinstance(token, KeyTok):
        return "K:%s" % _escape(token.name)
    value = token.value
    if isinstance(value, Str):
        return "V:s:%s" % _escape(value.value)
    if isinstance(value, Bool):
        return "V:b:%s" % ("true" if value.value else "false")
    if isinstance(value, Int):
        return "V:i:%d" % value.value
    if isinstance(value, Float):
        return "V:f:%s" % canonical_float(value.value)
    return "V:null"


def _counter_line(token: Token) -> str:
    assert isinstance(token, ArrayTok)
    return "G:COUNTER:%d" % token.length


def _entry_from_line(line: str) -> Tuple[Token, bool]:
    """Parse a vocabulary file entry, reporting whether it is a counter-only array length."""
    if line.startswith("G:COUNTER:"):
        try:
            return ArrayTok(int(line[len("G:COUNTER:") :])), True
        except ValueError as e:
            raise TokenizerError("Invalid vocabulary entry: %s" % line) from e
    return token_from_line(line), False


def token_from_line(line: str) -> Token:
    """Parse one line of a vocabulary file."""
    try:
        if line.startswith("G:ARRAY:"):
            return ArrayTok(int(line[len("G:ARRAY:") :]))
        if line.startswith("G:"):
            return Grammar[line[2:]]
        if line.startswith("K:"):
            return KeyTok(_unescape(line[2:]))
        if line == "V:null":
            return ValTok(Null())
        if line.startswith("V:s:"):
            return ValTok(Str(_unescape(line[4:])))
        if line.startswith("V:i:"):
            return ValTok(Int(int(line[4:])))
        if line.startswith("V:f:"):
            return ValTok(Float(float(line[4:])))
        if line in ("V:b:true", "V:b:false"):
            return ValTok(Bool(line == "V:b:true"))
    except (KeyError, ValueError) as e:
        raise TokenizerError("Invalid vocabulary entry: %s" % line) from e
    raise TokenizerError("Invalid vocabulary entry: %s" % line)


def _escape(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)[1:-1]


def _unescape(text: str) -> str:
    return str(json.loads('"%s"' % text))


def _index(tokens: Tuple[Token, ...]) -> Dict[Token, int]:
    return {token: index for index, token in enumerate(tokens)}


@frozen(cache_hash=True)
class Vocabulary:
    """Bijection between retained tokens and contiguous ids."""

    tokens: Tuple[Token, ...] = field(converter=tuple)
    counts: Tuple[int, ...] = field(converter=tuple, default=())
    max_size: Optional[int] = None
    counters: FrozenSet[Token] = field(converter=frozenset, factory=frozenset)  # array lengths never observed as values
    ids: Dict[Token, int] = field(init=False, eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        if tuple(self.tokens[:GRAMMAR_SIZE]) != tuple(Grammar):
            raise TokenizerError("Vocabulary must begin with the fixed grammar tokens")
        object.__setattr__(self, "ids", _index(self.tokens))
        if len(self.ids) != len(self.tokens):
            raise TokenizerError("Vocabulary contains duplicate tokens")
        if any(not isinstance(token, ArrayTok) or token not in self.ids for token in self.counters):
            raise TokenizerError("Counter entries must be array tokens in the vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.ids

    def id_of(self, token: Token) -> int:
        """Id of a token, or the UNKNOWN id if the token was not retained."""
        return self.ids.get(token, Grammar.UNKNOWN.value)

    def stream_id(self, token: Token) -> int:
        """Id of a token read from a document; counter-only array lengths are UNKNOWN here."""
        if token in self.counters:
            return Grammar.UNKNOWN.value
        return self.id_of(token)

    def token_of(self, token_id: int) -> Token:
        if not 0 <= token_id < len(self.tokens):
            raise TokenizerError("Token id %d is out of range for vocabulary of size %d" % (token_id, len(self.tokens)))
        return self.tokens[token_id]

    def ids_of_kind(self, kind: TokenKind) -> List[int]:
        return [index for index, token in enumerate(self.tokens) if token_kind(token) == kind]

    def kind_mask(self, kind: TokenKind) -> torch.Tensor:
        """Boolean mask over ids selecting every token of one kind."""
        mask = torch.zeros(len(self.tokens), dtype=torch.bool)
        ids = self.ids_of_kind(kind)
        if ids:
            mask[ids] = True
        return mask

    def key_ids(self) -> List[int]:
        return self.ids_of_kind(TokenKind.KEY)

    def value_ids(self) -> List[int]:
        return self.ids_of_kind(TokenKind.VALUE)

    def array_ids(self) -> List[int]:
        return self.ids_of_kind(TokenKind.ARRAY)

    def array_value_mask(self) -> torch.Tensor:
        """Boolean mask over ids selecting the array lengths that may be generated."""
        mask = self.kind_mask(TokenKind.ARRAY)
        for token in self.counters:
            mask[self.ids[token]] = False
        return mask

    def to_text(self) -> str:
        return "".join("%s\n" % (_counter_line(token) if token in self.counters else token_to_line(token)) for token in self.tokens)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def build_vocabulary(corpus: Iterable[Document], max_size: Optional[int] = None) -> Vocabulary:
    """Build a vocabulary over the corpus, keeping the max_size most frequent tokens if limited."""
    counts: Counter[Token] = Counter()
    lengths: Set[Token] = set()
    empty = True
    for doc in corpus:
        empty = False
        for token in _document_tokens(doc, counters=True):
            if not isinstance(token, Grammar):
                counts[token] += 1  # Counter preserves first-insertion order
        lengths.update(token for token in _document_tokens(doc, counters=False) if isinstance(token, ArrayTok))
    if empty:
        raise TokenizerError("Cannot build a vocabulary from an empty corpus")
    if max_size is not None and max_size < GRAMMAR_SIZE:
        raise TokenizerError("Vocabulary size limit %d is smaller than the grammar" % max_size)
    ordered = list(counts.items())
    if max_size is not None and len(ordered) + GRAMMAR_SIZE > max_size:
        ranked = sorted(range(len(ordered)), key=lambda index: (-ordered[index][1], index))
        retained = set(ranked[: max_size - GRAMMAR_SIZE])
        ordered = [item for index, item in enumerate(ordered) if index in retained]
    tokens = list(Grammar) + [token for token, _ in ordered]
    frequencies = [0] * GRAMMAR_SIZE + [count for _, count in ordered]
    counters = [token for token, _ in ordered if isinstance(token, ArrayTok) and token not in lengths]
    return Vocabulary(tokens=tokens, counts=frequencies, max_size=max_size, counters=counters)


def save_vocabulary(path: str, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(vocab.to_text())


def load_vocabulary(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fp:
        entries = [_entry_from_line(line.rstrip("\n")) for line in fp if line.rstrip("\n")]
    return Vocabulary(tokens=[token for token, _ in entries], counters=[token for token, counter in entries if counter])


def encode(tokens: Sequence[Token], vocab: Vocabulary, pad_to: Optional[int] = None, truncate: bool = False) -> List[int]:
    """Encode tokens as ids, mapping unretained tokens to UNKNOWN and right-padding with PAD."""
    if pad_to is not None and len(tokens) > pad_to:
        if not truncate:
            raise OverlongError(
                "Token sequence of length %d exceeds the limit of %d" % (len(tokens), pad_to), length=len(tokens), limit=pad_to
            )
        tokens = tokens[:pad_to]
    ids = [vocab.stream_id(token) for token in tokens]
    if pad_to is not None:
        ids.extend([Grammar.PAD.value] * (pad_to - len(ids)))
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> List[Token]:
    """Decode ids back into tokens."""
    return [vocab.token_of(int(token_id)) for token_id in ids]


def structural_unknown(tokens: Sequence[Token], vocab: Vocabulary) -> Optional[int]:
    """Position of the first key or array token that would encode as UNKNOWN, if any.

    An unknown value is still a value, but an unknown key or array length leaves the
    encoded sequence without a grammatical reading from that position on.
    """
    for position, token in enumerate(tokens):
        if isinstance(token, (KeyTok, ArrayTok)) and vocab.stream_id(token) == Grammar.UNKNOWN.value:
            return position
    return None
