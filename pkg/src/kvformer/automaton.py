# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
# pylint: disable=too-many-branches:

"""
Deterministic pushdown automaton over token sequences.

The automaton recognizes exactly the token sequences produced by the tokenizer.  Its
stack holds an object marker for every open object, a key symbol for every key whose
value is being read, and a countdown symbol for every open array.  The stack recorded
at each position is the key path (plus array position) of the token there, which is
what the key/value position encoding sums over.  The same states also determine which
tokens may come next, which is how invalid tokens are masked out of the softmax.

Transition order for one token is: push, record, pop.  START and OBJ_START push an
object marker, a key pushes its key symbol and a non-empty array token pushes a
countdown for its length.  The stack is recorded at that point.  Then a completed value
pops: a key symbol is removed, a countdown is decremented (or removed along with the
enclosing slot when it reaches zero).
"""
import functools
from enum import Enum, IntEnum
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import torch
from attrs import frozen

from kvformer.tokenizer import ArrayTok, Grammar, KeyTok, Token, TokenKind, ValTok, Vocabulary, token_to_line


@frozen
class AutomatonError(Exception):
    """A token is not a valid transition from the current state."""

    message: str
    control: Optional[str] = None
    token: Optional[str] = None
    position: Optional[int] = None


class Control(Enum):
    BEGIN = "begin"
    EXPECT_KEY_OR_CLOSE = "expect-key-or-close"
    EXPECT_VALUE = "expect-value"
    ACCEPTED = "accepted"


@frozen
class ObjSym:
    pass


@frozen
class KeySym:
    name: str


@frozen
class ArraySym:
    remaining: int


StackSymbol = Union[ObjSym, KeySym, ArraySym]
Stack = Tuple[StackSymbol, ...]

OBJ_SYM = ObjSym()


def symbol_token(symbol: StackSymbol) -> Token:
    """The vocabulary token whose embedding row represents a stack symbol."""
    if isinstance(symbol, KeySym):
        return KeyTok(symbol.name)
    if isinstance(symbol, ArraySym):
        return ArrayTok(symbol.remaining)
    return Grammar.OBJ


@frozen
class AutomatonState:
    """Control state plus stack; keys_in_scope tracks emitted keys per open object."""

    control: Control = Control.BEGIN
    stack: Stack = ()
    keys_in_scope: Tuple[FrozenSet[str], ...] = ()
    no_duplicate_keys: bool = False

    @property
    def depth(self) -> int:
        return len(self.stack)


def initial_state(no_duplicate_keys: bool = False) -> AutomatonState:
    return AutomatonState(no_duplicate_keys=no_duplicate_keys)


def _complete_value(stack: List[StackSymbol]) -> Control:
    while True:
        top = stack[-1]
        if isinstance(top, KeySym):
            stack.pop()
            return Control.EXPECT_KEY_OR_CLOSE
        if isinstance(top, ArraySym):
            stack.pop()
            if top.remaining > 1:
                stack.append(ArraySym(top.remaining - 1))
                return Control.EXPECT_VALUE
            continue  # array finished, which completes the slot holding it
        return Control.EXPECT_KEY_OR_CLOSE


def step(state: AutomatonState, token: Token, position: Optional[int] = None) -> Tuple[AutomatonState, Stack]:
    """Consume one token, returning the new state and the stack recorded for the token."""

    def invalid(reason: str) -> AutomatonError:
        where = "" if position is None else " at position %d" % position
        return AutomatonError(
            "Invalid transition%s from %s on %s: %s" % (where, state.control.value, token_to_line(token), reason),
            control=state.control.value,
            token=token_to_line(token),
            position=position,
        )

    stack = list(state.stack)
    keys = list(state.keys_in_scope)
    control = state.control

    if control is Control.BEGIN:
        if token is not Grammar.START:
            raise invalid("a sequence must begin with START")
        return AutomatonState(Control.EXPECT_KEY_OR_CLOSE, (OBJ_SYM,), (frozenset(),), state.no_duplicate_keys), (OBJ_SYM,)

    if control is Control.ACCEPTED:
        if token is not Grammar.PAD:
            raise invalid("only PAD may follow END")
        return state, ()

    if control is Control.EXPECT_KEY_OR_CLOSE:
        if isinstance(token, KeyTok):
            if state.no_duplicate_keys and token.name in keys[-1]:
                raise invalid("key already present in this object")
            keys[-1] = keys[-1] | {token.name}
            stack.append(KeySym(token.name))
            recorded = tuple(stack)
            control = Control.EXPECT_VALUE
        elif token is Grammar.END and len(stack) == 1:
            recorded = tuple(stack)
            stack.pop()
            keys.pop()
            control = Control.ACCEPTED
        elif token is Grammar.OBJ_END and len(stack) > 1:
            recorded = tuple(stack)
            stack.pop()
            keys.pop()
            control = _complete_value(stack)
        else:
            raise invalid("expected a key or the end of the object")
    else:
        if isinstance(token, ValTok) or token is Grammar.UNKNOWN:
            recorded = tuple(stack)
            control = _complete_value(stack)
        elif isinstance(token, ArrayTok) and token.length == 0:
            recorded = tuple(stack)
            control = _complete_value(stack)
        elif isinstance(token, ArrayTok) and token.length > 0:
            stack.append(ArraySym(token.length))
            recorded = tuple(stack)
        elif token is Grammar.OBJ_START:
            stack.append(OBJ_SYM)
            keys.append(frozenset())
            recorded = tuple(stack)
            control = Control.EXPECT_KEY_OR_CLOSE
        else:
            raise invalid("expected a value")

    return AutomatonState(control, tuple(stack), tuple(keys), state.no_duplicate_keys), recorded


def run(tokens: Sequence[Token], state: Optional[AutomatonState] = None) -> Tuple[AutomatonState, List[Stack]]:
    """Fold step over tokens, returning the final state and the recorded stacks."""
    current = state if state is not None else initial_state()
    trace: List[Stack] = []
    for position, token in enumerate(tokens):
        current, recorded = step(current, token, position=position)
        trace.append(recorded)
    return current, trace


def accepts(tokens: Sequence[Token]) -> bool:
    """Whether the tokens (ignoring trailing pads) form a complete, valid object."""
    try:
        final, _ = run(tokens)
    except AutomatonError:
        return False
    return final.control is Control.ACCEPTED


def stack_trace(tokens: Sequence[Token]) -> List[Stack]:
    """The stack recorded at every position; pads record an empty stack."""
    return run(tokens)[1]


class MaskClass(IntEnum):
    """States that share the same set of valid next tokens (ignoring duplicate keys)."""

    BEGIN = 0
    ROOT_KEY = 1
    NESTED_KEY = 2
    VALUE = 3
    ACCEPTED = 4


def mask_class(state: AutomatonState) -> MaskClass:
    if state.control is Control.BEGIN:
        return MaskClass.BEGIN
    if state.control is Control.ACCEPTED:
        return MaskClass.ACCEPTED
    if state.control is Control.EXPECT_VALUE:
        return MaskClass.VALUE
    return MaskClass.ROOT_KEY if state.depth == 1 else MaskClass.NESTED_KEY


@functools.lru_cache(maxsize=16)
def mask_table(vocab: Vocabulary) -> torch.Tensor:
    """Valid-next masks for every mask class, shape (len(MaskClass), len(vocab))."""
    size = len(vocab)
    table = torch.zeros((len(MaskClass), size), dtype=torch.bool)
    keys = vocab.kind_mask(TokenKind.KEY)
    values = vocab.kind_mask(TokenKind.VALUE) | vocab.array_value_mask()
    table[MaskClass.BEGIN, Grammar.START.value] = True
    table[MaskClass.ROOT_KEY] = keys
    table[MaskClass.ROOT_KEY, Grammar.END.value] = True
    table[MaskClass.NESTED_KEY] = keys
    table[MaskClass.NESTED_KEY, Grammar.OBJ_END.value] = True
    table[MaskClass.VALUE] = values
    table[MaskClass.VALUE, Grammar.OBJ_START.value] = True
    table[MaskClass.VALUE, Grammar.UNKNOWN.value] = True
    table[MaskClass.ACCEPTED, Grammar.PAD.value] = True
    return table


def valid_next(state: AutomatonState, vocab: Vocabulary) -> torch.Tensor:
    """Boolean mask over vocabulary ids: true iff stepping with that token succeeds."""
    mask = mask_table(vocab)[mask_class(state)].clone()
    if state.no_duplicate_keys and state.control is Control.EXPECT_KEY_OR_CLOSE:
        used = [vocab.ids[KeyTok(name)] for name in state.keys_in_scope[-1] if KeyTok(name) in vocab]
        mask[used] = False
    return mask


def prefix_mask_classes(tokens: Sequence[Token]) -> List[MaskClass]:
    """Mask class of the state after each token, i.e. for predicting the token that follows."""
    classes = []
    state = initial_state()
    for position, token in enumerate(tokens):
        state, _ = step(state, token, position=position)
        classes.append(mask_class(state))
    return classes


def value_complete(state: AutomatonState, depth: int) -> bool:
    """Whether the value opened at the given object depth has been completely read."""
    return state.control is Control.EXPECT_KEY_OR_CLOSE and state.depth == depth
