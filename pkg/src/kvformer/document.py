# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
In-memory JSON value model, canonical serialization and JSONL corpus ingestion.

A document is a tagged value rather than plain Python data, because plain data cannot
tell `1`, `1.0` and `true` apart once they are used as dictionary keys or set members,
and the tokenizer needs those to be distinct tokens.  Object key order is preserved.
"""
import json
import logging
import math
from typing import Any, Iterator, List, Optional, Tuple, Union

from attrs import field, frozen

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1


@frozen
class DocumentError(Exception):
    """An error parsing, validating or loading a document."""

    message: str
    offset: Optional[int] = None
    line: Optional[int] = None


def canonical_float(value: float) -> str:
    """Shortest round-trip decimal form of a float, the identity of a float token."""
    return repr(float(value))


def _check_int(_: Any, __: Any, value: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DocumentError("Int value must be an integer, got %s" % type(value).__name__)
    if not INT_MIN <= value <= INT_MAX:
        raise DocumentError("Int value is outside the 64-bit signed range: %d" % value)


def _check_float(_: Any, __: Any, value: float) -> None:
    if not isinstance(value, float):
        raise DocumentError("Float value must be a float, got %s" % type(value).__name__)
    if not math.isfinite(value):
        raise DocumentError("Non-finite float values are not representable in JSON: %s" % value)


@frozen
class Str:
    value: str


@frozen
class Int:
    value: int = field(validator=_check_int)


@frozen
class Float:
    # two floats are the same value iff their canonical forms match (so 0.0 != -0.0)
    value: float = field(validator=_check_float, eq=canonical_float)


@frozen
class Bool:
    value: bool


@frozen
class Null:
    pass


@frozen
class Array:
    items: Tuple["Document", ...] = field(default=(), converter=tuple)


@frozen
class Object:
    """An object, as an ordered sequence of (key, value) pairs."""

    pairs: Tuple[Tuple[str, "Document"], ...] = field(default=(), converter=tuple)

    def keys(self) -> List[str]:
        return [key for key, _ in self.pairs]

    def get(self, key: str) -> Optional["Document"]:
        for name, value in self.pairs:
            if name == key:
                return value
        return None

    def without(self, key: str) -> "Object":
        """Copy of this object with a top-level key removed."""
        return Object(tuple((name, value) for name, value in self.pairs if name != key))


Primitive = Union[Str, Int, Float, Bool, Null]
Document = Union[Object, Array, Str, Int, Float, Bool, Null]

PRIMITIVES = (Str, Int, Float, Bool, Null)


def is_primitive(doc: Document) -> bool:
    return isinstance(doc, PRIMITIVES)


def from_python(value: Any) -> Document:
    """Convert plain Python data (dict, list, str, int, float, bool, None) into a document."""
    if isinstance(value, (Object, Array, Str, Int, Float, Bool, Null)):
        return value
    if value is None:
        return Null()
    if isinstance(value, bool):
        return Bool(value)
    if isinstance(value, int):
        return Int(value)
    if isinstance(value, float):
        return Float(value)
    if isinstance(value, str):
        return Str(value)
    if isinstance(value, dict):
        return Object(tuple((str(key), from_python(item)) for key, item in value.items()))
    if isinstance(value, (list, tuple)):
        return Array(tuple(from_python(item) for item in value))
    raise DocumentError("Unsupported value type: %s" % type(value).__name__)


def to_python(doc: Document) -> Any:
    """Convert a document into plain Python data; duplicate keys collapse to the last value."""
    if isinstance(doc, Object):
        return {key: to_python(value) for key, value in doc.pairs}
    if isinstance(doc, Array):
        return [to_python(item) for item in doc.items]
    if isinstance(doc, Null):
        return None
    return doc.value


def _reject_constant(name: str) -> Any:
    raise DocumentError("Non-finite number %s is not valid JSON" % name)


def _object_hook(pairs: List[Tuple[str, Any]]) -> Object:
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise DocumentError("Duplicate key in object: %s" % json.dumps(key, ensure_ascii=False))
        seen.add(key)
    return Object(tuple((key, from_python(value)) for key, value in pairs))


def parse_json(text: str) -> Document:
    """Parse JSON text into a document, rejecting duplicate keys and non-finite numbers."""
    try:
        return from_python(json.loads(text, object_pairs_hook=_object_hook, parse_constant=_reject_constant))
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise DocumentError("Invalid JSON at byte %d: %s" % (offset, e.msg), offset=offset) from e
    except RecursionError as e:
        raise DocumentError("JSON is nested too deeply") from e


def _string(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def serialize_json(doc: Document) -> str:
    """Serialize a document deterministically, with one space after ':' and ','."""
    if isinstance(doc, Object):
        return "{" + ", ".join("%s: %s" % (_string(key), serialize_json(value)) for key, value in doc.pairs) + "}"
    if isinstance(doc, Array):
        return "[" + ", ".join(serialize_json(item) for item in doc.items) + "]"
    if isinstance(doc, Str):
        return _string(doc.value)
    if isinstance(doc, Bool):
        return "true" if doc.value else "false"
    if isinstance(doc, Int):
        return str(doc.value)
    if isinstance(doc, Float):
        return canonical_float(doc.value)
    return "null"


def _decode_line(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DocumentError("Invalid UTF-8 at byte %d" % e.start, offset=e.start) from e


def iter_jsonl(path: str, fail_fast: bool = True, require_object: bool = True) -> Iterator[Tuple[int, Document]]:
    """Iterate over (line number, document) pairs in a JSONL file, ignoring blank lines."""
    with open(path, "rb") as fp:
        for line_no, raw in enumerate(fp, start=1):
            if not raw.strip():
                continue
            try:
                doc = parse_json(_decode_line(raw))
                if require_object and not isinstance(doc, Object):
                    raise DocumentError("Top-level value must be an object")
            except DocumentError as e:
                if fail_fast:
                    raise DocumentError("%s:%d: %s" % (path, line_no, e.message), offset=e.offset, line=line_no) from e
                logging.warning("Skipping %s:%d: %s", path, line_no, e.message)
                continue
            yield line_no, doc


def load_jsonl(path: str, fail_fast: bool = True, require_object: bool = True) -> List[Document]:
    """Load all documents from a JSONL file, in file order."""
    return [doc for _, doc in iter_jsonl(path, fail_fast=fail_fast, require_object=require_object)]


def write_jsonl(path: str, docs: List[Document]) -> None:
    """Write documents to a JSONL file, one canonical serialization per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        for doc in docs:
            fp.write(serialize_json(doc))
            fp.write("\n")
