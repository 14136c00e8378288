# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
import logging
import os

import pytest

from kvformer.document import (
    Array,
    Bool,
    DocumentError,
    Float,
    Int,
    Null,
    Object,
    Str,
    from_python,
    iter_jsonl,
    load_jsonl,
    parse_json,
    serialize_json,
    to_python,
    write_jsonl,
)
from tests.testutil import fixture, random_documents


class TestDocument:
    def test_object_accessors(self):
        obj = Object((("a", Int(1)), ("b", Str("x"))))
        assert obj.keys() == ["a", "b"]
        assert obj.get("b") == Str("x")
        assert obj.get("c") is None
        assert obj.without("a") == Object((("b", Str("x")),))
        assert obj.without("c") == obj

    def test_int_and_float_are_distinct(self):
        assert Int(1) != Float(1.0)
        assert Float(0.0) != Float(-0.0)
        assert Float(0.5) == Float(0.5)

    def test_int_range(self):
        with pytest.raises(DocumentError, match=r"64-bit"):
            Int(2**63)

    def test_float_non_finite(self):
        with pytest.raises(DocumentError, match=r"Non-finite"):
            Float(float("nan"))

    def test_python_conversion(self):
        value = {"a": [1, 2.5, "x", True, None], "b": {"c": {}}}
        doc = from_python(value)
        assert doc == Object(
            (
                ("a", Array((Int(1), Float(2.5), Str("x"), Bool(True), Null()))),
                ("b", Object((("c", Object()),))),
            )
        )
        assert to_python(doc) == value

    def test_python_conversion_unsupported(self):
        with pytest.raises(DocumentError, match=r"Unsupported value type: set"):
            from_python({1, 2})


class TestParseJson:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ('{"a": 1}', Object((("a", Int(1)),))),
            ('{"a": [1, {"b": null}]}', Object((("a", Array((Int(1), Object((("b", Null()),))))),))),
            ('{"a": 1.0}', Object((("a", Float(1.0)),))),
            ('{"z": 1, "a": 2}', Object((("z", Int(1)), ("a", Int(2))))),
            ("[1]", Array((Int(1),))),
            ('"x"', Str("x")),
        ],
    )
    def test_parse(self, text, expected):
        assert parse_json(text) == expected

    def test_duplicate_key(self):
        with pytest.raises(DocumentError, match=r"Duplicate key in object: \"a\""):
            parse_json('{"a": 1, "a": 2}')

    def test_nested_duplicate_key(self):
        with pytest.raises(DocumentError, match=r"Duplicate key"):
            parse_json('{"x": {"a": 1, "a": 2}}')

    def test_syntax_error_offset(self):
        with pytest.raises(DocumentError) as e:
            parse_json('{"é": }')
        assert e.value.offset == 7  # the é is two bytes in UTF-8
        assert "Invalid JSON at byte 7" in e.value.message

    @pytest.mark.parametrize("text", ['{"a": NaN}', '{"a": Infinity}', '{"a": -Infinity}'])
    def test_non_finite(self, text):
        with pytest.raises(DocumentError, match=r"Non-finite"):
            parse_json(text)

    def test_big_int(self):
        with pytest.raises(DocumentError, match=r"64-bit"):
            parse_json('{"a": 9223372036854775808}')


class TestSerializeJson:
    @pytest.mark.parametrize(
        "doc,expected",
        [
            (Object(), "{}"),
            (Object((("x", Float(0.5)),)), '{"x": 0.5}'),
            (Object((("x", Float(1.0)),)), '{"x": 1.0}'),
            (Object((("a", Array((Int(1), Bool(False), Null()))), ("b", Str("é\n")))), '{"a": [1, false, null], "b": "é\\n"}'),
            (Array(), "[]"),
        ],
    )
    def test_serialize(self, doc, expected):
        assert serialize_json(doc) == expected

    def test_round_trip_random(self):
        for doc in random_documents(1000, seed=1):
            assert parse_json(serialize_json(doc)) == doc

    @pytest.mark.parametrize("text", ['{"a": 0.1}', '{"a": 1e-07}', '{"a": 12345678901234567890.0}', '{"a": -0.0}'])
    def test_canonical_float_stable(self, text):
        once = serialize_json(parse_json(text))
        assert serialize_json(parse_json(once)) == once


class TestJsonl:
    def test_load_valid(self):
        docs = load_jsonl(fixture("document", "valid.jsonl"))
        assert [serialize_json(doc) for doc in docs] == ['{"a": 1}', '{"b": [true, null]}', '{"c": {"d": 0.5}}']

    def test_line_numbers(self):
        assert [line for line, _ in iter_jsonl(fixture("document", "valid.jsonl"))] == [1, 3, 4]

    def test_load_empty(self):
        assert load_jsonl(fixture("document", "empty.jsonl")) == []

    def test_load_malformed_fail_fast(self):
        with pytest.raises(DocumentError) as e:
            load_jsonl(fixture("document", "malformed.jsonl"))
        assert e.value.line == 2

    def test_load_malformed_skip(self, caplog):
        with caplog.at_level(logging.WARNING):
            docs = load_jsonl(fixture("document", "malformed.jsonl"), fail_fast=False)
        assert len(docs) == 2
        assert len([record for record in caplog.records if record.levelno == logging.WARNING]) == 1

    def test_load_invalid_utf8_fail_fast(self):
        with pytest.raises(DocumentError, match=r"encoding.jsonl:2: Invalid UTF-8 at byte 7") as e:
            load_jsonl(fixture("document", "encoding.jsonl"))
        assert e.value.line == 2
        assert e.value.offset == 7

    def test_load_invalid_utf8_skip(self, caplog):
        with caplog.at_level(logging.WARNING):
            docs = list(iter_jsonl(fixture("document", "encoding.jsonl"), fail_fast=False))
        assert [(line, serialize_json(doc)) for line, doc in docs] == [(1, '{"a": 1}'), (3, '{"c": 3}')]
        assert [record.levelno for record in caplog.records] == [logging.WARNING]

    def test_load_top_level_array(self):
        with pytest.raises(DocumentError, match=r"Top-level value must be an object"):
            load_jsonl(fixture("document", "toplevel.jsonl"))
        assert len(load_jsonl(fixture("document", "toplevel.jsonl"), require_object=False)) == 2

    def test_write(self, tmp_path):
        path = os.path.join(tmp_path, "out.jsonl")
        docs = random_documents(20, seed=2)
        write_jsonl(path, docs)
        assert load_jsonl(path) == docs
