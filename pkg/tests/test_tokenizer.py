# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
import os

import pytest

from kvformer.document import Array, Bool, Document, Float, Int, Null, Object, Str, load_jsonl, parse_json
from kvformer.tokenizer import (
    GRAMMAR_SIZE,
    ArrayTok,
    Grammar,
    KeyTok,
    OverlongError,
    TokenizerError,
    TokenKind,
    ValTok,
    Vocabulary,
    build_vocabulary,
    decode,
    detokenize,
    encode,
    load_vocabulary,
    save_vocabulary,
    structural_unknown,
    token_from_line,
    token_kind,
    token_to_line,
    tokenize,
)
from tests.testutil import fixture, load_file, random_documents

START, END, OBJ_START, OBJ_END, UNKNOWN, PAD = (
    Grammar.START,
    Grammar.END,
    Grammar.OBJ_START,
    Grammar.OBJ_END,
    Grammar.UNKNOWN,
    Grammar.PAD,
)


def token_count(value: Document) -> int:
    """Number of tokens a value contributes, counted independently of the tokenizer."""
    if isinstance(value, Object):
        return 2 + sum(1 + token_count(item) for _, item in value.pairs)
    if isinstance(value, Array):
        return 1 + sum(token_count(item) for item in value.items)
    return 1


class TestTokenize:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ('{"a": 1}', [START, KeyTok("a"), ValTok(Int(1)), END]),
            ('{"g": ["x", "y"]}', [START, KeyTok("g"), ArrayTok(2), ValTok(Str("x")), ValTok(Str("y")), END]),
            ('{"a": {"b": []}}', [START, KeyTok("a"), OBJ_START, KeyTok("b"), ArrayTok(0), OBJ_END, END]),
            ("{}", [START, END]),
        ],
    )
    def test_tokenize(self, text, expected):
        assert tokenize(parse_json(text)) == expected

    def test_key_and_value_distinct(self):
        tokens = tokenize(parse_json('{"age": "age"}'))
        assert tokens[1] == KeyTok("age")
        assert tokens[2] == ValTok(Str("age"))
        assert tokens[1] != tokens[2]

    def test_non_object(self):
        with pytest.raises(TokenizerError, match=r"Only objects can be tokenized, got Array"):
            tokenize(Array((Int(1),)))

    def test_length_property(self):
        for doc in random_documents(200, seed=3):
            assert len(tokenize(doc)) == token_count(doc)

    def test_obj_never_emitted(self):
        for doc in random_documents(200, seed=4):
            assert Grammar.OBJ not in tokenize(doc)

    @pytest.mark.parametrize(
        "token,kind",
        [
            (START, TokenKind.GRAMMAR),
            (ArrayTok(3), TokenKind.ARRAY),
            (KeyTok("a"), TokenKind.KEY),
            (ValTok(Null()), TokenKind.VALUE),
        ],
    )
    def test_token_kind(self, token, kind):
        assert token_kind(token) is kind


class TestDetokenize:
    def test_pads_stripped(self):
        assert detokenize([START, KeyTok("a"), ValTok(Int(1)), END, PAD, PAD]) == parse_json('{"a": 1}')

    def test_empty(self):
        assert detokenize([START, END]) == Object()

    def test_truncated(self):
        with pytest.raises(TokenizerError) as e:
            detokenize([START, KeyTok("a"), ValTok(Int(1))])
        assert e.value.position == 3

    def test_unknown_value(self):
        assert detokenize([START, KeyTok("a"), UNKNOWN, END]) == Object((("a", Str("[UNKNOWN]")),))

    def test_nested_arrays(self):
        doc = parse_json('{"a": [[1, 2], [], [{"b": [true]}]], "c": null}')
        assert detokenize(tokenize(doc)) == doc

    @pytest.mark.parametrize(
        "tokens,position",
        [
            ([KeyTok("a")], 0),
            ([START, OBJ_END], 1),
            ([START, END, KeyTok("a")], 2),
            ([START, KeyTok("a"), KeyTok("b")], 2),
            ([START, KeyTok("a"), ArrayTok(1), END], 3),
        ],
    )
    def test_rejected(self, tokens, position):
        with pytest.raises(TokenizerError) as e:
            detokenize(tokens)
        assert e.value.position == position

    def test_round_trip_random(self):
        for doc in random_documents(1000, seed=5):
            assert detokenize(tokenize(doc)) == doc


class TestVocabulary:
    def test_build(self):
        vocab = build_vocabulary([parse_json('{"a": 1}'), parse_json('{"a": 2}')])
        assert len(vocab) == 10
        assert list(vocab.tokens[:GRAMMAR_SIZE]) == list(Grammar)
        assert vocab.tokens[GRAMMAR_SIZE:] == (KeyTok("a"), ValTok(Int(1)), ValTok(Int(2)))
        assert vocab.counts[GRAMMAR_SIZE:] == (2, 1, 1)

    def test_build_truncated_tie(self):
        vocab = build_vocabulary([parse_json('{"a": 1}'), parse_json('{"a": 2}')], max_size=9)
        assert len(vocab) == 9
        assert ValTok(Int(1)) in vocab
        assert ValTok(Int(2)) not in vocab
        assert vocab.id_of(ValTok(Int(2))) == UNKNOWN.value

    def test_build_truncated_frequency(self):
        corpus = [parse_json('{"a": "rare", "b": "x"}'), parse_json('{"b": "x"}'), parse_json('{"b": "x"}')]
        vocab = build_vocabulary(corpus, max_size=GRAMMAR_SIZE + 2)
        assert vocab.tokens[GRAMMAR_SIZE:] == (KeyTok("b"), ValTok(Str("x")))

    def test_build_empty(self):
        with pytest.raises(TokenizerError, match=r"empty corpus"):
            build_vocabulary([])

    def test_build_too_small(self):
        with pytest.raises(TokenizerError, match=r"smaller than the grammar"):
            build_vocabulary([parse_json('{"a": 1}')], max_size=3)

    def test_array_counters_registered(self):
        vocab = build_vocabulary([parse_json('{"g": ["x", "y", "z"]}')])
        assert ArrayTok(3) in vocab
        assert ArrayTok(2) in vocab
        assert ArrayTok(1) in vocab
        assert vocab.counts[vocab.id_of(ArrayTok(3))] == 2  # the array token and the first element position

    def test_counter_only_lengths(self, tmp_path):
        vocab = build_vocabulary([parse_json('{"a": [1, 2, 3]}')])
        assert vocab.counters == frozenset({ArrayTok(2), ArrayTok(1)})
        assert vocab.stream_id(ArrayTok(3)) == vocab.id_of(ArrayTok(3))
        assert vocab.stream_id(ArrayTok(2)) == UNKNOWN.value
        assert vocab.id_of(ArrayTok(2)) != UNKNOWN.value
        assert vocab.array_value_mask().nonzero().flatten().tolist() == [vocab.id_of(ArrayTok(3))]
        assert "G:COUNTER:1\n" in vocab.to_text()
        path = os.path.join(tmp_path, "vocab.txt")
        save_vocabulary(path, vocab)
        loaded = load_vocabulary(path)
        assert loaded.counters == vocab.counters
        assert loaded.checksum() == vocab.checksum()

    def test_length_observed_elsewhere_is_not_counter(self):
        vocab = build_vocabulary([parse_json('{"a": [1, 2, 3]}'), parse_json('{"b": [7]}')])
        assert vocab.counters == frozenset({ArrayTok(2)})

    def test_counters_must_be_array_tokens(self):
        with pytest.raises(TokenizerError, match=r"Counter entries"):
            Vocabulary(tokens=list(Grammar) + [KeyTok("a")], counters=[KeyTok("a")])
        with pytest.raises(TokenizerError, match=r"Counter entries"):
            Vocabulary(tokens=list(Grammar), counters=[ArrayTok(1)])

    def test_invalid_counter_entry(self, tmp_path):
        path = os.path.join(tmp_path, "vocab.txt")
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("".join("%s\n" % token_to_line(token) for token in Grammar) + "G:COUNTER:x\n")
        with pytest.raises(TokenizerError, match=r"Invalid vocabulary entry"):
            load_vocabulary(path)

    def test_subsets(self):
        vocab = load_vocabulary(fixture("tokenizer", "vocab.txt"))
        assert vocab.key_ids() == [7, 9]
        assert vocab.value_ids() == [8, 11, 13]
        assert vocab.array_ids() == [10, 12]
        assert vocab.counters == frozenset({ArrayTok(1)})
        assert vocab.array_value_mask().tolist() == [i == 10 for i in range(len(vocab))]
        assert vocab.kind_mask(TokenKind.KEY).tolist() == [i in (7, 9) for i in range(len(vocab))]

    def test_must_begin_with_grammar(self):
        with pytest.raises(TokenizerError, match=r"fixed grammar tokens"):
            Vocabulary(tokens=[KeyTok("a")])

    def test_duplicates(self):
        with pytest.raises(TokenizerError, match=r"duplicate tokens"):
            Vocabulary(tokens=list(Grammar) + [KeyTok("a"), KeyTok("a")])

    def test_golden_file(self, tmp_path):
        vocab = build_vocabulary(load_jsonl(fixture("tokenizer", "corpus.jsonl")))
        path = os.path.join(tmp_path, "vocab.txt")
        save_vocabulary(path, vocab)
        assert load_file(path) == load_file(fixture("tokenizer", "vocab.txt"))
        assert load_vocabulary(path).tokens == vocab.tokens
        assert load_vocabulary(path).checksum() == vocab.checksum()

    def test_deterministic(self):
        docs = random_documents(50, seed=6)
        assert build_vocabulary(docs, max_size=40).to_text() == build_vocabulary(docs, max_size=40).to_text()

    @pytest.mark.parametrize(
        "token,line",
        [
            (Grammar.OBJ, "G:OBJ"),
            (ArrayTok(12), "G:ARRAY:12"),
            (KeyTok('a"b\nc'), 'K:a\\"b\\nc'),
            (ValTok(Str("é")), "V:s:é"),
            (ValTok(Int(-3)), "V:i:-3"),
            (ValTok(Float(1e-07)), "V:f:1e-07"),
            (ValTok(Bool(True)), "V:b:true"),
            (ValTok(Null()), "V:null"),
        ],
    )
    def test_lines(self, token, line):
        assert token_to_line(token) == line
        assert token_from_line(line) == token

    @pytest.mark.parametrize("line", ["X:a", "G:BOGUS", "V:i:abc", "G:ARRAY:x", "V:b:maybe"])
    def test_invalid_line(self, line):
        with pytest.raises(TokenizerError, match=r"Invalid vocabulary entry"):
            token_from_line(line)


class TestEncode:
    def test_encode_padded(self):
        vocab = build_vocabulary([parse_json('{"a": 1}')])
        assert encode([START, KeyTok("a"), ValTok(Int(1)), END], vocab, pad_to=6) == [0, 7, 8, 1, 6, 6]

    def test_encode_unknown(self):
        vocab = build_vocabulary([parse_json('{"a": 1}')])
        tokens = tokenize(parse_json('{"a": "zzz", "b": [1]}'))
        assert encode(tokens, vocab) == [0, 7, 5, 5, 5, 8, 1]

    def test_overlong(self):
        vocab = build_vocabulary([parse_json('{"a": 1}')])
        tokens = [START] + [KeyTok("a"), ValTok(Int(1))] * 2000 + [END]
        assert len(tokens) == 4002
        with pytest.raises(OverlongError) as e:
            encode(tokens, vocab, pad_to=4000)
        assert e.value.length == 4002
        assert e.value.limit == 4000
        assert len(encode(tokens, vocab, pad_to=4000, truncate=True)) == 4000

    def test_decode(self):
        vocab = build_vocabulary([parse_json('{"a": 1}')])
        assert decode([0, 1], vocab) == [START, END]
        with pytest.raises(TokenizerError, match=r"out of range"):
            decode([len(vocab)], vocab)

    def test_id_bijection(self):
        vocab = build_vocabulary(random_documents(100, seed=7))
        for token_id, token in enumerate(vocab.tokens):
            assert vocab.id_of(token) == token_id
            assert decode([token_id], vocab) == [token]
            if token not in vocab.counters:
                assert encode([token], vocab) == [token_id]

    def test_encode_counter_only_length(self):
        vocab = build_vocabulary([parse_json('{"a": [1, 2, 3]}')])
        tokens = tokenize(parse_json('{"a": [1, 2]}'))
        assert encode(tokens, vocab) == [0, 7, 5, vocab.id_of(ValTok(Int(1))), vocab.id_of(ValTok(Int(2))), 1]
        assert encode(tokenize(parse_json('{"a": [3, 2, 1]}')), vocab)[2] == vocab.id_of(ArrayTok(3))

    def test_structural_unknown(self):
        vocab = build_vocabulary([parse_json('{"a": 1}')])
        assert structural_unknown(tokenize(parse_json('{"a": "new"}')), vocab) is None
        assert structural_unknown(tokenize(parse_json('{"a": 1, "b": 2}')), vocab) == 3
        assert structural_unknown(tokenize(parse_json('{"a": [1]}')), vocab) == 2

    def test_structural_unknown_counter_only_length(self):
        vocab = build_vocabulary([parse_json('{"a": [5, 6]}')])
        assert ArrayTok(1) in vocab
        assert structural_unknown(tokenize(parse_json('{"a": [5, 6]}')), vocab) is None
        assert structural_unknown(tokenize(parse_json('{"a": [5]}')), vocab) == 2
