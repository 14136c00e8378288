# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:
import json
import os
from collections import Counter

import pytest

from kvformer.datagen import (
    KEY_COLORS,
    TREASURES,
    DatagenError,
    DungeonsConfig,
    TabularConfig,
    corridor_treasure,
    csv_to_jsonl,
    dungeon_instance,
    dungeons_preset,
    generate_dungeons,
    generate_tabular,
    load_presets,
    tabular_preset,
    write_dungeons,
)
from kvformer.document import Array, Bool, Float, Int, Object, Str, load_jsonl
from tests.testutil import fixture


class TestDungeons:
    def test_presets(self):
        hard = dungeons_preset("dungeons-hard")
        easy = dungeons_preset("dungeons-easy")
        assert hard == DungeonsConfig()
        assert hard.n_instances == 10000
        assert not easy.shuffle_doors
        assert easy.shuffle_keys

    def test_preset_sections(self):
        assert sorted(load_presets("dungeons")) == ["dungeons-easy", "dungeons-hard"]
        assert sorted(load_presets("experiments")) == ["dungeons-pe", "guardrails", "upscaling"]
        assert load_presets("tabular")["nInstances"] == tabular_preset().n_instances

    def test_unknown_preset(self):
        with pytest.raises(DatagenError, match=r"Unknown Dungeons preset bogus"):
            dungeons_preset("bogus")

    @pytest.mark.parametrize(
        "values",
        [{"min_doors": 0}, {"min_doors": 5, "max_doors": 4}, {"keys_per_door": 4}, {"n_instances": -1}],
    )
    def test_invalid_config(self, values):
        with pytest.raises(DatagenError):
            DungeonsConfig(**values)

    def test_deterministic(self):
        config = DungeonsConfig(n_instances=10, seed=3)
        docs = generate_dungeons(config)
        assert docs == generate_dungeons(config)
        assert docs[7] == dungeon_instance(config, 7)
        assert generate_dungeons(DungeonsConfig(n_instances=10, seed=4)) != docs

    def test_structure(self):
        config = DungeonsConfig(n_instances=300, seed=1)
        for doc in generate_dungeons(config):
            assert doc.keys() == ["door", "key_color", "corridor", "treasure"]
            corridor = doc.get("corridor").items
            assert config.min_doors <= len(corridor) <= config.max_doors
            assert sorted(obj.get("door_no").value for obj in corridor) == list(range(1, len(corridor) + 1))
            assert 1 <= doc.get("door").value <= len(corridor)
            assert doc.get("key_color").value in KEY_COLORS
            for obj in corridor:
                assert sorted(obj.keys()) == ["blue_key", "door_no", "green_key", "monsters", "red_key"]
                monsters = obj.get("monsters").items
                assert len(monsters) == len(set(monsters)) <= 2

    def test_treasure_invariant(self):
        for doc in generate_dungeons(DungeonsConfig(n_instances=500, seed=2)):
            corridor = doc.get("corridor").items
            assert doc.get("treasure") == corridor_treasure(corridor, doc.get("door").value, doc.get("key_color").value)
            door = [obj for obj in corridor if obj.get("door_no") == doc.get("door")][0]
            assert door.get("%s_key" % doc.get("key_color").value) == doc.get("treasure")

    def test_label_frequency(self):
        counts = Counter(doc.get("treasure").value for doc in generate_dungeons(dungeons_preset("dungeons-hard")))
        assert sum(counts.values()) == 10000
        for treasure in TREASURES:
            assert abs(counts[treasure] / 10000 - 0.2) <= 0.015

    def test_easy_keeps_door_order(self):
        for doc in generate_dungeons(DungeonsConfig(n_instances=50, shuffle_doors=False)):
            numbers = [obj.get("door_no").value for obj in doc.get("corridor").items]
            assert numbers == list(range(1, len(numbers) + 1))

    def test_fewer_keys_no_monsters(self):
        config = DungeonsConfig(n_instances=20, keys_per_door=1, include_monsters=False, shuffle_keys=False)
        for doc in generate_dungeons(config):
            assert doc.get("key_color") == Str("red")
            for obj in doc.get("corridor").items:
                assert obj.keys() == ["door_no", "red_key"]

    def test_corridor_treasure_missing(self):
        corridor = [Object((("door_no", Int(1)), ("red_key", Str("gold"))))]
        assert corridor_treasure(corridor, 1, "red") == Str("gold")
        with pytest.raises(DatagenError, match=r"no door 2 with a red key"):
            corridor_treasure(corridor, 2, "red")
        with pytest.raises(DatagenError, match=r"no door 1 with a blue key"):
            corridor_treasure(corridor, 1, "blue")

    def test_write(self, tmp_path):
        path = os.path.join(tmp_path, "dungeons.jsonl")
        config = DungeonsConfig(n_instances=25, seed=9)
        docs = write_dungeons(path, config)
        assert load_jsonl(path) == docs
        with open("%s.meta.json" % path, encoding="utf-8") as fp:
            metadata = json.load(fp)
        assert metadata["config"]["nInstances"] == 25
        assert metadata["config"]["seed"] == 9
        assert metadata["treasures"] == list(TREASURES)
        assert metadata["keyColors"] == list(KEY_COLORS)


class TestTabular:
    def test_preset(self):
        assert tabular_preset() == TabularConfig()

    def test_invalid(self):
        with pytest.raises(DatagenError, match=r"at least 2 features"):
            TabularConfig(n_features=1)
        with pytest.raises(DatagenError, match=r"Rates"):
            TabularConfig(missing_rate=1.0)

    def test_rows(self):
        config = tabular_preset()
        docs = generate_tabular(config)
        assert len(docs) == 700
        assert docs == generate_tabular(config)
        agree = 0
        for doc in docs:
            assert doc.keys()[:2] == ["f0", "f1"]
            assert doc.keys()[-1] == "label"
            assert doc.get("label") in (Str("yes"), Str("no"))
            first, second = int(doc.get("f0").value[1:]), int(doc.get("f1").value[1:])
            agree += doc.get("label") == Str("yes" if (first + second) % 2 == 0 else "no")
        assert abs(agree / 700 - 0.95) <= 0.03

    def test_missing_keys(self):
        docs = generate_tabular(TabularConfig(n_instances=200, missing_rate=0.5))
        assert any(len(doc.keys()) < 9 for doc in docs)
        assert all(len(doc.keys()) == 9 for doc in generate_tabular(TabularConfig(n_instances=50, missing_rate=0.0)))


class TestCsv:
    def test_inferred(self):
        docs = csv_to_jsonl(fixture("datagen", "people.csv"))
        assert docs == [
            Object(
                (
                    ("name", Str("alice")),
                    ("age", Int(30)),
                    ("score", Float(1.5)),
                    ("member", Bool(True)),
                    ("note", Str("hello")),
                )
            ),
            Object((("name", Str("bob")), ("score", Float(2.0)), ("member", Bool(False)))),
            Object(
                (
                    ("name", Str("carol")),
                    ("age", Int(41)),
                    ("score", Float(3.25)),
                    ("member", Bool(True)),
                    ("note", Str("x")),
                )
            ),
        ]

    def test_hints(self):
        docs = csv_to_jsonl(fixture("datagen", "people.csv"), {"age": "str", "score": "str"})
        assert docs[0].get("age") == Str("30")
        assert docs[1].get("score") == Str("2")

    def test_bad_hint_value(self):
        with pytest.raises(DatagenError) as e:
            csv_to_jsonl(fixture("datagen", "people.csv"), {"name": "int"})
        assert e.value.line == 2
        assert "not a valid int" in e.value.message

    def test_unknown_hint(self):
        with pytest.raises(DatagenError, match=r"Unknown column type date"):
            csv_to_jsonl(fixture("datagen", "people.csv"), {"age": "date"})

    def test_ragged(self):
        with pytest.raises(DatagenError) as e:
            csv_to_jsonl(fixture("datagen", "ragged.csv"))
        assert e.value.line == 3
        assert "header has 2" in e.value.message

    def test_empty(self):
        with pytest.raises(DatagenError, match=r"no header row"):
            csv_to_jsonl(fixture("datagen", "empty.csv"))

    def test_array_free(self):
        for doc in csv_to_jsonl(fixture("datagen", "people.csv")):
            assert not any(isinstance(value, (Array, Object)) for _, value in doc.pairs)
