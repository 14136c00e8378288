# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Synthetic datasets and a CSV adapter.

The Dungeons task hides the label inside a corridor of door objects: the top-level
`door` and `key_color` clues name the door object and the key whose value is the
`treasure`.  Each instance draws from its own random stream derived from (seed, index),
so generation is reproducible and independent of instance order.
"""
import csv
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from attrs import field, frozen
from importlib_resources import files

import kvformer.data
from kvformer.converter import CONVERTER
from kvformer.document import Array, Bool, Document, DocumentError, Float, Int, Object, Str, write_jsonl

TREASURES = ("gold", "silver", "gems", "potion", "curse")
MONSTERS = ("goblin", "orc", "dragon", "slime", "skeleton")
KEY_COLORS = ("red", "green", "blue")
MAX_MONSTERS = 2

_PRESETS_FILE = "presets.yaml"


@frozen
class DatagenError(Exception):
    """An error generating or converting a dataset."""

    message: str
    line: Optional[int] = None


@frozen
class DungeonsConfig:
    min_doors: int = 4
    max_doors: int = 8
    keys_per_door: int = 3
    include_monsters: bool = True
    shuffle_doors: bool = True
    shuffle_keys: bool = True
    n_instances: int = 10000
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if not 1 <= self.min_doors <= self.max_doors:
            raise DatagenError("Door counts must satisfy 1 <= min_doors <= max_doors")
        if not 1 <= self.keys_per_door <= len(KEY_COLORS):
            raise DatagenError("Keys per door must be between 1 and %d" % len(KEY_COLORS))
        if self.n_instances < 0:
            raise DatagenError("Number of instances must not be negative")


@frozen
class DungeonsMetadata:
    """Sidecar written next to a generated Dungeons corpus."""

    config: DungeonsConfig
    treasures: Tuple[str, ...] = field(converter=tuple, default=TREASURES)
    monsters: Tuple[str, ...] = field(converter=tuple, default=MONSTERS)
    key_colors: Tuple[str, ...] = field(converter=tuple, default=KEY_COLORS)


@frozen
class TabularConfig:
    """A small flat classification corpus with missing keys and label noise."""

    n_instances: int = 700
    n_features: int = 8
    n_values: int = 4
    missing_rate: float = 0.1
    label_noise: float = 0.05
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if self.n_features < 2 or self.n_values < 2:
            raise DatagenError("Tabular corpus needs at least 2 features with 2 values each")
        if not 0.0 <= self.missing_rate < 1.0 or not 0.0 <= self.label_noise <= 1.0:
            raise DatagenError("Rates must be within [0, 1)")


def load_presets(section: str) -> Dict[str, Any]:
    """One top-level section of the packaged presets file."""
    presets = yaml.safe_load(files(kvformer.data).joinpath(_PRESETS_FILE).read_text())
    return presets[section]  # type: ignore[no-any-return]


def dungeons_preset(name: str) -> DungeonsConfig:
    """Load a pinned Dungeons configuration such as dungeons-hard or dungeons-easy."""
    presets = load_presets("dungeons")
    if name not in presets:
        raise DatagenError("Unknown Dungeons preset %s; expected one of %s" % (name, ", ".join(sorted(presets))))
    return CONVERTER.structure(presets[name], DungeonsConfig)


def tabular_preset() -> TabularConfig:
    return CONVERTER.structure(load_presets("tabular"), TabularConfig)


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _door(rng: np.random.Generator, config: DungeonsConfig, door_no: int) -> Object:
    pairs: List[Tuple[str, Document]] = [("door_no", Int(door_no))]
    for color in KEY_COLORS[: config.keys_per_door]:
        pairs.append(("%s_key" % color, Str(TREASURES[int(rng.integers(len(TREASURES)))])))
    if config.include_monsters:
        count = int(rng.integers(MAX_MONSTERS + 1))
        names = rng.choice(len(MONSTERS), size=count, replace=False)
        pairs.append(("monsters", Array(tuple(Str(MONSTERS[int(i)]) for i in names))))
    if config.shuffle_keys:
        pairs = [pairs[int(i)] for i in rng.permutation(len(pairs))]
    return Object(tuple(pairs))


def dungeon_instance(config: DungeonsConfig, index: int) -> Object:
    """Generate instance number index of a Dungeons corpus."""
    rng = _instance_rng(config.seed, index)
    doors = int(rng.integers(config.min_doors, config.max_doors + 1))
    door = int(rng.integers(1, doors + 1))
    key_color = KEY_COLORS[int(rng.integers(config.keys_per_door))]
    corridor = [_door(rng, config, door_no) for door_no in range(1, doors + 1)]
    if config.shuffle_doors:
        corridor = [corridor[int(i)] for i in rng.permutation(doors)]
    treasure = corridor_treasure(corridor, door, key_color)
    return Object(
        (
            ("door", Int(door)),
            ("key_color", Str(key_color)),
            ("corridor", Array(tuple(corridor))),
            ("treasure", treasure),
        )
    )


def corridor_treasure(corridor: Sequence[Document], door: int, key_color: str) -> Document:
    """The value of the named key on the door object with the given door number."""
    for obj in corridor:
        if isinstance(obj, Object) and obj.get("door_no") == Int(door):
            value = obj.get("%s_key" % key_color)
            if value is not None:
                return value
    raise DatagenError("Corridor has no door %d with a %s key" % (door, key_color))


def generate_dungeons(config: DungeonsConfig) -> List[Object]:
    return [dungeon_instance(config, index) for index in range(config.n_instances)]


def write_dungeons(path: str, config: DungeonsConfig) -> List[Object]:
    """Generate a Dungeons corpus to JSONL, with a metadata sidecar at <path>.meta.json."""
    docs = generate_dungeons(config)
    write_jsonl(path, docs)  # type: ignore[arg-type]
    with open("%s.meta.json" % path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write(CONVERTER.to_json(DungeonsMetadata(config=config)))
        fp.write("\n")
    return docs


def tabular_instance(config: TabularConfig, index: int) -> Object:
    """One row of the tabular corpus; the label depends on the first two features."""
    rng = _instance_rng(config.seed, index)
    values = [int(rng.integers(config.n_values)) for _ in range(config.n_features)]
    missing = rng.random(config.n_features) < config.missing_rate
    label = int((values[0] + values[1]) % 2 == 0)
    if rng.random() < config.label_noise:
        label = 1 - label
    pairs: List[Tuple[str, Document]] = []
    for feature, value in enumerate(values):
        if feature < 2 or not missing[feature]:
            pairs.append(("f%d" % feature, Str("v%d" % value)))
    pairs.append(("label", Str("yes" if label else "no")))
    return Object(tuple(pairs))


def generate_tabular(config: TabularConfig) -> List[Object]:
    return [tabular_instance(config, index) for index in range(config.n_instances)]


def _parses(text: str, kind: str) -> bool:
    try:
        _convert(text, kind)
        return True
    except (ValueError, DocumentError):
        return False


def _convert(text: str, kind: str) -> Document:
    if kind == "int":
        return Int(int(text))
    if kind == "float":
        value = float(text)
        if not np.isfinite(value):
            raise ValueError("non-finite float")
        return Float(value)
    if kind == "bool":
        lowered = text.strip().lower()
        if lowered not in ("true", "false"):
            raise ValueError("not a boolean")
        return Bool(lowered == "true")
    if kind == "str":
        return Str(text)
    raise DatagenError("Unknown column type %s" % kind)


def _infer(cells: List[str]) -> str:
    for kind in ("int", "float", "bool"):
        if cells and all(_parses(cell, kind) for cell in cells):
            return kind
    return "str"


def csv_to_jsonl(csv_path: str, type_hints: Optional[Dict[str, str]] = None) -> List[Object]:
    """Read a CSV file with a header row into one flat object per row.

    Column types come from type_hints (int, float, bool or str) or are inferred for the
    whole column.  An empty cell leaves its key out of that row's object.
    """
    hints = type_hints or {}
    with open(csv_path, "r", encoding="utf-8", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows:
        raise DatagenError("CSV file has no header row: %s" % csv_path)
    header, body = rows[0], rows[1:]
    for line, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatagenError("Row has %d cells but the header has %d" % (len(row), len(header)), line=line)
    kinds = []
    for column, name in enumerate(header):
        kind = hints.get(name) or _infer([row[column] for row in body if row[column] != ""])
        kinds.append(kind)
    docs = []
    for line, row in enumerate(body, start=2):
        pairs = []
        for name, kind, cell in zip(header, kinds, row):
            if cell == "":
                continue
            try:
                pairs.append((name, _convert(cell, kind)))
            except (ValueError, DocumentError) as e:
                raise DatagenError("Column %s value %r is not a valid %s" % (name, cell, kind), line=line) from e
        docs.append(Object(tuple(pairs)))
    return docs
