# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Convert attrs classes to and from YAML or JSON text.

Attribute names are snake_case in Python and camelCase on disk, the same convention
used for config files, checkpoint manifests, dataset metadata and reports.
"""
import json
from typing import Any, Callable, Type, TypeVar

import attrs
import yaml
from cattrs import Converter
from cattrs.gen import make_dict_structure_fn, make_dict_unstructure_fn, override

T = TypeVar("T")


def camel_case(name: str) -> str:
    """Convert a snake_case attribute name to camelCase."""
    head, *tail = name.split("_")
    return head + "".join(part[:1].upper() + part[1:] for part in tail)


def _plain(value: Any) -> Any:
    """Turn tuples into lists, recursively, so the YAML safe dumper accepts the value."""
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


class StandardConverter(Converter):
    """A cattrs converter that maps attribute names to camelCase and rejects unknown keys."""

    def __init__(self) -> None:
        super().__init__()
        self.register_structure_hook_factory(attrs.has, self._structure_factory)
        self.register_unstructure_hook_factory(attrs.has, self._unstructure_factory)

    def _structure_factory(self, cls: Type[Any]) -> Callable[[Any, Any], Any]:
        overrides = {a.name: override(rename=camel_case(a.name)) for a in attrs.fields(cls) if a.init}
        return make_dict_structure_fn(cls, self, _cattrs_forbid_extra_keys=True, **overrides)  # type: ignore[no-any-return]

    def _unstructure_factory(self, cls: Type[Any]) -> Callable[[Any], Any]:
        overrides = {a.name: override(rename=camel_case(a.name)) if a.init else override(omit=True) for a in attrs.fields(cls)}
        return make_dict_unstructure_fn(cls, self, **overrides)  # type: ignore[no-any-return]

    def from_yaml(self, data: str, cls: Type[T]) -> T:
        """Structure YAML text into an instance of cls."""
        return self.structure(yaml.safe_load(data) or {}, cls)

    def to_yaml(self, obj: Any) -> str:
        """Unstructure an object into YAML text, preserving attribute order."""
        return yaml.safe_dump(_plain(self.unstructure(obj)), sort_keys=False, allow_unicode=True)

    def from_json(self, data: str, cls: Type[T]) -> T:
        """Structure JSON text into an instance of cls."""
        return self.structure(json.loads(data), cls)

    def to_json(self, obj: Any) -> str:
        """Unstructure an object into indented JSON text."""
        return json.dumps(self.unstructure(obj), indent=2, ensure_ascii=False)


CONVERTER = StandardConverter()
