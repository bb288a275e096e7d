from __future__ import annotations

import typing
from collections.abc import Mapping, MutableMapping

import marshmallow as ma


class ConfigProxy(MutableMapping):
    """
    A proxy object which layers several configuration sources (typically the
    parsed command line flags over a JSON config file) along with a matching
    schema. Whenever a value is looked up, the sources are consulted in order
    and the first one holding a value other than ``None`` wins, so a flag left
    at its ``None`` default never masks the file.

    Only keys known to the schema are exposed; unrelated flags (the subcommand
    name, verbosity, output paths) never reach `Schema.load`.
    """

    def __init__(
        self,
        *sources: Mapping[str, typing.Any] | None,
        schema: ma.Schema,
    ):
        self.sources: list[Mapping[str, typing.Any]] = [
            source for source in sources if source is not None
        ]
        self.known_keys = self._collect_known_keys(schema)

    def _collect_known_keys(self, schema: ma.Schema) -> set[str]:
        result = set()
        for name, field in schema.fields.items():
            if field.dump_only:
                continue
            result.add(field.data_key if field.data_key is not None else name)
        return result

    def _lookup(self, key: str) -> typing.Any:
        if key not in self.known_keys:
            return ma.missing
        for source in self.sources:
            val = source.get(key)
            if val is not None:
                return val
        return ma.missing

    def __getitem__(self, key: str) -> typing.Any:
        val = self._lookup(key)
        if val is ma.missing:
            raise KeyError(key)
        return val

    def get(self, key: str, default: typing.Any = None) -> typing.Any:
        val = self._lookup(key)
        return default if val is ma.missing else val

    def __str__(self) -> str:
        return str(dict(self))

    def __repr__(self) -> str:
        return f"ConfigProxy(sources={self.sources!r}, known_keys={self.known_keys!r})"

    def __setitem__(self, key: str, value: typing.Any) -> None:
        if not self.sources or not isinstance(self.sources[0], MutableMapping):
            self.sources.insert(0, {})
        typing.cast(MutableMapping, self.sources[0])[key] = value

    def __delitem__(self, key: str) -> None:
        found = False
        for source in self.sources:
            if isinstance(source, MutableMapping) and key in source:
                del source[key]
                found = True
        if not found:
            raise KeyError(key)

    def __iter__(self) -> typing.Iterator[str]:
        seen: set[str] = set()
        for source in self.sources:
            for key in source:
                if key in self.known_keys and key not in seen and self._lookup(key) is not ma.missing:
                    seen.add(key)
                    yield key

    def __contains__(self, key: object) -> bool:
        return isinstance(key, str) and self._lookup(key) is not ma.missing

    def __len__(self) -> int:
        return sum(1 for _ in self)
