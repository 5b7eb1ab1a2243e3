"""Schemas, examples, dataset IO and encoder relation tags."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .ra import RaTree, balance, infer_type, R
from .sql import SqlError, parse_sql, sql_to_ra


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, record: int, reason: str):
        self.record = record
        super().__init__(f"record {record}: {reason}")


class ValidationError(DatasetError):
    def __init__(self, record: int, reason: str):
        self.record = record
        self.reason = reason
        super().__init__(f"record {record}: {reason}")


@dataclass(frozen=True)
class Column:
    name: str
    table: int
    type: str = "text"


@dataclass(frozen=True, eq=False)
class Schema:
    tables: tuple[str, ...]
    columns: tuple[Column, ...]
    primary_keys: frozenset[int] = frozenset()
    foreign_keys: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(t.lower() for t in self.tables))
        object.__setattr__(self, "columns", tuple(Column(c.name.lower(), c.table, c.type) for c in self.columns))
        object.__setattr__(self, "primary_keys", frozenset(self.primary_keys))
        object.__setattr__(self, "foreign_keys", frozenset(tuple(p) for p in self.foreign_keys))
        if len(set(self.tables)) != len(self.tables):
            raise ValueError("duplicate table names")
        n = len(self.columns)
        for c in self.columns:
            if not 0 <= c.table < len(self.tables):
                raise ValueError(f"column {c.name!r} has invalid table index {c.table}")
        seen = set()
        for c in self.columns:
            if (c.table, c.name) in seen:
                raise ValueError(f"duplicate column {self.tables[c.table]}.{c.name}")
            seen.add((c.table, c.name))
        for k in self.primary_keys:
            if not 0 <= k < n:
                raise ValueError(f"primary key index {k} out of range")
        for a, b in self.foreign_keys:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"foreign key ({a}, {b}) out of range")

    def __eq__(self, other):
        return isinstance(other, Schema) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))

    @cached_property
    def table_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tables)}

    @cached_property
    def _columns_by_table(self) -> dict[str, frozenset[str]]:
        out: dict[str, set[str]] = {t: set() for t in self.tables}
        for c in self.columns:
            out[self.tables[c.table]].add(c.name)
        return {k: frozenset(v) for k, v in out.items()}

    def columns_of(self, table: str) -> frozenset[str]:
        return self._columns_by_table.get(table, frozenset())

    @cached_property
    def constants(self) -> tuple[RaTree, ...]:
        """DB constants: tables first, then columns, in file order."""
        return tuple(RaTree.table(t) for t in self.tables) + tuple(
            RaTree.column(self.tables[c.table], c.name) for c in self.columns
        )

    @cached_property
    def constant_index(self) -> dict[str, int]:
        return {c.label: i for i, c in enumerate(self.constants)}

    def to_json(self) -> dict[str, Any]:
        return {
            "tables": list(self.tables),
            "columns": [[c.table, c.name, c.type] for c in self.columns],
            "primary_keys": sorted(self.primary_keys),
            "foreign_keys": sorted([list(p) for p in self.foreign_keys]),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Schema":
        cols = tuple(Column(str(name), int(t), str(typ)) for t, name, typ in obj["columns"])
        return cls(
            tuple(obj["tables"]),
            cols,
            frozenset(int(k) for k in obj.get("primary_keys", [])),
            frozenset((int(a), int(b)) for a, b in obj.get("foreign_keys", [])),
        )


_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize_utterance(text: str) -> list[str]:
    """Lowercase split on whitespace and punctuation (underscores included)."""
    return _WORD_RE.findall(text.lower())


def name_words(name: str) -> list[str]:
    return _WORD_RE.findall(name.lower()) or [name.lower()]


@dataclass(frozen=True, eq=False)
class Example:
    utterance: tuple[str, ...]
    schema: Schema
    gold_sql: str
    gold_tree: RaTree
    gold_balanced: RaTree = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "utterance", tuple(self.utterance))
        object.__setattr__(self, "gold_balanced", balance(self.gold_tree))

    @classmethod
    def from_sql(cls, utterance: str | Iterable[str], schema: Schema, sql: str) -> "Example":
        tokens = tokenize_utterance(utterance) if isinstance(utterance, str) else list(utterance)
        return cls(tuple(tokens), schema, sql, sql_to_ra(parse_sql(sql, schema)))

    def to_json(self) -> dict[str, Any]:
        return {"utterance": " ".join(self.utterance), "sql": self.gold_sql, "schema": self.schema.to_json()}


def example_from_record(obj: Any, index: int) -> Example:
    if not isinstance(obj, dict):
        raise ValidationError(index, "record is not a JSON object")
    for key in ("utterance", "sql", "schema"):
        if key not in obj:
            raise ValidationError(index, f"missing field {key!r}")
    try:
        schema = Schema.from_json(obj["schema"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(index, f"bad schema: {exc}") from None
    try:
        ex = Example.from_sql(obj["utterance"], schema, obj["sql"])
    except SqlError as exc:
        raise ValidationError(index, f"bad SQL: {exc}") from None
    if infer_type(ex.gold_tree) is not R:
        raise ValidationError(index, "gold tree is not Relation-rooted")
    return ex


def load_dataset(path: str | Path) -> list[Example]:
    """Read a JSON-lines dataset, validating every record eagerly."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(index, str(exc)) from None
            out.append(example_from_record(obj, index))
    return out


def save_dataset(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


# -- relations -------------------------------------------------------------

class RelationTag(enum.IntEnum):
    COLUMN_OF_TABLE = 0
    TABLE_OF_COLUMN = 1
    SAME_TABLE_COLUMNS = 2
    FOREIGN_KEY = 3
    PRIMARY_KEY_OF = 4
    UTTERANCE_EXACT_MATCH = 5
    UTTERANCE_PARTIAL_MATCH = 6
    SELF = 7
    DEFAULT = 8


NUM_RELATIONS = len(RelationTag)


def _match(token: str, name: str) -> RelationTag | None:
    parts = name_words(name)
    if token in parts or token == name:
        return RelationTag.UTTERANCE_EXACT_MATCH
    for part in parts:
        common = 0
        for a, b in zip(token, part):
            if a != b:
                break
            common += 1
        if common >= 4:
            return RelationTag.UTTERANCE_PARTIAL_MATCH
    if token in name:
        return RelationTag.UTTERANCE_PARTIAL_MATCH
    return None


def compute_relations(utterance: Iterable[str], schema: Schema) -> np.ndarray:
    """Relation tag for every ordered pair over ``utterance + constants``.

    Returns an int matrix of shape ``(n, n)``; tags are :class:`RelationTag`
    values, first match in declaration order wins, the diagonal is SELF.
    """
    tokens = [t.lower() for t in utterance]
    nt, ntab = len(tokens), len(schema.tables)
    n = nt + ntab + len(schema.columns)
    rel = np.full((n, n), int(RelationTag.DEFAULT), dtype=np.int64)

    col_table = [c.table for c in schema.columns]
    fk_cols = set(schema.foreign_keys)
    fk_tables = {(col_table[a], col_table[b]) for a, b in fk_cols}
    names = list(schema.tables) + [c.name for c in schema.columns]

    def kind(i):
        if i < nt:
            return "tok", i
        if i < nt + ntab:
            return "tab", i - nt
        return "col", i - nt - ntab

    for i in range(n):
        ki, ii = kind(i)
        for j in range(n):
            if i == j:
                rel[i, j] = RelationTag.SELF
                continue
            kj, jj = kind(j)
            tag = None
            if ki == "col" and kj == "tab" and col_table[ii] == jj:
                tag = RelationTag.COLUMN_OF_TABLE
            elif ki == "tab" and kj == "col" and col_table[jj] == ii:
                tag = RelationTag.TABLE_OF_COLUMN
            elif ki == "col" and kj == "col" and col_table[ii] == col_table[jj]:
                tag = RelationTag.SAME_TABLE_COLUMNS
            elif (ki, kj) == ("col", "col") and (ii, jj) in fk_cols:
                tag = RelationTag.FOREIGN_KEY
            elif (ki, kj) == ("tab", "tab") and (ii, jj) in fk_tables:
                tag = RelationTag.FOREIGN_KEY
            elif (ki, kj) == ("col", "col") and (jj, ii) in fk_cols:
                tag = RelationTag.PRIMARY_KEY_OF
            elif (ki, kj) == ("tab", "tab") and (jj, ii) in fk_tables:
                tag = RelationTag.PRIMARY_KEY_OF
            elif ki == "tok" and kj != "tok":
                tag = _match(tokens[ii], names[j - nt])
            elif kj == "tok" and ki != "tok":
                tag = _match(tokens[jj], names[i - nt])
            if tag is not None:
                rel[i, j] = tag
    return rel
