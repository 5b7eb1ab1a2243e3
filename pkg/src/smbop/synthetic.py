"""Seeded generator of random schemas, SQL-expressible query trees and
templated utterances."""
from __future__ import annotations

import random
from dataclasses import dataclass

from .ra import STAR, VALUE, RaTree, balance, level_slices
from .schema import Column, Example, Schema, name_words
from .sql import (
    AggExpr,
    BoolOp,
    ColumnRef,
    Comparison,
    InPredicate,
    Select,
    SetQuery,
    StarRef,
    ValueRef,
    ra_to_sql,
    sql_to_ra,
)

TABLE_WORDS = (
    "actor", "airport", "album", "artist", "book", "building", "car", "city", "club",
    "course", "customer", "department", "dorm", "employee", "event", "flight", "game",
    "hospital", "hotel", "movie", "museum", "pet", "player", "product", "race",
    "school", "ship", "singer", "station", "student", "team", "teacher", "track", "user",
)
COLUMN_WORDS = (
    "name", "age", "city", "country", "date", "price", "rating", "title", "year", "salary",
    "capacity", "color", "gender", "height", "weight", "score", "budget", "status",
    "level", "type", "duration", "location", "phone", "email", "size", "speed",
)

_CMP_WORDS = {
    "le": "at most", "ge": "at least", "lt": "less than", "gt": "greater than",
    "eq": "equals", "neq": "differs from", "like": "like", "not_like": "not like",
}


@dataclass(frozen=True)
class SizeParams:
    max_height: int = 4
    min_height: int = 1
    max_attempts: int = 400
    # reject trees with more distinct gold subtrees than this at some level
    # (value and * excluded); set to the beam size K to keep every example decodable
    max_width: int | None = None


def random_schema(rng: random.Random) -> Schema:
    n_tables = rng.randint(2, 5)
    tables = rng.sample(TABLE_WORDS, n_tables)
    columns: list[Column] = []
    pks: list[int] = []
    fks: list[tuple[int, int]] = []
    id_col: dict[int, int] = {}
    forced_child = rng.randrange(1, n_tables)
    for t, table in enumerate(tables):
        n_cols = rng.randint(2, 6)
        id_col[t] = len(columns)
        pks.append(len(columns))
        columns.append(Column("id", t, "number"))
        names = ["id"]
        if t > 0 and (t == forced_child or rng.random() < 0.5):
            parent = rng.randrange(t)
            fk_name = f"{tables[parent]}_id"
            fks.append((len(columns), id_col[parent]))
            columns.append(Column(fk_name, t, "number"))
            names.append(fk_name)
        pool = [w for w in COLUMN_WORDS if w not in names]
        for w in rng.sample(pool, max(0, n_cols - len(names))):
            columns.append(Column(w, t, rng.choice(("text", "number"))))
    return Schema(tuple(tables), tuple(columns), frozenset(pks), frozenset(fks))


class _QueryGen:
    """Random SQL ASTs over one schema; ``level`` scales how many clauses appear."""

    def __init__(self, rng: random.Random, schema: Schema, level: float):
        self.rng = rng
        self.schema = schema
        self.level = level
        self.cols_by_table = {t: [c.name for c in schema.columns if c.table == i] for i, t in enumerate(schema.tables)}

    def p(self, base: float) -> bool:
        return self.rng.random() < min(0.95, base * self.level)

    def column(self, tables) -> ColumnRef:
        t = self.rng.choice(tables)
        return ColumnRef(t, self.rng.choice(self.cols_by_table[t]))

    def from_tables(self):
        rng, schema = self.rng, self.schema
        n = 1
        while n < min(3, len(schema.tables)) and self.p(0.25):
            n += 1
        chosen = [rng.choice(schema.tables)]
        joins = []
        col_table = [schema.tables[c.table] for c in schema.columns]
        while len(chosen) < n:
            links = []
            for a, b in sorted(schema.foreign_keys):
                ta, tb = col_table[a], col_table[b]
                ca = ColumnRef(ta, schema.columns[a].name)
                cb = ColumnRef(tb, schema.columns[b].name)
                if ta in chosen and tb not in chosen:
                    links.append((tb, (ca, cb)))
                elif tb in chosen and ta not in chosen:
                    links.append((ta, (cb, ca)))
            if links:
                table, cond = rng.choice(links)
            else:
                table = rng.choice([t for t in schema.tables if t not in chosen])
                cond = (self.column(chosen), self.column([table]))
            chosen.append(table)
            joins.append(cond)
        return chosen, joins

    def predicate(self, tables, depth: int):
        rng = self.rng
        r = rng.random()
        col = self.column(tables)
        if depth > 0 and r < 0.12 * self.level:
            sub = self.select(depth - 1, items_max=1)
            return InPredicate(col, sub, negated=rng.random() < 0.4)
        if r < 0.25:
            return Comparison(rng.choice(("like", "not_like")), col, ValueRef())
        if r < 0.35 and len(tables) > 1:
            return Comparison(rng.choice(("eq", "neq", "lt", "gt")), col, self.column(tables))
        return Comparison(rng.choice(("le", "ge", "lt", "gt", "eq", "neq")), col, ValueRef())

    def condition(self, tables, depth: int, n_max: int):
        preds = [self.predicate(tables, depth)]
        while len(preds) < n_max and self.p(0.35):
            preds.append(self.predicate(tables, depth))
        cond = preds[0]
        for p in preds[1:]:
            op = "and" if self.rng.random() < 0.7 else "or"
            if self.rng.random() < 0.25 and isinstance(cond, BoolOp):
                cond = BoolOp(op, cond.left, BoolOp(cond.op, cond.right, p))
            else:
                cond = BoolOp(op, cond, p)
        return cond

    def agg(self, tables) -> AggExpr:
        rng = self.rng
        if rng.random() < 0.3:
            return AggExpr("count", False, StarRef())
        func = rng.choice(("count", "sum", "max", "min", "avg"))
        return AggExpr(func, func == "count" and rng.random() < 0.3, self.column(tables))

    def select(self, depth: int, items_max: int = 3) -> Select:
        rng = self.rng
        tables, joins = self.from_tables()
        where = self.condition(tables, depth, 3) if self.p(0.45) else None
        group = having = None
        if self.p(0.15):
            group = self.column(tables)
            if rng.random() < 0.5:
                having = Comparison(rng.choice(("gt", "ge", "lt", "eq")), self.agg(tables), ValueRef())
        items = []
        n_items = 1
        while n_items < items_max and self.p(0.3):
            n_items += 1
        for _ in range(n_items):
            if group is not None and not items:
                items.append(group)
            elif rng.random() < 0.3:
                items.append(self.agg(tables))
            elif rng.random() < 0.05:
                items.append(StarRef())
            else:
                items.append(self.column(tables))
        distinct = not any(isinstance(i, (AggExpr, StarRef)) for i in items) and self.p(0.05)
        order = None
        if self.p(0.2):
            key = self.agg(tables) if rng.random() < 0.3 else self.column(tables)
            order = (key, rng.choice(("asc", "dsc")))
        limit = self.p(0.5) if order is not None else self.p(0.03)
        return Select(tuple(items), tuple(tables), tuple(joins), where, distinct, group, having, order, limit)

    def query(self, depth: int = 1):
        if depth > 0 and self.p(0.06):
            op = self.rng.choice(("union", "intersect", "except"))
            return SetQuery(op, self.select(depth - 1), self.select(depth - 1))
        return self.select(depth)


def random_tree(rng: random.Random, schema: Schema, height: int, max_attempts: int = 400) -> RaTree | None:
    """A random returnable tree of exactly ``height``, or None if sampling fails."""
    for attempt in range(max_attempts):
        level = 0.3 + 0.35 * height + rng.random() * 0.5
        q = _QueryGen(rng, schema, level).query(depth=1 if height >= 4 else 0)
        tree = sql_to_ra(q)
        if tree.height == height:
            return tree
    return None


def verbalize(tree: RaTree) -> str:
    """Templated English-like rendering of a tree."""
    if tree.kind == "column":
        table, col = tree.label.split(".", 1)
        return " ".join(name_words(table) + name_words(col))
    if tree.kind == "table":
        return " ".join(name_words(tree.label))
    if tree.kind == "value":
        return "value"
    if tree.kind == "star":
        return "all"
    v = [verbalize(c) for c in tree.children]
    name = tree.label
    if name == "keep":
        return v[0]
    if name == "distinct":
        return f"distinct {v[0]}"
    if name.startswith("agg_"):
        return f"{name[4:]} of {v[0]}"
    if name == "project":
        return f"show {v[0]} from {v[1]}"
    if name == "select":
        return f"{v[1]} where {v[0]}"
    if name == "product":
        return f"{v[0]} joined with {v[1]}"
    if name == "cunion":
        return f"{v[0]} and {v[1]}"
    if name in ("and", "or"):
        return f"{v[0]} {name} {v[1]}"
    if name in _CMP_WORDS:
        return f"{v[0]} {_CMP_WORDS[name]} {v[1]}"
    if name in ("in", "not_in"):
        return f"{v[0]} {'in' if name == 'in' else 'not in'} {v[1]}"
    if name.startswith("orderby_"):
        return f"{v[1]} sorted by {v[0]} {'ascending' if name.endswith('asc') else 'descending'}"
    if name == "groupby":
        return f"{v[1]} grouped by {v[0]}"
    if name == "limit":
        return f"{v[1]} limited to {v[0]}"
    return f"{v[0]} {name} {v[1]}"


def level_width(tree: RaTree) -> int:
    """Most distinct gold subtrees at one level of the balanced tree, pinned leaves excluded."""
    levels = level_slices(balance(tree))
    return max(sum(1 for g in lvl.values() if g.label not in (VALUE.label, STAR.label)) for lvl in levels)


def gen_synthetic(seed: int, n: int, size_params: SizeParams | None = None) -> list[Example]:
    """``n`` random examples, deterministic in ``seed``.

    Heights cycle through ``[min_height, max_height]`` so every height is
    represented; each example gets its own random schema.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sp = size_params or SizeParams()
    rng = random.Random(seed)
    heights = list(range(sp.min_height, sp.max_height + 1))
    out: list[Example] = []
    while len(out) < n:
        target = heights[len(out) % len(heights)] if rng.random() < 0.5 else rng.choice(heights)
        schema = random_schema(rng)
        tree = random_tree(rng, schema, target, sp.max_attempts)
        if tree is None or (sp.max_width is not None and level_width(tree) > sp.max_width):
            continue
        sql = ra_to_sql(tree)
        ex = Example.from_sql(verbalize(tree).split(), schema, sql)
        if ex.gold_tree != tree:
            raise AssertionError(f"generated tree does not survive SQL rendering: {sql}")
        out.append(ex)
    return out
