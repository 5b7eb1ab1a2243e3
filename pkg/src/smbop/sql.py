"""Restricted SQL dialect: parsing, relational-algebra transpilation and rendering.

Literals are anonymized to the ``value`` token while parsing; column
references are resolved against a :class:`~smbop.schema.Schema` and table
aliases are erased.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

from .ra import AGGREGATES, STAR, VALUE, R, RaTree, infer_type, strip_keep

if TYPE_CHECKING:
    from .schema import Schema


class SqlError(ValueError):
    pass


class SqlSyntaxError(SqlError):
    def __init__(self, position: int, message: str):
        self.position = position
        super().__init__(f"syntax error at position {position}: {message}")


class UnsupportedConstruct(SqlError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unsupported construct: {name}")


class AmbiguousColumn(SqlError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"ambiguous column: {name}")


class UnknownIdentifier(SqlError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown identifier: {name}")


class NotReturnable(SqlError):
    pass


class UnrenderableShape(SqlError):
    pass


# -- AST ---------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnRef:
    table: str
    column: str

    def __str__(self):
        return f"{self.table}.{self.column}"


@dataclass(frozen=True)
class StarRef:
    def __str__(self):
        return "*"


@dataclass(frozen=True)
class ValueRef:
    def __str__(self):
        return "'value'"


@dataclass(frozen=True)
class AggExpr:
    func: str  # sum | max | min | count | avg
    distinct: bool
    arg: Union[ColumnRef, StarRef]


Operand = Union[ColumnRef, StarRef, ValueRef, AggExpr]


@dataclass(frozen=True)
class Comparison:
    op: str  # le ge lt gt eq neq like not_like
    left: Operand
    right: Operand


@dataclass(frozen=True)
class InPredicate:
    column: Operand
    query: "Query"
    negated: bool = False


@dataclass(frozen=True)
class BoolOp:
    op: str  # and | or
    left: "Condition"
    right: "Condition"


Condition = Union[Comparison, InPredicate, BoolOp]


@dataclass(frozen=True)
class Select:
    items: tuple[Operand, ...]
    tables: tuple[str, ...]
    joins: tuple[tuple[ColumnRef, ColumnRef], ...] = ()
    where: Condition | None = None
    distinct: bool = False
    group_by: Operand | None = None
    having: Condition | None = None
    order_by: tuple[Operand, str] | None = None  # (key, "asc" | "dsc")
    limit: bool = False


@dataclass(frozen=True)
class SetQuery:
    op: str  # union | intersect | except
    left: "Query"
    right: "Query"


Query = Union[Select, SetQuery]


# -- tokenizer ---------------------------------------------------------------

KEYWORDS = {
    "select", "distinct", "from", "join", "inner", "on", "where", "and", "or", "not",
    "like", "in", "group", "by", "having", "order", "asc", "desc", "limit", "union",
    "intersect", "except", "as", "count", "sum", "max", "min", "avg",
}
UNSUPPORTED_KEYWORDS = {
    "over": "window function", "partition": "window function", "rank": "window function",
    "row_number": "window function", "dense_rank": "window function",
    "between": "BETWEEN", "left": "outer join", "right": "outer join", "outer": "outer join",
    "full": "outer join", "cross": "cross join", "natural": "natural join", "case": "CASE",
    "exists": "EXISTS", "offset": "OFFSET", "with": "WITH", "all": "ALL", "any": "ANY",
    "is": "IS NULL", "null": "NULL", "cast": "CAST",
}

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<num>\d+(?:\.\d+)?|\.\d+)
      | (?P<str>'(?:[^']|'')*'|"(?:[^"]|"")*")
      | (?P<op><=|>=|!=|<>|==|[=<>(),*.;+\-/])
      | (?P<name>[A-Za-z_][A-Za-z0-9_]*|`[^`]+`)
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | str | op | name | kw | eof
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    toks = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise SqlSyntaxError(pos, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        raw = m.group(kind)
        start = m.start(kind)
        if kind == "name":
            low = raw.strip("`").lower()
            kind = "kw" if low in KEYWORDS else "name"
            raw = low
        toks.append(Token(kind, raw, start))
        pos = m.end()
    if toks and toks[-1].text == ";":
        toks.pop()
    toks.append(Token("eof", "", len(text)))
    return toks


# -- parser ------------------------------------------------------------------

_CMP = {"<=": "le", ">=": "ge", "<": "lt", ">": "gt", "=": "eq", "==": "eq", "!=": "neq", "<>": "neq"}
_AGG_FUNCS = ("count", "sum", "max", "min", "avg")


@dataclass
class _Scope:
    tables: list[str] = field(default_factory=list)
    aliases: dict[str, str] = field(default_factory=dict)


class _Parser:
    def __init__(self, text: str, schema: "Schema"):
        self.toks = tokenize(text)
        self.i = 0
        self.schema = schema

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts: str) -> bool:
        return self.tok.kind in ("kw", "op") and self.tok.text in texts

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(f"expected {text.upper()!r}")
        return self.advance()

    def fail(self, msg: str):
        t = self.tok
        if t.kind == "name" and t.text in UNSUPPORTED_KEYWORDS:
            raise UnsupportedConstruct(UNSUPPORTED_KEYWORDS[t.text])
        got = "end of input" if t.kind == "eof" else repr(t.text)
        raise SqlSyntaxError(t.pos, f"{msg}, got {got}")

    def check_unsupported(self):
        t = self.tok
        if t.kind == "name" and t.text in UNSUPPORTED_KEYWORDS:
            raise UnsupportedConstruct(UNSUPPORTED_KEYWORDS[t.text])

    # grammar
    def parse(self) -> Query:
        q = self.query()
        if self.tok.kind != "eof":
            self.check_unsupported()
            self.fail("unexpected trailing input")
        return q

    def query(self) -> Query:
        left = self.query_operand()
        while self.at("union", "intersect", "except"):
            op = self.advance().text
            self.check_unsupported()
            right = self.query_operand()
            left = SetQuery(op, left, right)
        return left

    def query_operand(self) -> Query:
        if self.at("("):
            self.advance()
            q = self.query()
            self.expect(")")
            return q
        return self.select()

    def select(self) -> Select:
        self.expect("select")
        distinct = False
        if self.at("distinct"):
            self.advance()
            distinct = True
        raw_items = [self.select_item()]
        while self.at(","):
            self.advance()
            raw_items.append(self.select_item())
        self.expect("from")
        scope, joins_raw = self.from_clause()
        resolve = lambda e: self.resolve(e, scope)  # noqa: E731
        items = tuple(resolve(e) for e in raw_items)
        joins = tuple((resolve(a), resolve(b)) for a, b in joins_raw)
        where = group = having = order = None
        limit = False
        if self.at("where"):
            self.advance()
            where = self.condition(scope)
        if self.at("group"):
            self.advance()
            self.expect("by")
            group = resolve(self.operand())
            if self.at(","):
                raise UnsupportedConstruct("multi-column GROUP BY")
        if self.at("having"):
            self.advance()
            having = self.condition(scope)
        if self.at("order"):
            self.advance()
            self.expect("by")
            key = resolve(self.operand())
            direction = "asc"
            if self.at("asc", "desc"):
                direction = "asc" if self.advance().text == "asc" else "dsc"
            if self.at(","):
                raise UnsupportedConstruct("multi-column ORDER BY")
            order = (key, direction)
        if self.at("limit"):
            self.advance()
            if self.tok.kind not in ("num", "str"):
                self.fail("expected LIMIT literal")
            self.advance()
            limit = True
            if self.at(","):
                raise UnsupportedConstruct("LIMIT with offset")
        self.check_unsupported()
        return Select(items, tuple(scope.tables), joins, where, distinct, group, having, order, limit)

    def select_item(self):
        if self.at("*"):
            self.advance()
            return StarRef()
        e = self.operand(allow_literal=False)
        if self.at("as"):
            raise UnsupportedConstruct("select item alias")
        return e

    def from_clause(self):
        scope = _Scope()
        joins = []
        self.table_ref(scope)
        while True:
            if self.at(","):
                self.advance()
                self.table_ref(scope)
            elif self.at("join", "inner"):
                if self.at("inner"):
                    self.advance()
                self.expect("join")
                self.table_ref(scope)
                if self.at("on"):
                    self.advance()
                    joins.append(self.join_condition())
                    while self.at("and") and self._next_is_join_condition():
                        self.advance()
                        joins.append(self.join_condition())
            else:
                self.check_unsupported()
                break
        return scope, joins

    def _next_is_join_condition(self) -> bool:
        # "ON a = b AND c = d": the conjunct continues the join only if it is column = column
        save = self.i
        try:
            self.advance()
            a = self.operand(allow_literal=False)
            ok = self.at("=", "==") and isinstance(a, _RawColumn)
            if ok:
                self.advance()
                b = self.operand(allow_literal=False)
                ok = isinstance(b, _RawColumn)
            return ok
        except SqlError:
            return False
        finally:
            self.i = save

    def join_condition(self):
        a = self.operand(allow_literal=False)
        if not self.at("=", "=="):
            self.fail("expected '=' in join condition")
        self.advance()
        b = self.operand(allow_literal=False)
        if not (isinstance(a, _RawColumn) and isinstance(b, _RawColumn)):
            raise UnsupportedConstruct("non column-equality join condition")
        return a, b

    def table_ref(self, scope: _Scope):
        if self.at("("):
            raise UnsupportedConstruct("subquery in FROM")
        self.check_unsupported()
        if self.tok.kind != "name":
            self.fail("expected table name")
        name = self.advance().text
        if name not in self.schema.table_index:
            raise UnknownIdentifier(name)
        alias = None
        if self.at("as"):
            self.advance()
            if self.tok.kind != "name":
                self.fail("expected alias")
            alias = self.advance().text
        elif self.tok.kind == "name" and self.tok.text not in UNSUPPORTED_KEYWORDS:
            alias = self.advance().text
        scope.tables.append(name)
        scope.aliases[name] = name
        if alias is not None:
            scope.aliases[alias] = name

    # conditions: OR < AND < atom
    def condition(self, scope: _Scope) -> Condition:
        left = self.conjunction(scope)
        while self.at("or"):
            self.advance()
            left = BoolOp("or", left, self.conjunction(scope))
        return left

    def conjunction(self, scope: _Scope) -> Condition:
        left = self.predicate(scope)
        while self.at("and"):
            self.advance()
            left = BoolOp("and", left, self.predicate(scope))
        return left

    def predicate(self, scope: _Scope) -> Condition:
        if self.at("not"):
            raise UnsupportedConstruct("NOT over a condition")
        if self.at("(") and not self.peek().text == "select":
            self.advance()
            c = self.condition(scope)
            self.expect(")")
            return c
        left = self.resolve(self.operand(), scope)
        negated = False
        if self.at("not"):
            self.advance()
            negated = True
            if not self.at("like", "in"):
                self.fail("expected LIKE or IN after NOT")
        if self.at("like"):
            self.advance()
            right = self.resolve(self.operand(), scope)
            return Comparison("not_like" if negated else "like", left, right)
        if self.at("in"):
            self.advance()
            self.expect("(")
            if not self.at("select"):
                raise UnsupportedConstruct("IN with a literal list")
            sub = _Parser.__new__(_Parser)
            sub.toks, sub.i, sub.schema = self.toks, self.i, self.schema
            q = sub.query()
            self.i = sub.i
            self.expect(")")
            return InPredicate(left, q, negated)
        if self.tok.kind == "op" and self.tok.text in _CMP:
            op = _CMP[self.advance().text]
            if self.at("("):
                raise UnsupportedConstruct("scalar subquery")
            right = self.resolve(self.operand(), scope)
            return Comparison(op, left, right)
        self.check_unsupported()
        self.fail("expected comparison operator")

    def operand(self, allow_literal: bool = True):
        t = self.tok
        if t.kind in ("num", "str"):
            if not allow_literal:
                self.fail("unexpected literal")
            self.advance()
            return ValueRef()
        if t.kind == "op" and t.text == "-" and self.peek().kind == "num":
            self.advance()
            self.advance()
            return ValueRef()
        if t.kind == "kw" and t.text in _AGG_FUNCS and self.peek().text == "(":
            func = self.advance().text
            self.expect("(")
            distinct = False
            if self.at("distinct"):
                self.advance()
                distinct = True
            if self.at("*"):
                self.advance()
                arg = StarRef()
            else:
                arg = self.operand(allow_literal=False)
                if not isinstance(arg, _RawColumn):
                    raise UnsupportedConstruct("aggregate over an expression")
            self.expect(")")
            if self.tok.kind == "name" and self.tok.text == "over":
                raise UnsupportedConstruct("window function")
            return AggExpr(func, distinct, arg)
        if t.kind == "name":
            if self.peek().text == "(":
                if t.text in UNSUPPORTED_KEYWORDS:
                    raise UnsupportedConstruct(UNSUPPORTED_KEYWORDS[t.text])
                raise UnsupportedConstruct(f"function {t.text}()")
            self.check_unsupported()
            self.advance()
            if self.at("."):
                self.advance()
                if self.at("*"):
                    raise UnsupportedConstruct("qualified star")
                if self.tok.kind not in ("name", "kw"):
                    self.fail("expected column name")
                return _RawColumn(t.text, self.advance().text)
            return _RawColumn(None, t.text)
        if t.kind == "kw" and t.text not in _AGG_FUNCS:
            self.fail("expected operand")
        if t.kind == "op" and t.text == "(":
            raise UnsupportedConstruct("parenthesized expression")
        self.fail("expected operand")

    # resolution
    def resolve(self, e, scope: _Scope):
        if isinstance(e, _RawColumn):
            return self.resolve_column(e, scope)
        if isinstance(e, AggExpr) and isinstance(e.arg, _RawColumn):
            return AggExpr(e.func, e.distinct, self.resolve_column(e.arg, scope))
        return e

    def resolve_column(self, c: "_RawColumn", scope: _Scope) -> ColumnRef:
        if c.qualifier is not None:
            table = scope.aliases.get(c.qualifier)
            if table is None:
                raise UnknownIdentifier(c.qualifier)
            if c.name not in self.schema.columns_of(table):
                raise UnknownIdentifier(f"{table}.{c.name}")
            return ColumnRef(table, c.name)
        owners = [t for t in dict.fromkeys(scope.tables) if c.name in self.schema.columns_of(t)]
        if not owners:
            raise UnknownIdentifier(c.name)
        if len(owners) > 1:
            raise AmbiguousColumn(c.name)
        return ColumnRef(owners[0], c.name)


@dataclass(frozen=True)
class _RawColumn:
    qualifier: str | None
    name: str


def parse_sql(text: str, schema: "Schema") -> Query:
    """Parse, resolve and anonymize one query of the supported dialect."""
    return _Parser(text, schema).parse()


# -- SQL -> RA ---------------------------------------------------------------

def _fold(op: str, trees: list[RaTree]) -> RaTree:
    out = trees[0]
    for t in trees[1:]:
        out = RaTree(op, (out, t))
    return out


def _operand_tree(e: Operand) -> RaTree:
    if isinstance(e, ColumnRef):
        return RaTree.column(e.table, e.column)
    if isinstance(e, StarRef):
        return STAR
    if isinstance(e, ValueRef):
        return VALUE
    if isinstance(e, AggExpr):
        arg = _operand_tree(e.arg)
        if e.distinct:
            arg = RaTree("distinct", (arg,))
        return RaTree("agg_" + e.func, (arg,))
    raise TypeError(f"not an operand: {e!r}")


def _condition_tree(c: Condition) -> RaTree:
    if isinstance(c, BoolOp):
        return RaTree(c.op, (_condition_tree(c.left), _condition_tree(c.right)))
    if isinstance(c, InPredicate):
        return RaTree("not_in" if c.negated else "in", (_operand_tree(c.column), _query_tree(c.query)))
    return RaTree(c.op, (_operand_tree(c.left), _operand_tree(c.right)))


def _query_tree(q: Query) -> RaTree:
    if isinstance(q, SetQuery):
        return RaTree(q.op, (_query_tree(q.left), _query_tree(q.right)))
    rel = _fold("product", [RaTree.table(t) for t in q.tables])
    preds = [RaTree("eq", (_operand_tree(a), _operand_tree(b))) for a, b in q.joins]
    pred = _fold("and", preds) if preds else None
    if q.where is not None:
        w = _condition_tree(q.where)
        pred = w if pred is None else RaTree("and", (pred, w))
    if pred is not None:
        rel = RaTree("select", (pred, rel))
    if q.group_by is not None:
        rel = RaTree("groupby", (_operand_tree(q.group_by), rel))
    if q.having is not None:
        rel = RaTree("select", (_condition_tree(q.having), rel))
    items = [_operand_tree(e) for e in q.items]
    if q.distinct:
        items = [RaTree("distinct", (t,)) for t in items]
    rel = RaTree("project", (_fold("cunion", items), rel))
    if q.order_by is not None:
        key, direction = q.order_by
        rel = RaTree("orderby_" + direction, (_operand_tree(key), rel))
    if q.limit:
        rel = RaTree("limit", (VALUE, rel))
    return rel


def sql_to_ra(q: Query) -> RaTree:
    """Transpile a resolved query to an (unbalanced) relational-algebra tree."""
    tree = _query_tree(q)
    infer_type(tree)
    return tree


# -- RA -> SQL ---------------------------------------------------------------

_CMP_TEXT = {"le": "<=", "ge": ">=", "lt": "<", "gt": ">", "eq": "=", "neq": "!=", "like": "LIKE", "not_like": "NOT LIKE"}


def ra_to_sql(tree: RaTree) -> str:
    """Render a (possibly balanced) Relation-rooted tree as SQL text."""
    tree = strip_keep(tree)
    try:
        root = infer_type(tree)
    except TypeError as exc:
        raise UnrenderableShape(f"ill-typed tree: {exc}") from None
    if root is not R:
        raise NotReturnable(f"root type is {root.value}, not R")
    return _render_query(tree)


def _flatten(tree: RaTree, op: str) -> list[RaTree]:
    if tree.label == op and not tree.is_leaf:
        return _flatten(tree.children[0], op) + _flatten(tree.children[1], op)
    return [tree]


def _left_chain(tree: RaTree, op: str) -> list[RaTree]:
    """Items of a left-leaning ``op`` chain; right children must not be ``op``."""
    items = []
    while tree.label == op and not tree.is_leaf:
        if tree.children[1].label == op:
            raise UnrenderableShape(f"right-nested {op} chain")
        items.append(tree.children[1])
        tree = tree.children[0]
    items.append(tree)
    return items[::-1]


def _render_query(t: RaTree) -> str:
    if t.label in ("union", "intersect", "except"):
        left = _render_query(t.children[0])
        right = _render_query(t.children[1])
        if t.children[1].label in ("union", "intersect", "except"):
            right = f"({right})"
        if t.children[0].label in ("union", "intersect", "except") and t.children[0].label != t.label:
            left = f"({left})"
        return f"{left} {t.label.upper()} {right}"
    limit = False
    if t.label == "limit":
        if t.children[0].kind != "value":
            raise UnrenderableShape("LIMIT takes the value token")
        limit = True
        t = t.children[1]
    order = None
    if t.label in ("orderby_asc", "orderby_dsc"):
        order = (_render_operand(t.children[0]), "ASC" if t.label == "orderby_asc" else "DESC")
        t = t.children[1]
    if t.label != "project":
        raise UnrenderableShape(f"expected projection, got {t.label}")
    items_tree, rel = t.children
    items = _left_chain(items_tree, "cunion")
    distinct = all(i.label == "distinct" for i in items)
    if distinct:
        items = [i.children[0] for i in items]
    select_list = ", ".join(_render_operand(i, select_item=True) for i in items)
    having = group = None
    if rel.label == "select" and rel.children[1].label == "groupby":
        having = _render_condition(rel.children[0])
        rel = rel.children[1]
    if rel.label == "groupby":
        group = _render_operand(rel.children[0])
        rel = rel.children[1]
    pred = None
    if rel.label == "select":
        pred, rel = rel.children
    tables = _flatten(rel, "product")
    for tab in tables:
        if tab.kind != "table":
            raise UnrenderableShape(f"FROM item must be a table, got {tab.label}")
    from_sql, where = _render_from([x.label for x in tables], pred)
    parts = ["SELECT", "DISTINCT " + select_list if distinct else select_list, "FROM", from_sql]
    if where is not None:
        parts += ["WHERE", where]
    if group is not None:
        parts += ["GROUP BY", group]
    if having is not None:
        parts += ["HAVING", having]
    if order is not None:
        parts += ["ORDER BY", order[0], order[1]]
    if limit:
        parts += ["LIMIT", "'value'"]
    return " ".join(parts)


def _is_column_equality(t: RaTree) -> bool:
    return t.label == "eq" and not t.is_leaf and all(c.kind == "column" for c in t.children)


def _join_chain(t: RaTree) -> list[RaTree] | None:
    """Conditions of ``t`` if it is a left-folded AND chain of column equalities."""
    try:
        conds = _left_chain(t, "and")
    except UnrenderableShape:
        return None
    return conds if all(_is_column_equality(c) for c in conds) else None


def _render_from(tables: list[str], pred: RaTree | None) -> tuple[str, str | None]:
    if len(tables) == 1 or pred is None:
        return " JOIN ".join(tables), (None if pred is None else _render_condition(pred))
    joins, where = _join_chain(pred), None
    if joins is None and pred.label == "and":
        joins, where = _join_chain(pred.children[0]), pred.children[1]
    if joins is None:
        return " JOIN ".join(tables), _render_condition(pred)
    on = [_render_condition(c) for c in joins]
    parts = [tables[0]]
    if len(on) == len(tables) - 1:
        for tab, cond in zip(tables[1:], on):
            parts.append(f"JOIN {tab} ON {cond}")
    else:
        parts += [f"JOIN {tab}" for tab in tables[1:]]
        parts[-1] += " ON " + " AND ".join(on)
    return " ".join(parts), (None if where is None else _render_condition(where))


def _render_condition(t: RaTree, parent: str | None = None, side: int = 0) -> str:
    if t.label in ("and", "or") and not t.is_leaf:
        text = f"{_render_condition(t.children[0], t.label, 0)} {t.label.upper()} {_render_condition(t.children[1], t.label, 1)}"
        # AND/OR parse left-associatively and AND binds tighter than OR
        needs_parens = parent is not None and not (parent == t.label and side == 0) and not (parent == "or" and t.label == "and")
        return f"({text})" if needs_parens else text
    if t.label in ("in", "not_in"):
        kw = "IN" if t.label == "in" else "NOT IN"
        return f"{_render_operand(t.children[0])} {kw} ({_render_query(t.children[1])})"
    if t.label in _CMP_TEXT:
        return f"{_render_operand(t.children[0])} {_CMP_TEXT[t.label]} {_render_operand(t.children[1])}"
    raise UnrenderableShape(f"not a condition: {t.label}")


def _render_operand(t: RaTree, select_item: bool = False) -> str:
    if t.kind == "column":
        return t.label
    if t.kind == "star":
        return "*"
    if t.kind == "value":
        if select_item:
            raise UnrenderableShape("value token in select list")
        return "'value'"
    if t.label in AGGREGATES:
        arg = t.children[0]
        distinct = ""
        if arg.label == "distinct" and not arg.is_leaf:
            distinct, arg = "DISTINCT ", arg.children[0]
        if arg.kind not in ("column", "star"):
            raise UnrenderableShape("aggregate argument must be a column or *")
        return f"{t.label[4:].upper()}({distinct}{_render_operand(arg)})"
    raise UnrenderableShape(f"not an operand: {t.label}")


def transpile(text: str, schema: "Schema") -> RaTree:
    return sql_to_ra(parse_sql(text, schema))
