"""Typed relational-algebra trees: grammar, type inference, balancing,
canonical forms and gold level slices.

Trees are immutable. Leaves are DB constants (tables, ``table.column``
columns), the anonymized ``value`` token or ``*``; inner nodes apply one
of the grammar operations below.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence


class SemanticType(enum.Enum):
    RELATION = "R"
    PREDICATE = "P"
    CONSTANT = "C"
    CONSTANT_SET = "C'"
    ANY = "Any"

    def accepts(self, actual: "SemanticType") -> bool:
        """True when a value of type ``actual`` may fill a slot of this type.

        A single constant is a one-element constant set, so C fills C'.
        """
        if self is SemanticType.ANY or actual is SemanticType.ANY:
            return True
        if self is SemanticType.CONSTANT_SET and actual is SemanticType.CONSTANT:
            return True
        return self is actual


R = SemanticType.RELATION
P = SemanticType.PREDICATE
C = SemanticType.CONSTANT
CS = SemanticType.CONSTANT_SET
ANY = SemanticType.ANY


@dataclass(frozen=True)
class RaOp:
    name: str
    symbol: str
    inputs: tuple[SemanticType, ...]
    output: SemanticType
    commutative: bool = False

    @property
    def arity(self) -> int:
        return len(self.inputs)

    def result_type(self, child_types: Sequence[SemanticType]) -> SemanticType | None:
        """Output type for the given child types, or None if the application is ill-typed."""
        if len(child_types) != self.arity:
            return None
        for slot, actual in zip(self.inputs, child_types):
            if not slot.accepts(actual):
                return None
        if self.name == "keep":
            return child_types[0]
        return self.output


UNARY_OPS: tuple[RaOp, ...] = (
    RaOp("keep", "κ", (ANY,), ANY),
    RaOp("distinct", "δ", (C,), C),
    RaOp("agg_sum", "G_sum", (C,), C),
    RaOp("agg_max", "G_max", (C,), C),
    RaOp("agg_min", "G_min", (C,), C),
    RaOp("agg_count", "G_count", (C,), C),
    RaOp("agg_avg", "G_avg", (C,), C),
)

BINARY_OPS: tuple[RaOp, ...] = (
    RaOp("union", "∪", (R, R), R, True),
    RaOp("intersect", "∩", (R, R), R, True),
    RaOp("except", "\\", (R, R), R),
    RaOp("select", "σ", (P, R), R),
    RaOp("product", "×", (R, R), R, True),
    RaOp("project", "Π", (CS, R), R),
    RaOp("and", "∧", (P, P), P, True),
    RaOp("or", "∨", (P, P), P, True),
    RaOp("le", "≤", (C, C), P),
    RaOp("ge", "≥", (C, C), P),
    RaOp("lt", "<", (C, C), P),
    RaOp("gt", ">", (C, C), P),
    RaOp("eq", "=", (C, C), P, True),
    RaOp("neq", "≠", (C, C), P, True),
    RaOp("cunion", "⊔", (CS, CS), CS, True),
    RaOp("orderby_asc", "τ_asc", (C, R), R),
    RaOp("orderby_dsc", "τ_dsc", (C, R), R),
    RaOp("groupby", "γ", (C, R), R),
    RaOp("limit", "λ", (C, R), R),
    RaOp("in", "∈", (C, R), P),
    RaOp("not_in", "∉", (C, R), P),
    RaOp("like", "~", (C, C), P),
    RaOp("not_like", "≁", (C, C), P),
)

OPS: dict[str, RaOp] = {op.name: op for op in UNARY_OPS + BINARY_OPS}
UNARY_INDEX = {op.name: i for i, op in enumerate(UNARY_OPS)}
BINARY_INDEX = {op.name: i for i, op in enumerate(BINARY_OPS)}
AGGREGATES = ("agg_sum", "agg_max", "agg_min", "agg_count", "agg_avg")
COMPARISONS = ("le", "ge", "lt", "gt", "eq", "neq")
SET_OPS = ("union", "intersect", "except")

LEAF_KINDS = ("table", "column", "value", "star")
_LEAF_TYPES = {"table": R, "column": C, "value": C, "star": C}


class RaTypeError(TypeError):
    """An operation received children of the wrong semantic type.

    ``path`` is the list of child indices from the root to the offending node.
    """

    def __init__(self, path: Sequence[int], message: str):
        self.path = tuple(path)
        super().__init__(f"at node path {list(self.path)}: {message}")


class UnbalancedInput(ValueError):
    pass


class TreeSyntaxError(ValueError):
    pass


class RaTree:
    """A node of a relational-algebra tree.

    ``label`` is an operation name for inner nodes or the leaf text
    (``actor``, ``actor.name``, ``value``, ``*``) for leaves; ``kind`` is one
    of :data:`LEAF_KINDS` for leaves and ``None`` otherwise.
    """

    __slots__ = ("label", "kind", "children", "height", "size", "out_type", "_hash", "_canon", "_text")

    def __init__(self, label: str, children: Sequence["RaTree"] = (), kind: str | None = None):
        children = tuple(children)
        if kind is None:
            if label not in OPS:
                raise ValueError(f"unknown operation {label!r}")
            if len(children) != OPS[label].arity:
                raise ValueError(f"{label} takes {OPS[label].arity} children, got {len(children)}")
        elif children:
            raise ValueError("leaves have no children")
        elif kind not in LEAF_KINDS:
            raise ValueError(f"unknown leaf kind {kind!r}")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "children", children)
        object.__setattr__(self, "height", 1 + max(c.height for c in children) if children else 0)
        object.__setattr__(self, "size", 1 + sum(c.size for c in children))
        if kind is not None:
            out = _LEAF_TYPES[kind]
        else:
            types = [c.out_type for c in children]
            out = None if None in types else OPS[label].result_type(types)
        object.__setattr__(self, "out_type", out)
        object.__setattr__(self, "_hash", hash((label, kind, children)))
        object.__setattr__(self, "_canon", None)
        object.__setattr__(self, "_text", None)

    def __setattr__(self, name, value):
        raise AttributeError("RaTree is immutable")

    # -- constructors -----------------------------------------------------
    @classmethod
    def table(cls, name: str) -> "RaTree":
        return cls(name.lower(), kind="table")

    @classmethod
    def column(cls, table: str, column: str) -> "RaTree":
        return cls(f"{table.lower()}.{column.lower()}", kind="column")

    @classmethod
    def value(cls) -> "RaTree":
        return VALUE

    @classmethod
    def star(cls) -> "RaTree":
        return STAR

    @classmethod
    def op(cls, name: str, *children: "RaTree") -> "RaTree":
        """Checked constructor: raises :class:`RaTypeError` on ill-typed input."""
        node = cls(name, children)
        if node.out_type is None:
            infer_type(node)
        return node

    # -- structure --------------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return self.kind is not None

    @property
    def op_info(self) -> RaOp | None:
        return OPS.get(self.label) if self.kind is None else None

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, RaTree) or self._hash != other._hash:
            return False
        return self.label == other.label and self.kind == other.kind and self.children == other.children

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"RaTree({serialize(self)})"

    def __str__(self):
        return serialize(self)

    def subtrees(self) -> Iterator["RaTree"]:
        yield self
        for c in self.children:
            yield from c.subtrees()

    def leaves(self) -> Iterator["RaTree"]:
        if self.is_leaf:
            yield self
        else:
            for c in self.children:
                yield from c.leaves()

    @property
    def canonical_key(self) -> str:
        """Serialization of the canonical form (cached)."""
        if self._canon is None:
            object.__setattr__(self, "_canon", _canonical_key(self))
        return self._canon

    @property
    def digest(self) -> str:
        return canonical_digest(self)


VALUE = RaTree("value", kind="value")
STAR = RaTree("*", kind="star")


def leaf(text: str) -> RaTree:
    """Parse a leaf token: ``value``, ``*``, ``table.column`` or ``table``."""
    text = text.lower()
    if text == "value":
        return VALUE
    if text == "*":
        return STAR
    if "." in text:
        return RaTree(text, kind="column")
    return RaTree(text, kind="table")


# -- types -----------------------------------------------------------------

def infer_type(tree: RaTree) -> SemanticType:
    """Type-check the whole tree and return the root type."""
    return _infer(tree, [])


def _infer(tree: RaTree, path: list[int]) -> SemanticType:
    if tree.is_leaf:
        return _LEAF_TYPES[tree.kind]
    op = OPS[tree.label]
    types = []
    for i, child in enumerate(tree.children):
        path.append(i)
        types.append(_infer(child, path))
        path.pop()
    for i, (slot, actual) in enumerate(zip(op.inputs, types)):
        if not slot.accepts(actual):
            raise RaTypeError(path + [i], f"{op.name} expects {slot.value} as child {i}, got {actual.value}")
    return op.result_type(types)


def is_returnable(tree: RaTree) -> bool:
    return tree.out_type is R


# -- keep / balance ----------------------------------------------------------

def keep(tree: RaTree, times: int = 1) -> RaTree:
    for _ in range(times):
        tree = RaTree("keep", (tree,))
    return tree


def balance(tree: RaTree) -> RaTree:
    """Insert Keep chains so every leaf sits at depth ``tree.height``.

    The chain goes directly above the root of the shallower child of each
    binary node; the height is unchanged.
    """
    if tree.is_leaf:
        return tree
    kids = [balance(c) for c in tree.children]
    if len(kids) == 2:
        left, right = kids
        if left.height < right.height:
            left = keep(left, right.height - left.height)
        elif right.height < left.height:
            right = keep(right, left.height - right.height)
        kids = [left, right]
    return RaTree(tree.label, kids)


def strip_keep(tree: RaTree) -> RaTree:
    while tree.label == "keep" and not tree.is_leaf:
        tree = tree.children[0]
    if tree.is_leaf:
        return tree
    kids = tuple(strip_keep(c) for c in tree.children)
    if kids == tree.children:
        return tree
    return RaTree(tree.label, kids)


def is_balanced(tree: RaTree) -> bool:
    return all(d == tree.height for d in _leaf_depths(tree, 0))


def _leaf_depths(tree: RaTree, depth: int) -> Iterator[int]:
    if tree.is_leaf:
        yield depth
    else:
        for c in tree.children:
            yield from _leaf_depths(c, depth + 1)


# -- serialization -----------------------------------------------------------

def serialize(tree: RaTree) -> str:
    """Prefix form, e.g. ``(project actor.name (select (ge actor.age value) actor))``."""
    if tree._text is None:
        if tree.is_leaf:
            text = tree.label
        else:
            text = "(" + tree.label + " " + " ".join(serialize(c) for c in tree.children) + ")"
        object.__setattr__(tree, "_text", text)
    return tree._text


def _tokens(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_tree(text: str) -> RaTree:
    toks = _tokens(text)
    if not toks:
        raise TreeSyntaxError("empty tree text")
    tree, pos = _parse_at(toks, 0)
    if pos != len(toks):
        raise TreeSyntaxError(f"trailing tokens after position {pos}: {' '.join(toks[pos:])}")
    return tree


def _parse_at(toks: list[str], pos: int) -> tuple[RaTree, int]:
    if pos >= len(toks):
        raise TreeSyntaxError("unexpected end of input")
    tok = toks[pos]
    if tok == ")":
        raise TreeSyntaxError(f"unexpected ')' at token {pos}")
    if tok != "(":
        return leaf(tok), pos + 1
    if pos + 1 >= len(toks) or toks[pos + 1] not in OPS:
        raise TreeSyntaxError(f"expected operation name at token {pos + 1}")
    name = toks[pos + 1]
    pos += 2
    kids = []
    while pos < len(toks) and toks[pos] != ")":
        child, pos = _parse_at(toks, pos)
        kids.append(child)
    if pos >= len(toks):
        raise TreeSyntaxError("missing ')'")
    try:
        return RaTree(name, kids), pos + 1
    except ValueError as exc:
        raise TreeSyntaxError(str(exc)) from None


# -- canonical form ----------------------------------------------------------

def _canonical_key(tree: RaTree) -> str:
    if tree.is_leaf:
        return tree.label
    if tree.label == "keep":
        return tree.children[0].canonical_key
    keys = [c.canonical_key for c in tree.children]
    return compose_key(tree.label, keys)


def compose_key(op_name: str, child_keys: Sequence[str]) -> str:
    """Canonical key of ``op(children)`` given the children's canonical keys."""
    if op_name == "keep":
        return child_keys[0]
    if OPS[op_name].commutative and child_keys[1] < child_keys[0]:
        child_keys = (child_keys[1], child_keys[0])
    return "(" + op_name + " " + " ".join(child_keys) + ")"


def key_digest(key: str) -> str:
    return hashlib.blake2b(key.encode("utf-8"), digest_size=16).hexdigest()


def canonical_digest(tree: RaTree) -> str:
    """128-bit hex digest of the canonical serialization."""
    return key_digest(tree.canonical_key)


def canonicalize(tree: RaTree) -> RaTree:
    """Strip Keep nodes and sort children of commutative operations."""
    return parse_tree(tree.canonical_key)


def equivalent(a: RaTree, b: RaTree) -> bool:
    return a.canonical_key == b.canonical_key


# -- gold level slices -------------------------------------------------------

def level_slices(balanced: RaTree) -> list[dict[str, RaTree]]:
    """Distinct subtrees of each height, keyed by canonical digest.

    Entry ``t`` holds every distinct t-high subtree; entry 0 is the leaf set
    and the last entry holds only the root.
    """
    if not is_balanced(balanced):
        raise UnbalancedInput(f"leaves are not all at depth {balanced.height}")
    slices: list[dict[str, RaTree]] = [{} for _ in range(balanced.height + 1)]
    for sub in balanced.subtrees():
        slices[sub.height].setdefault(sub.digest, sub)
    return [dict(sorted(s.items())) for s in slices]
