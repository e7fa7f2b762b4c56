"""A small, total predicate language for policy constraints and trigger conditions.

Concrete syntax is a parenthesized prefix form::

    (and (has_role subject operator) (> object.state.temperature 80))

Grammar (EBNF)::

    expr      = "(" ( connective | atom ) ")" ;
    connective= ( "and" | "or" ) { expr } | "not" expr ;
    atom      = cmp_op path literal
              | "in" path literal { literal }
              | "has_role" "subject" name
              | "has_capability" "subject" name
              | "has_tag" ( "object" | "context" ) name
              | "affords" "object" name
              | "exists" path ;
    cmp_op    = "=" | "!=" | "<" | "<=" | ">" | ">=" ;
    path      = entity "." segment { "." segment } ;
    entity    = "subject" | "object" | "op" | "context" ;
    literal   = string | integer | decimal | "true" | "false" ;
    name      = bare-word | string ;

Evaluation never raises: an atom over a missing path, or a comparison
between values of different kinds, is simply false.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Union

from .literals import (
    Literal,
    LiteralError,
    comparable,
    format_literal,
    is_name,
    parse_literal,
    quote,
    type_name,
)
from .records import ObjectRecord, SubjectRecord

ENTITIES = ("subject", "object", "op", "context")
CMP_OPS = ("=", "!=", "<", "<=", ">", ">=")
_OP_ALIASES = {"≠": "!=", "≤": "<=", "≥": ">=", "==": "="}
GRAMMAR_VERSION = 1


class PredicateSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cmp:
    path: str
    op: str
    value: Literal


@dataclass(frozen=True)
class In:
    path: str
    values: tuple[Literal, ...]


@dataclass(frozen=True)
class HasRole:
    name: str


@dataclass(frozen=True)
class HasCapability:
    name: str


@dataclass(frozen=True)
class HasTag:
    entity: str
    name: str


@dataclass(frozen=True)
class Affords:
    name: str


@dataclass(frozen=True)
class Exists:
    path: str


@dataclass(frozen=True)
class And:
    items: tuple["Expr", ...] = ()


@dataclass(frozen=True)
class Or:
    items: tuple["Expr", ...] = ()


@dataclass(frozen=True)
class Not:
    item: "Expr"


Atom = Union[Cmp, In, HasRole, HasCapability, HasTag, Affords, Exists]
Expr = Union[Atom, And, Or, Not]
ATOM_TYPES = (Cmp, In, HasRole, HasCapability, HasTag, Affords, Exists)
TRUE = And(())
FALSE = Or(())


def literal_set(values) -> tuple[Literal, ...]:
    """Canonical form of a literal set: de-duplicated and sorted by type then text."""
    seen: dict[tuple[str, str], Literal] = {}
    for value in values:
        seen.setdefault((type_name(value), format_literal(value)), value)
    return tuple(seen[key] for key in sorted(seen))


def make_in(path: str, values) -> In:
    vals = literal_set(values)
    if not vals:
        raise ValueError("in: literal set must be non-empty")
    return In(path, vals)


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

def _name(text: str) -> str:
    return text if is_name(text) else quote(text)


def to_text(expr: Expr) -> str:
    if isinstance(expr, And):
        return "(" + " ".join(["and", *map(to_text, expr.items)]) + ")"
    if isinstance(expr, Or):
        return "(" + " ".join(["or", *map(to_text, expr.items)]) + ")"
    if isinstance(expr, Not):
        return f"(not {to_text(expr.item)})"
    if isinstance(expr, Cmp):
        return f"({expr.op} {expr.path} {format_literal(expr.value)})"
    if isinstance(expr, In):
        return "(in " + " ".join([expr.path, *map(format_literal, expr.values)]) + ")"
    if isinstance(expr, HasRole):
        return f"(has_role subject {_name(expr.name)})"
    if isinstance(expr, HasCapability):
        return f"(has_capability subject {_name(expr.name)})"
    if isinstance(expr, HasTag):
        return f"(has_tag {expr.entity} {_name(expr.name)})"
    if isinstance(expr, Affords):
        return f"(affords object {_name(expr.name)})"
    if isinstance(expr, Exists):
        return f"(exists {expr.path})"
    raise TypeError(f"not a predicate: {expr!r}")


def same_expr(a: Expr, b: Expr) -> bool:
    """Structural identity, treating ``1`` and ``1.0`` as different literals."""
    if type(a) is not type(b):
        return False
    if isinstance(a, (And, Or)):
        return len(a.items) == len(b.items) and all(map(same_expr, a.items, b.items))
    if isinstance(a, Not):
        return same_expr(a.item, b.item)
    return to_text(a) == to_text(b) and a == b


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class _Tok:
    text: str
    line: int
    col: int


@dataclass
class _Node:
    items: list  # of _Tok | _Node
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if ch.isspace():
            i, col = i + 1, col + 1
            continue
        if ch in "()":
            toks.append(_Tok(ch, line, col))
            i, col = i + 1, col + 1
            continue
        start, scol = i, col
        if ch == '"':
            i += 1
            while i < n and text[i] != '"':
                if text[i] == "\n":
                    raise PredicateSyntaxError("newline in string literal", line, scol)
                i += 2 if text[i] == "\\" else 1
            if i >= n:
                raise PredicateSyntaxError("unterminated string literal", line, scol)
            i += 1
        else:
            while i < n and not text[i].isspace() and text[i] not in '()"':
                i += 1
        toks.append(_Tok(text[start:i], line, scol))
        col += i - start
    return toks


def _tree(toks: list[_Tok]) -> _Node:
    if not toks:
        raise PredicateSyntaxError("empty predicate")
    stack: list[_Node] = []
    root: Optional[_Node] = None
    for tok in toks:
        if tok.text == "(":
            node = _Node([], tok.line, tok.col)
            if stack:
                stack[-1].items.append(node)
            elif root is not None:
                raise PredicateSyntaxError("trailing input after expression", tok.line, tok.col)
            else:
                root = node
            stack.append(node)
        elif tok.text == ")":
            if not stack:
                raise PredicateSyntaxError("unbalanced ')'", tok.line, tok.col)
            stack.pop()
        else:
            if not stack:
                raise PredicateSyntaxError(f"expected '(' but found {tok.text!r}", tok.line, tok.col)
            stack[-1].items.append(tok)
    if stack:
        raise PredicateSyntaxError("unbalanced '(' (missing ')')", stack[-1].line, stack[-1].col)
    assert root is not None
    return root


def _word(item, what: str) -> _Tok:
    if isinstance(item, _Node):
        raise PredicateSyntaxError(f"expected {what}, found a sub-expression", item.line, item.col)
    return item


def _path(item) -> str:
    tok = _word(item, "attribute path")
    parts = tok.text.split(".")
    if len(parts) < 2 or parts[0] not in ENTITIES or not all(parts[1:]):
        raise PredicateSyntaxError(
            f"bad path {tok.text!r}: expected <subject|object|op|context>.<path>", tok.line, tok.col
        )
    return tok.text


def _literal(item) -> Literal:
    tok = _word(item, "literal")
    try:
        return parse_literal(tok.text)
    except LiteralError:
        raise PredicateSyntaxError(f"bad literal {tok.text!r} (strings must be quoted)", tok.line, tok.col) from None


def _ident(item) -> str:
    tok = _word(item, "name")
    if tok.text.startswith('"'):
        try:
            return parse_literal(tok.text)  # type: ignore[return-value]
        except LiteralError:
            raise PredicateSyntaxError(f"bad string {tok.text!r}", tok.line, tok.col) from None
    if not is_name(tok.text):
        raise PredicateSyntaxError(f"bad name {tok.text!r}", tok.line, tok.col)
    return tok.text


def _entity(item, allowed: tuple[str, ...]) -> str:
    tok = _word(item, "entity")
    if tok.text not in allowed:
        raise PredicateSyntaxError(f"expected one of {', '.join(allowed)}, found {tok.text!r}", tok.line, tok.col)
    return tok.text


def _arity(node: _Node, head: str, expected: int) -> None:
    got = len(node.items) - 1
    if got != expected:
        raise PredicateSyntaxError(f"{head} takes {expected} argument(s), got {got}", node.line, node.col)


def _build(node) -> Expr:
    if isinstance(node, _Tok):
        raise PredicateSyntaxError(f"expected '(' but found {node.text!r}", node.line, node.col)
    if not node.items:
        raise PredicateSyntaxError("empty expression '()'", node.line, node.col)
    head_tok = _word(node.items[0], "operator")
    head = _OP_ALIASES.get(head_tok.text, head_tok.text)
    args = node.items[1:]
    if head == "and":
        return And(tuple(_build(a) for a in args))
    if head == "or":
        return Or(tuple(_build(a) for a in args))
    if head == "not":
        _arity(node, head, 1)
        return Not(_build(args[0]))
    if head in CMP_OPS:
        _arity(node, head, 2)
        return Cmp(_path(args[0]), head, _literal(args[1]))
    if head == "in":
        if len(args) < 2:
            raise PredicateSyntaxError("in takes a path and at least one literal", node.line, node.col)
        return make_in(_path(args[0]), [_literal(a) for a in args[1:]])
    if head == "has_role":
        _arity(node, head, 2)
        _entity(args[0], ("subject",))
        return HasRole(_ident(args[1]))
    if head == "has_capability":
        _arity(node, head, 2)
        _entity(args[0], ("subject",))
        return HasCapability(_ident(args[1]))
    if head == "has_tag":
        _arity(node, head, 2)
        return HasTag(_entity(args[0], ("object", "context")), _ident(args[1]))
    if head == "affords":
        _arity(node, head, 2)
        _entity(args[0], ("object",))
        return Affords(_ident(args[1]))
    if head == "exists":
        _arity(node, head, 1)
        return Exists(_path(args[0]))
    raise PredicateSyntaxError(f"unknown atom {head_tok.text!r}", head_tok.line, head_tok.col)


def parse_predicate(text: str) -> Expr:
    return _build(_tree(_tokenize(text)))


# ---------------------------------------------------------------------------
# Structure helpers
# ---------------------------------------------------------------------------

def atoms(expr: Expr) -> Iterator[Atom]:
    """Atoms in depth-first, left-to-right order."""
    if isinstance(expr, (And, Or)):
        for item in expr.items:
            yield from atoms(item)
    elif isinstance(expr, Not):
        yield from atoms(expr.item)
    else:
        yield expr


def atom_entity(atom: Atom) -> str:
    if isinstance(atom, (Cmp, In, Exists)):
        return atom.path.split(".", 1)[0]
    if isinstance(atom, (HasRole, HasCapability)):
        return "subject"
    if isinstance(atom, HasTag):
        return atom.entity
    return "object"


def namespaces(expr: Expr) -> set[str]:
    return {atom_entity(a) for a in atoms(expr)}


def paths(expr: Expr) -> list[str]:
    return [a.path for a in atoms(expr) if isinstance(a, (Cmp, In, Exists))]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpBinding:
    name: str
    args: Mapping[str, Literal] = field(default_factory=dict)


@dataclass
class BindingEnv:
    subject: SubjectRecord
    object: ObjectRecord
    op: OpBinding
    context: Mapping[str, object]


class _Missing:
    def __repr__(self) -> str:
        return "MISSING"


MISSING = _Missing()


def resolve(path: str, env: BindingEnv):
    """Value at ``path``: a literal, a frozenset for set-valued paths, or MISSING."""
    root, _, rest = path.partition(".")
    head, _, tail = rest.partition(".")
    if root == "subject":
        s = env.subject
        if rest == "id":
            return s.id
        if rest == "roles":
            return frozenset(s.roles)
        if rest == "capabilities":
            return frozenset(s.capabilities)
        if rest == "goals":
            return frozenset(s.goals)
        if head == "attributes" and tail:
            return s.attributes.get(tail, MISSING)
        return MISSING
    if root == "object":
        o = env.object
        if rest == "id":
            return o.id
        if rest == "class":
            return o.cls
        if rest == "affordances":
            return frozenset(o.affordances)
        if rest == "tags":
            return frozenset(o.tags)
        if head == "attributes" and tail:
            return o.attributes.get(tail, MISSING)
        if head == "state" and tail:
            return o.state.get(tail, MISSING)
        return MISSING
    if root == "op":
        if rest == "name":
            return env.op.name
        if head == "args" and tail:
            return env.op.args.get(tail, MISSING)
        return MISSING
    if root == "context":
        value = env.context.get(rest, MISSING)
        if isinstance(value, (set, frozenset, list, tuple)):
            return frozenset(value)
        return value
    return MISSING


def compare(left: object, op: str, right: Literal) -> bool:
    if left is MISSING or isinstance(left, frozenset) or not comparable(left, right):
        return False
    if isinstance(left, bool) and op not in ("=", "!="):
        return False
    if op == "=":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right  # type: ignore[operator]
    if op == "<=":
        return left <= right  # type: ignore[operator]
    if op == ">":
        return left > right  # type: ignore[operator]
    if op == ">=":
        return left >= right  # type: ignore[operator]
    return False


def eval_atom(atom: Atom, env: BindingEnv) -> bool:
    if isinstance(atom, Cmp):
        return compare(resolve(atom.path, env), atom.op, atom.value)
    if isinstance(atom, In):
        value = resolve(atom.path, env)
        if value is MISSING:
            return False
        members = value if isinstance(value, frozenset) else (value,)
        return any(compare(m, "=", lit) for m in members for lit in atom.values)
    if isinstance(atom, HasRole):
        return atom.name in env.subject.roles
    if isinstance(atom, HasCapability):
        return atom.name in env.subject.capabilities
    if isinstance(atom, HasTag):
        if atom.entity == "object":
            return atom.name in env.object.tags
        tags = env.context.get("tags", ())
        return isinstance(tags, (set, frozenset, list, tuple)) and atom.name in tags
    if isinstance(atom, Affords):
        return atom.name in env.object.affordances
    if isinstance(atom, Exists):
        value = resolve(atom.path, env)
        if isinstance(value, frozenset):
            return bool(value)
        return value is not MISSING
    return False


@dataclass
class Evaluation:
    value: bool
    trace: list[tuple[Atom, bool]]


def _eval(expr: Expr, env: BindingEnv, trace: list) -> bool:
    # every child is visited so the trace is complete
    if isinstance(expr, And):
        results = [_eval(item, env, trace) for item in expr.items]
        return all(results)
    if isinstance(expr, Or):
        results = [_eval(item, env, trace) for item in expr.items]
        return any(results)
    if isinstance(expr, Not):
        return not _eval(expr.item, env, trace)
    value = eval_atom(expr, env)
    trace.append((expr, value))
    return value


def evaluate(expr: Expr, env: BindingEnv) -> Evaluation:
    trace: list[tuple[Atom, bool]] = []
    value = _eval(expr, env, trace)
    return Evaluation(value, trace)


def _negate(lit: Expr) -> Expr:
    return lit.item if isinstance(lit, Not) else Not(lit)


def blame(expr: Expr, env: BindingEnv, want: bool = False) -> list[Expr]:
    """Literals (atoms or negated atoms) explaining why ``expr`` is ``want``.

    Each returned literal, evaluated on its own, has the value ``want``.
    Returns [] when ``expr`` does not evaluate to ``want``.
    """
    actual = evaluate(expr, env).value
    if actual != want:
        return []
    if isinstance(expr, Not):
        return [_negate(lit) for lit in blame(expr.item, env, not want)]
    if isinstance(expr, (And, Or)):
        out: list[Expr] = []
        for item in expr.items:
            out.extend(blame(item, env, want))
        return out
    return [expr]


# ---------------------------------------------------------------------------
# Static validation
# ---------------------------------------------------------------------------

def _catalog_type(path: str, catalog: Mapping[str, str]) -> Optional[str]:
    """Declared type for ``path``; "*" when only a wildcard covers it; None if unknown."""
    if path in catalog:
        return catalog[path]
    parts = path.split(".")
    for i in range(len(parts) - 1, 0, -1):
        if ".".join(parts[:i]) + ".*" in catalog:
            return "*"
    return None


def _coherent(declared: str, op: str, value: Literal) -> bool:
    lit = type_name(value)
    if declared == "*":
        return True
    if declared == "set":
        return False
    if declared in ("integer", "decimal") and lit in ("integer", "decimal"):
        ok = True
    else:
        ok = declared == lit
    if ok and declared == "boolean" and op not in ("=", "!="):
        return False
    return ok


def validate_predicate(expr: Expr, catalog: Mapping[str, str]) -> list[str]:
    """Warnings for unknown paths and type-incoherent comparisons. Never raises."""
    warnings: list[str] = []
    for atom in atoms(expr):
        if not isinstance(atom, (Cmp, In, Exists)):
            continue
        declared = _catalog_type(atom.path, catalog)
        if declared is None:
            warnings.append(f"unknown attribute path {atom.path}")
            continue
        if isinstance(atom, Cmp) and not _coherent(declared, atom.op, atom.value):
            warnings.append(
                f"type-incoherent comparison {to_text(atom)}: {atom.path} is {declared}, "
                f"literal is {type_name(atom.value)}"
            )
        if isinstance(atom, In) and declared != "set":
            for lit in atom.values:
                if not _coherent(declared, "=", lit):
                    warnings.append(
                        f"type-incoherent membership {to_text(atom)}: {atom.path} is {declared}, "
                        f"literal {format_literal(lit)} is {type_name(lit)}"
                    )
    return warnings
