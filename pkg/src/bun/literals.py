"""Literal values shared by attributes, state, predicates and exports.

The value space is closed: ``str``, ``int``, ``Decimal`` and ``bool``.
Floats are never accepted so that comparisons are identical everywhere.
"""

from __future__ import annotations

import re
from decimal import Decimal, InvalidOperation
from typing import Union

Literal = Union[str, int, Decimal, bool]

_INT_RE = re.compile(r"[+-]?\d+\Z")
_DEC_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+(\.\d*)?[eE][+-]?\d+)\Z")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*\Z")
_ID_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.:\-]*\Z")


class LiteralError(ValueError):
    pass


def is_literal(value: object) -> bool:
    if isinstance(value, Decimal):
        return value.is_finite()
    return isinstance(value, (str, int, bool))


def check_literal(value: object) -> Literal:
    if not is_literal(value):
        raise LiteralError(f"not a literal: {value!r} ({type(value).__name__})")
    return value  # type: ignore[return-value]


def is_name(text: str) -> bool:
    """Operation, role, capability and tag names."""
    return bool(_NAME_RE.match(text))


def is_ident(text: str) -> bool:
    """Entity identifiers (a little looser than names: dots and colons allowed)."""
    return bool(_ID_RE.match(text))


def type_name(value: Literal) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, Decimal):
        return "decimal"
    return "string"


def comparable(a: object, b: object) -> bool:
    """True when ``a`` and ``b`` belong to the same comparison class."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool)
    if isinstance(a, str) or isinstance(b, str):
        return isinstance(a, str) and isinstance(b, str)
    return isinstance(a, (int, Decimal)) and isinstance(b, (int, Decimal))


def same_literal(a: Literal, b: Literal) -> bool:
    """Structural identity: equal value *and* equal type."""
    return type_name(a) == type_name(b) and a == b and str(a) == str(b)


def format_decimal(value: Decimal) -> str:
    text = format(value, "f")
    if "." not in text:
        text += ".0"
    return text


def quote(text: str) -> str:
    out = ['"']
    for ch in text:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def unquote(text: str) -> str:
    if len(text) < 2 or text[0] != '"' or text[-1] != '"':
        raise LiteralError(f"not a quoted string: {text}")
    out = []
    i = 1
    end = len(text) - 1
    while i < end:
        ch = text[i]
        if ch == "\\":
            if i + 1 >= end:
                raise LiteralError(f"dangling escape in {text}")
            nxt = text[i + 1]
            out.append({"n": "\n", "t": "\t"}.get(nxt, nxt))
            i += 2
            continue
        if ch == '"':
            raise LiteralError(f"unescaped quote in {text}")
        out.append(ch)
        i += 1
    return "".join(out)


def format_literal(value: Literal) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, Decimal):
        return format_decimal(value)
    if isinstance(value, str):
        return quote(value)
    raise LiteralError(f"not a literal: {value!r}")


def parse_literal(text: str, *, bare_strings: bool = False) -> Literal:
    """Parse one literal token.

    Quoted text is a string, ``true``/``false`` are booleans, integers and
    decimals follow the usual notation. With ``bare_strings`` any other
    token is taken as a string (scenario attribute shorthand).
    """
    if text.startswith('"'):
        return unquote(text)
    if text == "true":
        return True
    if text == "false":
        return False
    if _INT_RE.match(text):
        return int(text)
    if _DEC_RE.match(text):
        try:
            value = Decimal(text)
        except InvalidOperation as exc:  # pragma: no cover - regex guards this
            raise LiteralError(f"bad decimal {text}") from exc
        return value
    if bare_strings and text:
        return text
    raise LiteralError(f"not a literal: {text!r}")


# JSON encoding used by the line-delimited exports. Decimals are tagged so
# that they survive a round trip without turning into floats.

def to_json(value: Literal) -> object:
    if isinstance(value, Decimal):
        return {"$dec": format_decimal(value)}
    return value


def from_json(value: object) -> Literal:
    if isinstance(value, dict) and set(value) == {"$dec"}:
        return Decimal(value["$dec"])
    if isinstance(value, float):
        raise LiteralError("floats are not literals")
    return check_literal(value)
