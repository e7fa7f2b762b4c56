"""Line-oriented text helpers shared by scenario files and store snapshots.

A logical line is a physical line with ``#`` comments removed; a line whose
parentheses are unbalanced continues onto the next one, so long predicates
can be wrapped. Tokens are bare words (which may embed a quoted value, as in
``mode="detour"``), quoted strings, or balanced parenthesized groups.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .literals import Literal, LiteralError, format_literal, is_name, parse_literal, quote


class FormatError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)
        self.line = line
        self.column = column
        self.message = message


@dataclass
class Token:
    text: str
    line: int
    col: int

    def error(self, message: str) -> FormatError:
        return FormatError(message, self.line, self.col)


def _strip_comment(line: str) -> str:
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_str:
            if ch == "\\":
                i += 2
                continue
            if ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "#":
            return line[:i]
        i += 1
    return line


def _depth(line: str) -> int:
    depth, in_str, i = 0, False, 0
    while i < len(line):
        ch = line[i]
        if in_str:
            if ch == "\\":
                i += 2
                continue
            if ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        i += 1
    return depth


@dataclass
class LogicalLine:
    lineno: int
    text: str
    indent: int

    @property
    def indented(self) -> bool:
        return self.indent > 0


def logical_lines(text: str) -> list[LogicalLine]:
    out: list[LogicalLine] = []
    pending: Optional[LogicalLine] = None
    depth = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw).rstrip()
        if pending is not None:
            pending.text += " " + body.strip()
            depth += _depth(body)
            if depth <= 0:
                out.append(pending)
                pending = None
            continue
        if not body.strip():
            continue
        line = LogicalLine(lineno, body.strip(), len(body) - len(body.lstrip()))
        depth = _depth(body)
        if depth > 0:
            pending = line
        else:
            out.append(line)
    if pending is not None:
        raise FormatError("unbalanced '(' at end of input", pending.lineno, 1)
    return out


def tokenize(line: LogicalLine) -> list[Token]:
    text = line.text
    toks: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        start = i
        depth = 0
        in_str = False
        while i < n:
            ch = text[i]
            if in_str:
                if ch == "\\":
                    i += 2
                    continue
                if ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth < 0:
                    raise FormatError("unbalanced ')'", line.lineno, i + 1)
            elif ch.isspace() and depth == 0:
                break
            i += 1
        if in_str:
            raise FormatError("unterminated string", line.lineno, start + 1)
        toks.append(Token(text[start:i], line.lineno, start + 1))
    return toks


def split_clauses(toks: list[Token], keywords: Iterable[str]) -> dict[str, list[Token]]:
    """Group tokens into ``keyword -> following tokens`` up to the next keyword.

    A token is a keyword only when it is one of ``keywords`` exactly; tokens
    holding ``=`` or quotes never are. Each keyword may appear once.
    """
    keys = set(keywords)
    out: dict[str, list[Token]] = {}
    current: Optional[str] = None
    for tok in toks:
        if tok.text in keys:
            if tok.text in out:
                raise tok.error(f"duplicate clause {tok.text!r}")
            current = tok.text
            out[current] = []
        elif current is None:
            raise tok.error(f"unexpected token {tok.text!r}")
        else:
            out[current].append(tok)
    return out


def one(clauses: dict[str, list[Token]], key: str, anchor: Token, *, required: bool = True) -> Optional[Token]:
    toks = clauses.get(key)
    if toks is None:
        if required:
            raise anchor.error(f"missing clause {key!r}")
        return None
    if len(toks) != 1:
        where = toks[1] if len(toks) > 1 else anchor
        raise where.error(f"clause {key!r} takes exactly one value")
    return toks[0]


def parse_name_list(tok: Optional[Token]) -> frozenset[str]:
    if tok is None:
        return frozenset()
    names = [p for p in tok.text.split(",") if p]
    for name in names:
        if not is_name(name):
            raise tok.error(f"bad name {name!r}")
    return frozenset(names)


def format_name_list(names: Iterable[str]) -> str:
    return ",".join(sorted(names))


def parse_assignment(tok: Token, *, bare_strings: bool = True) -> tuple[str, Literal]:
    key, eq, value = tok.text.partition("=")
    if not eq or not key:
        raise tok.error(f"expected key=value, found {tok.text!r}")
    try:
        return key, parse_literal(value, bare_strings=bare_strings)
    except LiteralError as exc:
        raise tok.error(str(exc)) from None


def parse_assignments(toks: Optional[list[Token]], *, bare_strings: bool = True) -> dict[str, Literal]:
    out: dict[str, Literal] = {}
    for tok in toks or ():
        key, value = parse_assignment(tok, bare_strings=bare_strings)
        if key in out:
            raise tok.error(f"duplicate key {key!r}")
        out[key] = value
    return out


def format_assignments(values: dict[str, Literal]) -> str:
    return " ".join(f"{k}={format_literal(values[k])}" for k in sorted(values))


def parse_string(tok: Token) -> str:
    try:
        value = parse_literal(tok.text, bare_strings=True)
    except LiteralError as exc:
        raise tok.error(str(exc)) from None
    return str(value) if not isinstance(value, str) else value


def parse_int(tok: Token, what: str) -> int:
    try:
        value = int(tok.text)
    except ValueError:
        raise tok.error(f"{what} must be an integer, found {tok.text!r}") from None
    return value


__all__ = [
    "FormatError",
    "LogicalLine",
    "Token",
    "format_assignments",
    "format_name_list",
    "logical_lines",
    "one",
    "parse_assignment",
    "parse_assignments",
    "parse_int",
    "parse_name_list",
    "parse_string",
    "quote",
    "split_clauses",
    "tokenize",
]
