from __future__ import annotations

from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bun.literals import (
    LiteralError,
    comparable,
    format_literal,
    from_json,
    parse_literal,
    quote,
    same_literal,
    to_json,
    unquote,
)

literals = st.one_of(
    st.booleans(),
    st.integers(),
    st.decimals(allow_nan=False, allow_infinity=False, places=4),
    st.text(),
)


@pytest.mark.parametrize(
    "text,expected",
    [
        ("42", 42),
        ("-7", -7),
        ("2.5", Decimal("2.5")),
        ("1e3", Decimal("1e3")),
        ("true", True),
        ("false", False),
        ('"a b"', "a b"),
        ('"say \\"hi\\""', 'say "hi"'),
    ],
)
def test_parse_literal(text, expected):
    value = parse_literal(text)
    assert same_literal(value, expected)


def test_bare_strings_only_on_request():
    assert parse_literal("detour", bare_strings=True) == "detour"
    with pytest.raises(LiteralError):
        parse_literal("detour")


def test_decimal_always_prints_a_point():
    assert format_literal(Decimal("5")) == "5.0"
    assert format_literal(Decimal("1E+2")) == "100.0"
    assert format_literal(Decimal("0.50")) == "0.50"


@given(literals)
def test_format_parse_round_trip(value):
    back = parse_literal(format_literal(value))
    assert type(back) is type(value)
    assert back == value


@given(st.text())
def test_quote_unquote(text):
    assert unquote(quote(text)) == text


@given(literals)
def test_json_round_trip(value):
    back = from_json(to_json(value))
    assert type(back) is type(value) and back == value


def test_comparison_classes():
    assert comparable(1, Decimal("1.5"))
    assert not comparable(True, 1)
    assert not comparable("1", 1)
    assert comparable(False, True)


def test_floats_are_rejected():
    with pytest.raises(LiteralError):
        from_json(1.5)
