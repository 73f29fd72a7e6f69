from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from xheep_sim.units import UnitError, format_quantity, parse_quantity


@pytest.mark.parametrize("text,dim,expected", [
    ("170 MHz", "frequency", Fraction(170_000_000)),
    ("32768 Hz", "frequency", Fraction(32768)),
    ("0.8 V", "voltage", Fraction(4, 5)),
    ("384 uW", "power", Fraction(384, 10**6)),
    ("384 µW", "power", Fraction(384, 10**6)),
    ("8.17 mW", "power", Fraction(817, 10**5)),
    ("2.5 pJ", "energy", Fraction(25, 10**13)),
    ("15 s", "time", Fraction(15)),
    ("32 KiB", "size", 32 * 1024),
    ("10 cycles", "cycles", 10),
])
def test_parse(text, dim, expected):
    assert parse_quantity(text, dim) == expected


@pytest.mark.parametrize("text,dim", [
    ("170", "frequency"),          # unit omitted
    (170, "frequency"),            # bare number
    ("0.8 W", "voltage"),          # wrong dimension
    ("3 xV", "voltage"),           # unknown prefix
    ("32 KB", "size"),
])
def test_rejects(text, dim):
    with pytest.raises(UnitError):
        parse_quantity(text, dim)


@given(st.floats(min_value=1e-3, max_value=1e6, allow_nan=False),
       st.sampled_from(["", "m", "u", "p", "k", "M"]))
def test_format_round_trip(x, prefix):
    text = format_quantity(x, "power", prefix)
    back = float(parse_quantity(text, "power"))
    assert back == pytest.approx(x, rel=1e-11)
