"""Physical quantities with mandatory units.

Every physical number in a scenario or calibration file is written as a
string such as ``"0.8 V"``, ``"170 MHz"`` or ``"32 KiB"``. A bare number is
rejected so that a missing unit can never silently become a micro/milli
mix-up.
"""

from __future__ import annotations

import re
from fractions import Fraction

__all__ = ["UnitError", "parse_quantity", "format_quantity", "DIMENSIONS"]


class UnitError(ValueError):
    pass


_SI = {
    "p": Fraction(1, 10**12),
    "n": Fraction(1, 10**9),
    "u": Fraction(1, 10**6),
    "µ": Fraction(1, 10**6),
    "m": Fraction(1, 10**3),
    "": Fraction(1),
    "k": Fraction(10**3),
    "M": Fraction(10**6),
    "G": Fraction(10**9),
}

DIMENSIONS = {
    "frequency": "Hz",
    "voltage": "V",
    "power": "W",
    "energy": "J",
    "time": "s",
}

_BYTES = {"B": 1, "KiB": 1024, "MiB": 1024**2, "kB": 1000}

_QTY = re.compile(r"^\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-zµ]+)\s*$")


def parse_quantity(text, dimension: str) -> Fraction:
    """Parse ``text`` as a quantity of ``dimension`` and return it in base units.

    Dimensions are the keys of ``DIMENSIONS`` plus ``"size"`` (bytes) and
    ``"cycles"``.
    """
    if not isinstance(text, str):
        raise UnitError(f"expected a {dimension} with an explicit unit, got {text!r}")
    m = _QTY.match(text)
    if not m:
        raise UnitError(f"expected a {dimension} with an explicit unit, got {text!r}")
    value = Fraction(m.group(1))
    unit = m.group(2)
    if dimension == "size":
        if unit not in _BYTES:
            raise UnitError(f"unknown size unit {unit!r} in {text!r}")
        return value * _BYTES[unit]
    if dimension == "cycles":
        if unit not in ("cycle", "cycles"):
            raise UnitError(f"expected cycles in {text!r}")
        return value
    base = DIMENSIONS.get(dimension)
    if base is None:
        raise KeyError(dimension)
    if not unit.endswith(base):
        raise UnitError(f"expected a {dimension} in {base}, got {text!r}")
    prefix = unit[: -len(base)]
    if prefix not in _SI:
        raise UnitError(f"unknown prefix {prefix!r} in {text!r}")
    return value * _SI[prefix]


def format_quantity(value, dimension: str, prefix: str = "") -> str:
    """Inverse of :func:`parse_quantity` for writing files."""
    base = DIMENSIONS[dimension]
    scaled = float(Fraction(value) / _SI[prefix])
    return f"{scaled:.12g} {prefix}{base}"
