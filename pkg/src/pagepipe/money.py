"""Exact currency arithmetic.

Amounts are plain `fractions.Fraction` values in dollars, so billing math
(per-token prices like $2.50 per million) never accumulates float drift and
sums of per-document costs equal the cost of the merged usage exactly.
"""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

Money = Fraction


def as_money(value: int | str | float | Decimal | Fraction) -> Money:
    """Convert a price-like value to an exact dollar amount."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # go through the decimal literal so 2.5 means "2.5", not its binary neighbour
        return Fraction(Decimal(repr(value)))
    return Fraction(Decimal(str(value)))


def to_decimal(amount: Money, places: int = 6) -> Decimal:
    """Render an exact amount as a Decimal, half-away-from-zero at `places`."""
    quantum = Decimal(1).scaleb(-places)
    return (Decimal(amount.numerator) / Decimal(amount.denominator)).quantize(
        quantum, rounding=ROUND_HALF_UP
    )


def format_dollars(amount: Money, places: int = 6) -> str:
    return f"${to_decimal(amount, places)}"
