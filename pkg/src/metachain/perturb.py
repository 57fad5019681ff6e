"""Leading-order arithmetic on monomials ``c * eps**k``.

A :class:`PerturbedValue` stands for a nonnegative function of ``eps`` known
only up to asymptotic equivalence, i.e. through its leading term.  Because
every quantity the package builds is a sum of products of nonnegative terms,
dropping subleading terms never loses the leading order: there is no
cancellation.  For the same reason no subtraction is offered.

Exponents are :class:`fractions.Fraction` so that ties in :func:`pv_add` are
detected exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import NamedTuple, Union

ExponentLike = Union[int, Fraction, str, tuple]


def as_exponent(value: ExponentLike) -> Fraction:
    """Convert ``value`` to an exact rational exponent.

    Accepts ints, Fractions, strings such as ``"3/2"`` and ``(num, den)``
    pairs.  Floats are refused on purpose: ``0.1`` has no exact meaning.
    """
    if isinstance(value, bool):
        raise TypeError("boolean is not an exponent")
    if isinstance(value, (tuple, list)):
        num, den = value
        if not (isinstance(num, int) and isinstance(den, int)) or isinstance(num, bool) or isinstance(den, bool):
            raise TypeError(f"exponent pair must hold integers, got {value!r}")
        if den == 0:
            raise ValueError("exponent denominator is zero")
        return Fraction(num, den)
    if isinstance(value, (int, Rational, str)):
        return Fraction(value)
    raise TypeError(f"exponent must be int, Fraction, str or (num, den); got {type(value).__name__}")


@dataclass(frozen=True)
class PerturbedValue:
    """Leading term ``coeff * eps**exp`` of a nonnegative function of eps.

    The identically-zero function is ``coeff == 0`` (with ``exp`` fixed at 0).
    Negative exponents are allowed here because ratios of vanishing
    quantities may diverge; chain entries themselves are checked to be
    nonnegative powers by :class:`~metachain.chain.PerturbedChain`.
    """

    coeff: float
    exp: Fraction = Fraction(0)

    def __post_init__(self):
        coeff = float(self.coeff)
        if not math.isfinite(coeff) or coeff < 0:
            raise ValueError(f"coefficient must be finite and nonnegative, got {self.coeff!r}")
        object.__setattr__(self, "coeff", coeff)
        exp = as_exponent(self.exp)
        object.__setattr__(self, "exp", Fraction(0) if coeff == 0 else exp)

    @property
    def is_zero(self) -> bool:
        return self.coeff == 0.0

    def __add__(self, other):
        return pv_add(self, _coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        return pv_mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return pv_div(self, _coerce(other))

    def __rtruediv__(self, other):
        return pv_div(_coerce(other), self)

    def __call__(self, eps: float) -> float:
        return evaluate(self, eps)

    def __repr__(self):
        if self.is_zero:
            return "PerturbedValue(0)"
        return f"PerturbedValue({self.coeff!r}, exp={self.exp})"

    def __str__(self):
        if self.is_zero:
            return "0"
        if self.exp == 0:
            return f"{self.coeff:.6g}"
        return f"{self.coeff:.6g}*eps^{self.exp}"

    def to_json(self) -> dict:
        return {"coeff": self.coeff, "exp": [self.exp.numerator, self.exp.denominator]}

    @classmethod
    def from_json(cls, data: dict) -> "PerturbedValue":
        return cls(data["coeff"], as_exponent(data["exp"]))


ZERO = PerturbedValue(0.0)
ONE = PerturbedValue(1.0)


def pv(coeff: float, exp: ExponentLike = 0) -> PerturbedValue:
    """Shorthand constructor: ``pv(0.5, 1)`` is ``0.5 * eps``."""
    return PerturbedValue(coeff, as_exponent(exp))


def _coerce(value) -> PerturbedValue:
    if isinstance(value, PerturbedValue):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return PerturbedValue(float(value))
    return NotImplemented


def pv_add(a: PerturbedValue, b: PerturbedValue) -> PerturbedValue:
    if a.is_zero:
        return b
    if b.is_zero:
        return a
    if a.exp < b.exp:
        return a
    if b.exp < a.exp:
        return b
    return PerturbedValue(a.coeff + b.coeff, a.exp)


def pv_sum(values) -> PerturbedValue:
    """Fold :func:`pv_add` over an iterable, in iteration order."""
    total = ZERO
    for value in values:
        total = pv_add(total, value)
    return total


def pv_mul(a: PerturbedValue, b: PerturbedValue) -> PerturbedValue:
    if a.is_zero or b.is_zero:
        return ZERO
    return PerturbedValue(a.coeff * b.coeff, a.exp + b.exp)


def pv_div(a: PerturbedValue, b: PerturbedValue) -> PerturbedValue:
    if b.is_zero:
        raise ZeroDivisionError("division by an identically-zero perturbed value (structurally unreachable target)")
    if a.is_zero:
        return ZERO
    return PerturbedValue(a.coeff / b.coeff, a.exp - b.exp)


class Order(enum.Enum):
    NEGLIGIBLE = "negligible"
    COMPARABLE = "comparable"
    DOMINANT = "dominant"
    BOTH_ZERO = "both_zero"


class Ordering(NamedTuple):
    tag: Order
    limit: float
    """``lim a/b`` in ``[0, inf]``; NaN when both are zero."""


def pv_order(a: PerturbedValue, b: PerturbedValue) -> Ordering:
    """Compare two monomials through ``lim a/b``."""
    if a.is_zero and b.is_zero:
        return Ordering(Order.BOTH_ZERO, math.nan)
    if a.is_zero:
        return Ordering(Order.NEGLIGIBLE, 0.0)
    if b.is_zero:
        return Ordering(Order.DOMINANT, math.inf)
    if a.exp > b.exp:
        return Ordering(Order.NEGLIGIBLE, 0.0)
    if a.exp < b.exp:
        return Ordering(Order.DOMINANT, math.inf)
    return Ordering(Order.COMPARABLE, a.coeff / b.coeff)


def evaluate(a: PerturbedValue, eps: float) -> float:
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"eps must lie in (0, 1], got {eps!r}")
    if a.is_zero:
        return 0.0
    if a.exp == 0:
        return a.coeff
    if a.exp.denominator == 1:
        return a.coeff * eps ** int(a.exp)
    return a.coeff * eps ** float(a.exp)
