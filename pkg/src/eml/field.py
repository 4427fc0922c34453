"""Prime-field arithmetic and the fixed-point encoding of reals.

Reals are carried as integers modulo a public prime ``p``: ``x`` becomes
``round(x * 2**f) mod p`` and negative numbers live in the top band of the
field.  Bulk protocol code works on plain ``int`` lists for speed; the
:class:`FieldElement` wrapper exists for the scalar API and for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DivisionByZero, RangeError

STAT_SEC = 40
INT_BITS = 21

# Largest prime below 2**b for byte-aligned b (offsets verified in the tests).
PRIME_OFFSETS = {
    128: 159, 136: 113, 144: 83, 152: 17, 160: 47, 168: 257, 176: 233,
    184: 33, 192: 237, 200: 75, 208: 299, 216: 377, 224: 63, 232: 567,
    240: 467, 248: 237, 256: 189,
}
PRIMES = {b: (1 << b) - d for b, d in PRIME_OFFSETS.items()}
DEFAULT_PRIME = PRIMES[128]


@dataclass(frozen=True)
class FixedPointParams:
    """Fixed-point layout: ``f`` fractional bits inside ``M`` total bits.

    The reported precision parameter is ``P = M - 21``; the integer part is
    always 21 bits and ``f == P``.
    """

    f: int
    M: int
    s: int = STAT_SEC

    def __post_init__(self):
        if not 1 <= self.f < self.M:
            raise ValueError(f"need 1 <= f < M, got f={self.f}, M={self.M}")
        if self.M - self.f != INT_BITS:
            raise ValueError(f"M - f must be {INT_BITS} (P := M - 21), got {self.M - self.f}")

    @classmethod
    def from_precision(cls, P: int, s: int = STAT_SEC) -> "FixedPointParams":
        return cls(f=P, M=P + INT_BITS, s=s)

    @property
    def P(self) -> int:
        return self.M - INT_BITS

    @property
    def max_abs(self) -> float:
        """Exclusive bound on representable magnitudes, 2**(M-f-1)."""
        return float(2 ** (self.M - self.f - 1))

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.f

    def fits(self, p: int) -> bool:
        b = p.bit_length()
        return p > 1 << (2 * self.M + self.s) and self.M < b / 2 - self.s


def prime_for(params: FixedPointParams) -> int:
    """Smallest prime from the table satisfying the layout's field invariants."""
    for b in sorted(PRIMES):
        if params.fits(PRIMES[b]):
            return PRIMES[b]
    raise RangeError(f"no tabulated prime is large enough for M={params.M}, s={params.s}")


class Field:
    """Arithmetic modulo a public prime, plus fixed-size little-endian serialization."""

    __slots__ = ("p", "bits", "nbytes")

    def __init__(self, p: int = DEFAULT_PRIME):
        if p < 3:
            raise ValueError("modulus must be an odd prime")
        self.p = p
        self.bits = p.bit_length()
        self.nbytes = (self.bits + 7) // 8

    def __eq__(self, other):
        return isinstance(other, Field) and other.p == self.p

    def __hash__(self):
        return hash(self.p)

    def __repr__(self):
        return f"Field(bits={self.bits})"

    def __call__(self, value: int) -> "FieldElement":
        return FieldElement(value % self.p, self)

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.p

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.p

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.p

    def neg(self, a: int) -> int:
        return (-a) % self.p

    def inv(self, a: int) -> int:
        if a % self.p == 0:
            raise DivisionByZero("zero has no inverse in the field")
        return pow(a, -1, self.p)

    def signed(self, v: int) -> int:
        """Centered representative in (-p/2, p/2]."""
        v %= self.p
        return v - self.p if v > self.p >> 1 else v

    def to_bytes(self, v: int) -> bytes:
        return v.to_bytes(self.nbytes, "little")

    def from_bytes(self, b: bytes) -> int:
        v = int.from_bytes(b, "little")
        if v >= self.p:
            raise RangeError("serialized element is not reduced modulo p")
        return v

    def pack(self, values: Iterable[int]) -> bytes:
        n = self.nbytes
        return b"".join([v.to_bytes(n, "little") for v in values])

    def unpack(self, data: bytes) -> list[int]:
        n = self.nbytes
        if len(data) % n:
            raise RangeError(f"payload of {len(data)} bytes is not a multiple of {n}")
        fb = int.from_bytes
        out = [fb(data[i:i + n], "little") for i in range(0, len(data), n)]
        p = self.p
        for v in out:
            if v >= p:
                raise RangeError("serialized element is not reduced modulo p")
        return out


class FieldElement:
    """An element of a prime field with operator overloading."""

    __slots__ = ("value", "field")

    def __init__(self, value: int, field: Field):
        if not 0 <= value < field.p:
            raise RangeError("field element out of [0, p)")
        self.value = value
        self.field = field

    def _coerce(self, other) -> int:
        if isinstance(other, FieldElement):
            if other.field != self.field:
                raise ValueError("elements of different fields")
            return other.value
        if isinstance(other, int):
            return other % self.field.p
        return NotImplemented

    def __add__(self, other):
        o = self._coerce(other)
        return FieldElement((self.value + o) % self.field.p, self.field)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        return FieldElement((self.value - o) % self.field.p, self.field)

    def __rsub__(self, other):
        o = self._coerce(other)
        return FieldElement((o - self.value) % self.field.p, self.field)

    def __mul__(self, other):
        o = self._coerce(other)
        return FieldElement((self.value * o) % self.field.p, self.field)

    __rmul__ = __mul__

    def __neg__(self):
        return FieldElement((-self.value) % self.field.p, self.field)

    def inv(self) -> "FieldElement":
        return FieldElement(self.field.inv(self.value), self.field)

    def __truediv__(self, other):
        o = self._coerce(other)
        return self * FieldElement(self.field.inv(o), self.field)

    def __eq__(self, other):
        if isinstance(other, FieldElement):
            return self.field == other.field and self.value == other.value
        if isinstance(other, int):
            return self.value == other % self.field.p
        return NotImplemented

    def __hash__(self):
        return hash((self.value, self.field.p))

    def __int__(self):
        return self.value

    def __index__(self):
        return self.value

    def __repr__(self):
        return f"FieldElement({self.value})"

    def to_bytes(self) -> bytes:
        return self.field.to_bytes(self.value)


def round_scaled(x: float, f: int) -> int:
    """``round(x * 2**f)`` with ties away from zero, computed exactly."""
    num, den = float(x).as_integer_ratio()
    q, r = divmod(abs(num) << f, den)
    if 2 * r >= den:
        q += 1
    return -q if num < 0 else q


def encode_int(x: float, params: FixedPointParams, p: int) -> int:
    if not math.isfinite(x):
        raise RangeError(f"cannot encode non-finite value {x!r}")
    if abs(x) >= params.max_abs:
        raise RangeError(f"|{x}| exceeds the representable range 2**{params.M - params.f - 1}")
    return round_scaled(x, params.f) % p


def decode_int(v: int, params: FixedPointParams, p: int, scale: int | None = None) -> float:
    f = params.f if scale is None else scale
    band = 1 << (params.M + params.s)
    v %= p
    if v < band:
        return v / (1 << f)
    if v >= p - band:
        return -((p - v) / (1 << f))
    raise RangeError("field value lies in the dead zone between the positive and negative bands")


def encode(x: float, params: FixedPointParams, field: Field) -> FieldElement:
    """Map a real onto the fixed-point grid (round half away from zero)."""
    return FieldElement(encode_int(x, params, field.p), field)


def decode(v, params: FixedPointParams, field: Field) -> float:
    return decode_int(int(v), params, field.p)


def encode_vector(xs: Sequence[float], params: FixedPointParams, p: int) -> list[int]:
    bound = params.max_abs
    f = params.f
    out = []
    for x in xs:
        x = float(x)
        if not abs(x) < bound:
            raise RangeError(f"|{x}| exceeds the representable range")
        out.append(round_scaled(x, f) % p)
    return out


def decode_vector(vs: Iterable[int], params: FixedPointParams, p: int) -> list[float]:
    return [decode_int(v, params, p) for v in vs]
