import gmpy2
import pytest
from hypothesis import given, settings, strategies as st

from eml.errors import DivisionByZero, RangeError
from eml.field import (
    DEFAULT_PRIME,
    INT_BITS,
    PRIMES,
    Field,
    FixedPointParams,
    decode,
    decode_int,
    encode,
    encode_int,
    prime_for,
    round_scaled,
)


@pytest.mark.parametrize("bits,p", sorted(PRIMES.items()))
def test_tabulated_primes_are_largest_below_power(bits, p):
    assert gmpy2.is_prime(p, 64)
    for q in range(p + 1, 1 << bits):
        assert not gmpy2.is_prime(q, 32)


def test_default_prime_is_128_bit():
    assert DEFAULT_PRIME == 2 ** 128 - 159
    assert Field().nbytes == 16


@pytest.mark.parametrize("P,bits", [(10, 144), (15, 160), (20, 168), (26, 176), (42, 208)])
def test_prime_for_precision(P, bits):
    fp = FixedPointParams.from_precision(P)
    p = prime_for(fp)
    assert p.bit_length() == bits
    assert p > 2 ** (2 * fp.M + fp.s)
    assert fp.M < bits / 2 - fp.s


def test_layout_invariants():
    fp = FixedPointParams.from_precision(15)
    assert (fp.f, fp.M, fp.P) == (15, 36, 15)
    with pytest.raises(ValueError):
        FixedPointParams(f=10, M=40)
    with pytest.raises(ValueError):
        FixedPointParams(f=0, M=INT_BITS)


def test_prime_too_small_for_layout():
    with pytest.raises(RangeError):
        prime_for(FixedPointParams.from_precision(120))


def test_round_scaled_ties_away_from_zero():
    assert round_scaled(0.5, 0) == 1
    assert round_scaled(-0.5, 0) == -1
    assert round_scaled(2.5, 0) == 3
    assert round_scaled(1.25, 1) == 3
    assert round_scaled(0.1, 10) == 102


def test_pi_encoding_at_f15():
    fp = FixedPointParams.from_precision(15)
    F = Field(prime_for(fp))
    assert int(encode(3.141592653589793, fp, F)) == 102944


def test_encode_range_errors():
    fp = FixedPointParams.from_precision(15)
    p = prime_for(fp)
    with pytest.raises(RangeError):
        encode_int(2.0 ** 20, fp, p)
    with pytest.raises(RangeError):
        encode_int(float("nan"), fp, p)
    assert decode_int(encode_int(-(2.0 ** 20) + 1, fp, p), fp, p) == -(2.0 ** 20) + 1


def test_dead_zone_rejected():
    fp = FixedPointParams.from_precision(15)
    p = prime_for(fp)
    with pytest.raises(RangeError):
        decode_int(p // 2, fp, p)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-(2.0 ** 20) + 1, max_value=2.0 ** 20 - 1, allow_nan=False),
       st.sampled_from([10, 15, 26, 42]))
def test_encode_decode_within_half_ulp(x, P):
    fp = FixedPointParams.from_precision(P)
    F = Field(prime_for(fp))
    y = decode(encode(x, fp, F), fp, F)
    assert abs(y - x) <= 2.0 ** -(fp.f + 1) * (1 + 1e-12) + abs(x) * 2 ** -52


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0), st.integers(min_value=0))
def test_field_ops_match_integers(a, b):
    F = Field()
    p = F.p
    a, b = a % p, b % p
    assert F.add(a, b) == (a + b) % p
    assert F.sub(a, b) == (a - b) % p
    assert F.mul(a, b) == (a * b) % p
    assert F.add(F.neg(a), a) == 0
    if b:
        assert F.mul(b, F.inv(b)) == 1


def test_inverse_of_zero():
    with pytest.raises(DivisionByZero):
        Field().inv(0)
    with pytest.raises(DivisionByZero):
        Field()(5) / Field()(0)


def test_element_operators_and_bytes():
    F = Field()
    x, y = F(7), F(-3)
    assert int(x + y) == 4
    assert int(x * y) == F.p - 21
    assert int(3 - x) == F.p - 4
    assert (x / x) == 1
    assert len(x.to_bytes()) == 16
    assert F.signed(int(y)) == -3


def test_pack_roundtrip_and_reduction_check():
    F = Field()
    vals = [0, 1, F.p - 1, 12345]
    assert F.unpack(F.pack(vals)) == vals
    with pytest.raises(RangeError):
        F.unpack((F.p).to_bytes(16, "little"))
    with pytest.raises(RangeError):
        F.unpack(b"\x00" * 15)
