"""Online secure-computation kernels over authenticated shares.

Every function takes the local :class:`~eml.sharing.Party` first and is run
by both parties with the same arguments (apart from private inputs).

Truncation is exact: ``trunc(x, m)`` returns ``floor(x / 2**m)`` (or the
nearest integer) with no probabilistic carry, so results do not depend on
which preprocessing provider dealt the masks. The low ``m`` bits of each
mask are shared bit by bit and the carry out of the masked addition is
recovered with a chain of ``m - 1`` multiplications.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import DimensionMismatch, RangeError
from .field import FixedPointParams, round_scaled
from .sharing import Party, Shares


# -- multiplication -------------------------------------------------------------

def beaver_mul(P: Party, x: Shares, y: Shares) -> Shares:
    """Elementwise product; opens only ``x - a`` and ``y - b``."""
    if len(x.v) != len(y.v):
        raise DimensionMismatch(f"length {len(x.v)} vs {len(y.v)}")
    n = len(x.v)
    if n == 0:
        return Shares([], [], x.session)
    p, k = P.p, P.key
    av, am, bv, bm, cv, cm = P.store.triples(n)
    dv = [(s - t) % p for s, t in zip(x.v, av)]
    dm = [(s - t) % p for s, t in zip(x.m, am)]
    ev = [(s - t) % p for s, t in zip(y.v, bv)]
    em = [(s - t) % p for s, t in zip(y.m, bm)]
    opened = P.open(Shares(dv + ev, dm + em, x.session))
    d, e = opened[:n], opened[n:]
    if P.role == "A":
        zv = [(c + s * b + t * a + s * t) % p for c, s, t, a, b in zip(cv, d, e, av, bv)]
    else:
        zv = [(c + s * b + t * a) % p for c, s, t, a, b in zip(cv, d, e, av, bv)]
    zm = [(c + s * b + t * a + k * (s * t % p)) % p
          for c, s, t, a, b in zip(cm, d, e, am, bm)]
    return Shares(zv, zm, x.session)


def square(P: Party, x: Shares) -> Shares:
    return beaver_mul(P, x, x)


# -- exact truncation -----------------------------------------------------------

def trunc(P: Party, x: Shares, m: int, K: int, rounding: bool = True) -> Shares:
    """Shift right by ``m`` bits exactly.

    ``x`` must hold signed integers with ``|x| < 2**(K-1)``. With
    ``rounding`` the result is ``floor((x + 2**(m-1)) / 2**m)``, otherwise
    ``floor(x / 2**m)``.
    """
    if not 1 <= m < K:
        raise ValueError(f"need 1 <= m < K (m={m}, K={K})")
    n = len(x.v)
    if n == 0:
        return Shares([], [], x.session)
    p, key, role_a = P.p, P.key, P.role == "A"
    hv, hm, bv, bm = P.store.trunc(m, K, n)

    # shares of r = 2**m * r_high + sum_j 2**j * b_j
    rv = [h << m for h in hv]
    rm = [h << m for h in hm]
    for j in range(m):
        rv = [r + (b << j) for r, b in zip(rv, bv[j])]
        rm = [r + (b << j) for r, b in zip(rm, bm[j])]
    offset = (1 << (K - 1)) + ((1 << (m - 1)) if rounding else 0)
    if role_a:
        masked_v = [(s + r + offset) % p for s, r in zip(x.v, rv)]
    else:
        masked_v = [(s + r) % p for s, r in zip(x.v, rv)]
    masked_m = [(s + r + key * offset) % p for s, r in zip(x.m, rm)]
    opened = P.open(Shares(masked_v, masked_m, x.session))
    mask_m = (1 << m) - 1
    c = [v & mask_m for v in opened]

    # carry = [c < r_low]; Q_t = prod_{j >= t} (1 - (c_j xor b_j))
    one_v = 1 if role_a else 0
    t = m - 1
    cbit = [(ci >> t) & 1 for ci in c]
    qv = [b if cb else (one_v - b) % p for b, cb in zip(bv[t], cbit)]
    qm = [b if cb else (key - b) % p for b, cb in zip(bm[t], cbit)]
    # term for position m-1: (Q_m - Q_{m-1}) * (1 - c_{m-1}) with Q_m = 1
    carry_v = [0 if cb else (one_v - q) for q, cb in zip(qv, cbit)]
    carry_m = [0 if cb else (key - q) for q, cb in zip(qm, cbit)]
    for t in range(m - 2, -1, -1):
        cbit = [(ci >> t) & 1 for ci in c]
        fv = [b if cb else (one_v - b) % p for b, cb in zip(bv[t], cbit)]
        fm = [b if cb else (key - b) % p for b, cb in zip(bm[t], cbit)]
        nxt = beaver_mul(P, Shares(qv, qm, x.session), Shares(fv, fm, x.session))
        carry_v = [cy if cb else cy + q - q2 for cy, q, q2, cb in zip(carry_v, qv, nxt.v, cbit)]
        carry_m = [cy if cb else cy + q - q2 for cy, q, q2, cb in zip(carry_m, qm, nxt.m, cbit)]
        qv, qm = nxt.v, nxt.m

    base = 1 << (K - 1 - m)
    hi = [(v >> m) - base for v in opened]
    if role_a:
        outv = [(h_pub - h - cy) % p for h_pub, h, cy in zip(hi, hv, carry_v)]
    else:
        outv = [(-h - cy) % p for h, cy in zip(hv, carry_v)]
    outm = [(key * h_pub - h - cy) % p for h_pub, h, cy in zip(hi, hm, carry_m)]
    return Shares(outv, outm, x.session)


def trunc_cost(m: int) -> tuple[int, int]:
    """(openings, triples) consumed per element by :func:`trunc`."""
    return 1 + 2 * (m - 1), m - 1


# -- fixed-point helpers ----------------------------------------------------------

def fixed_mul(P: Party, x: Shares, y: Shares) -> Shares:
    """Product of two fixed-point vectors, rounded to the nearest ulp."""
    fp = P.params
    return trunc(P, beaver_mul(P, x, y), fp.f, fp.M + fp.f)


def fixed_mul_public(P: Party, x: Shares, c: float) -> Shares:
    fp = P.params
    return trunc(P, P.mul_const(x, round_scaled(c, fp.f) % P.p), fp.f, fp.M + fp.f)


def ltz(P: Party, x: Shares) -> Shares:
    """Shares of the bit ``[x < 0]`` for ``|x| < 2**(M-1)`` at any scale."""
    M = P.params.M
    t = trunc(P, x, M - 1, M, rounding=False)  # -1 when negative, 0 otherwise
    return P.neg(t)


def ge_public(P: Party, x: Shares, bound: int) -> Shares:
    """Shares of ``[x >= bound]`` for a public field-encoded integer ``bound``."""
    M = P.params.M
    t = trunc(P, P.add_const(x, (-bound) % P.p), M - 1, M, rounding=False)
    return P.add_const(t, 1)


def sq_distance(P: Party, a: Shares, b: Shares, L: int) -> Shares:
    """Squared distances for N stacked pairs of length-L vectors.

    ``a`` and ``b`` hold ``N * L`` elements (row-major). Returns N shares at
    scale ``2**f``. One truncation per distance, none per coordinate.
    """
    if len(a.v) != len(b.v):
        raise DimensionMismatch(f"length {len(a.v)} vs {len(b.v)}")
    if L <= 0 or len(a.v) % L:
        raise DimensionMismatch(f"{len(a.v)} elements do not split into rows of {L}")
    diff = P.sub(a, b)
    sq = beaver_mul(P, diff, diff)
    p, N = P.p, len(a.v) // L
    sv = [sum(sq.v[i * L:(i + 1) * L]) % p for i in range(N)]
    sm = [sum(sq.m[i * L:(i + 1) * L]) % p for i in range(N)]
    fp = P.params
    return trunc(P, Shares(sv, sm, a.session), fp.f, fp.M + fp.f)


def inner_product(P: Party, w: Shares, k: Shares) -> Shares:
    """Fixed-point dot product with a single truncation."""
    if len(w.v) != len(k.v):
        raise DimensionMismatch(f"length {len(w.v)} vs {len(k.v)}")
    prod = beaver_mul(P, w, k)
    fp = P.params
    return trunc(P, P.sum(prod), fp.f, fp.M + fp.f)


# -- secure exponential ---------------------------------------------------------------

@dataclass(frozen=True)
class ExpConfig:
    """Scaling-and-squaring parameters for ``exp(-u)`` on ``[0, u_max]``.

    The reduced argument is ``u / 2**k`` and must stay at or below 1, so
    ``k >= ceil(log2(u_max))`` is required. The polynomial and the squarings
    run with ``guard`` extra fractional bits, since each squaring doubles
    the rounding error. The last squaring drops back to scale ``2**f``.
    """

    u_max: float = 32.0
    k: int = 6
    d: int = 8
    guard: int = 10

    def __post_init__(self):
        if self.u_max <= 0 or self.d < 1 or self.k < 0 or self.guard < 0:
            raise ValueError("need u_max > 0, d >= 1, k >= 0, guard >= 0")
        if self.k < math.ceil(math.log2(self.u_max)):
            raise ValueError(f"k={self.k} leaves a reduced argument above 1 for u_max={self.u_max}")

    def check(self, params: FixedPointParams):
        if math.exp(-self.u_max) >= 2.0 ** -params.f:
            raise ValueError(f"exp(-{self.u_max}) is not below the resolution 2**-{params.f}")
        if not self.u_max < params.max_abs:
            raise ValueError("u_max is not representable")

    def as_dict(self) -> dict:
        return {"u_max": self.u_max, "k": self.k, "d": self.d, "guard": self.guard}

    def work_bits(self, params: FixedPointParams) -> int:
        """Fractional bits of the internal accumulator."""
        return params.f + self.guard

    def taylor_coeffs(self) -> list[Fraction]:
        return [Fraction((-1) ** j, math.factorial(j)) for j in range(self.d + 1)]


def exp_error_bound(cfg: ExpConfig, f: int) -> float:
    """Analytic bound on |secure_exp_neg(u) - exp(-u)| for u in [0, u_max].

    Covers the Taylor remainder after squaring plus fixed-point rounding:
    each Horner step and each squaring adds at most half an ulp, squaring
    at most doubles the relative error, and the reduced argument itself is
    exact (it only reinterprets the scale).
    """
    ulp = 2.0 ** -(f + cfg.guard)
    # Taylor remainder on t in [0, u_max / 2**k], amplified by 2**k squarings
    tmax = cfg.u_max / 2 ** cfg.k
    taylor = max(_taylor_abs_error(cfg, t) for t in _grid(tmax))
    # Horner rounding: the polynomial value is within (d/2 + 1) ulps
    horner = (cfg.d / 2 + 1) * ulp
    # squaring: e_{j+1} <= 2 e_j + ulp/2 (values <= 1)
    err = horner + 2.0 ** -(f + 1)
    for _ in range(cfg.k):
        err = 2 * err + ulp / 2
    return taylor + err + 2.0 ** -f


def _grid(tmax: float, n: int = 2001):
    return [tmax * i / (n - 1) for i in range(n)]


def _taylor_abs_error(cfg: ExpConfig, t: float) -> float:
    poly = sum(float(c) * t ** j for j, c in enumerate(cfg.taylor_coeffs()))
    rem = t ** (cfg.d + 1) / math.factorial(cfg.d + 1)
    # exp(-t)^(2^k) vs poly^(2^k): derivative bound 2^k * max(base)^(2^k - 1)
    n = 2 ** cfg.k
    base = max(poly, math.exp(-t)) + rem
    return n * base ** (n - 1) * rem


def exp_neg_reference(u: float, cfg: ExpConfig) -> float:
    """Plaintext scaling-and-squaring in double precision (no fixed point)."""
    u = min(max(u, 0.0), cfg.u_max)
    t = u / 2 ** cfg.k
    acc = 0.0
    for c in reversed(cfg.taylor_coeffs()):
        acc = acc * t + float(c)
    for _ in range(cfg.k):
        acc *= acc
    return 0.0 if u >= cfg.u_max else acc


def secure_exp_neg(P: Party, u: Shares, cfg: ExpConfig) -> Shares:
    """Shares of ``exp(-u)`` for shared ``u >= 0`` at scale ``2**f``.

    Arguments at or above ``u_max`` are clamped and the result is forced to zero. The reduced
    argument ``u / 2**k`` is never materialized: the same field value is
    read at scale ``2**(f+k)``, which keeps every bit.
    """
    fp = P.params
    f, M, p = fp.f, fp.M, P.p
    W = cfg.work_bits(fp)
    U = round_scaled(cfg.u_max, f)
    if U >= 1 << (M - 1):
        raise RangeError("u_max is outside the fixed-point range")
    for K in exp_trunc_widths(fp, cfg):
        if K + fp.s + 1 >= P.field.bits:
            raise RangeError(f"prime too small for exp guard bits (K={K})")
    # clamp: b = [u >= u_max]; u_c = u - b * (u - U)
    w = P.add_const(u, (-U) % p)
    b = ge_public(P, u, U)
    uc = P.sub(u, beaver_mul(P, b, w))

    # Horner on y = u_c / 2**k (scale 2**(f+k)); accumulator at scale 2**W
    _, Kh, Ks = exp_trunc_widths(fp, cfg)
    sh = f + cfg.k
    coeffs = [round_scaled(float(c), W) for c in cfg.taylor_coeffs()]
    acc = trunc(P, P.mul_const(uc, coeffs[-1] % p), sh, Kh)
    acc = P.add_const(acc, coeffs[-2] % p)
    for c in reversed(coeffs[:-2]):
        acc = trunc(P, beaver_mul(P, acc, uc), sh, Kh)
        acc = P.add_const(acc, c % p)
    for j in range(cfg.k):
        last = j == cfg.k - 1
        acc = trunc(P, square(P, acc), 2 * W - f if last else W, Ks)
    if cfg.k == 0 and cfg.guard:
        acc = trunc(P, acc, cfg.guard, W + 2)
    return P.sub(acc, beaver_mul(P, acc, b))


def exp_trunc_widths(params: FixedPointParams, cfg: ExpConfig) -> tuple[int, int, int]:
    """Bit bounds K of the clamp, Horner and squaring truncations."""
    W = cfg.work_bits(params)
    return params.M, params.M + W + cfg.k, 2 * W + 2


def exp_cost(params: FixedPointParams, cfg: ExpConfig) -> tuple[int, int, dict]:
    """Per-element (openings, triples, trunc-pairs by key) of :func:`secure_exp_neg`."""
    f, M = params.f, params.M
    opens = tri = 0
    pairs: dict = {}

    def add_trunc(m, K, count=1):
        nonlocal opens, tri
        o, t = trunc_cost(m)
        opens += o * count
        tri += t * count
        pairs[(m, K)] = pairs.get((m, K), 0) + count

    add_trunc(M - 1, M)                                   # clamp comparison
    opens, tri = opens + 2, tri + 1                        # b * w
    _, Kh, Ks = exp_trunc_widths(params, cfg)
    add_trunc(f + cfg.k, Kh, cfg.d)                        # Horner truncations
    opens, tri = opens + 2 * (cfg.d - 1), tri + cfg.d - 1  # Horner products
    opens, tri = opens + 2 * cfg.k, tri + cfg.k            # squarings
    W = cfg.work_bits(params)
    if cfg.k:
        add_trunc(W, Ks, cfg.k - 1)
        add_trunc(2 * W - f, Ks)
    elif cfg.guard:
        add_trunc(cfg.guard, W + 2)
    opens, tri = opens + 2, tri + 1                        # zero the clamped tail
    return opens, tri, pairs

