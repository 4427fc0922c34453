"""Authenticated additive secret sharing between two parties.

A shared vector is held as a :class:`Shares` object on each side: one list of
value shares and one list of MAC shares. For a secret ``x`` the invariants are

    v_A + v_B = x        and        m_A + m_B = delta * x      (mod p)

where ``delta = delta_A + delta_B`` is the global MAC key. Each party only
ever holds its own ``delta_i``.

Both parties run the same program (SPMD style); the :class:`Party` object
knows which side it is and sends or receives accordingly. Openings are
recorded and verified later in one batched MAC check.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
from dataclasses import dataclass
from operator import mul
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    MacCheckFailed,
    ProtocolAbort,
    SessionMismatch,
)
from .field import Field, FixedPointParams
from .transport import (
    MSG_COMMIT,
    MSG_OPEN,
    MSG_REVEAL,
    MSG_SHARE,
    Channel,
)

log = logging.getLogger(__name__)

COMMIT_NONCE = 32
COIN_BYTES = 16
CHECK_COEFF_BITS = 63


@dataclass
class Shares:
    """One party's shares of a vector of secrets."""

    v: list
    m: list
    session: Optional[bytes] = None

    def __len__(self):
        return len(self.v)

    def __getitem__(self, idx) -> "Shares":
        if isinstance(idx, slice):
            return Shares(self.v[idx], self.m[idx], self.session)
        return Shares([self.v[idx]], [self.m[idx]], self.session)

    def item(self, i: int, owner: str) -> "AuthShare":
        return AuthShare(self.v[i], self.m[i], owner, self.session)

    @staticmethod
    def concat(parts: Sequence["Shares"]) -> "Shares":
        v, m = [], []
        session = parts[0].session if parts else None
        for s in parts:
            if s.session != session:
                raise SessionMismatch("cannot mix shares of different sessions")
            v.extend(s.v)
            m.extend(s.m)
        return Shares(v, m, session)


@dataclass(frozen=True)
class AuthShare:
    """A single authenticated share: value share, MAC share and the holder."""

    value_share: int
    mac_share: int
    owner: str
    session: Optional[bytes] = None

    def as_shares(self) -> Shares:
        return Shares([self.value_share], [self.mac_share], self.session)


def commit(payload: bytes) -> tuple[bytes, bytes]:
    """Hash commitment; returns (commitment, opening)."""
    nonce = secrets.token_bytes(COMMIT_NONCE)
    return hashlib.sha256(nonce + payload).digest(), nonce + payload


def verify_commit(commitment: bytes, opening: bytes) -> bytes:
    if len(opening) < COMMIT_NONCE or hashlib.sha256(opening).digest() != commitment:
        raise MacCheckFailed("peer's commitment does not match its reveal")
    return opening[COMMIT_NONCE:]


class Party:
    """One side of an authenticated-sharing session.

    ``store`` supplies correlated randomness (see :mod:`eml.preprocessing`).
    ``tamper`` is a test hook: a dict with ``target`` ("open" or "mac"),
    ``delta`` and optionally ``index`` and ``skip``; it lets ``skip``
    openings pass, then forges the next one once.
    """

    def __init__(self, role: str, field: Field, params: FixedPointParams, channel: Channel,
                 store, session: bytes = b"", record_opens: bool = False):
        if role not in ("A", "B"):
            raise ValueError("role must be 'A' or 'B'")
        self.role = role
        self.peer = "B" if role == "A" else "A"
        self.field = field
        self.p = field.p
        self.params = params
        self.channel = channel
        self.store = store
        self.key = store.mac_key()
        self.session = session
        self.aborted = False
        self.tamper: Optional[dict] = None
        self._pending_x: list = []
        self._pending_m: list = []
        self.opened_count = 0
        self.mac_checks = 0
        self.opens: Optional[list] = [] if record_opens else None

    # -- message helpers -------------------------------------------------

    def _ensure_live(self):
        if self.aborted:
            raise ProtocolAbort("session was aborted after a failed check")

    def send_elements(self, msg_type: int, values: Sequence[int]):
        data = self.field.pack(values)
        cap = self.channel.max_payload
        if len(data) <= cap:
            self.channel.send_frame(msg_type, data)
            return
        step = cap - cap % self.field.nbytes
        for i in range(0, len(data), step):
            self.channel.send_frame(msg_type, data[i:i + step])

    def recv_elements(self, msg_type: int, n: int) -> list:
        want = n * self.field.nbytes
        data = self.channel.recv_expect(msg_type)
        if len(data) < want:
            parts = [data]
            got = len(data)
            while got < want:
                chunk = self.channel.recv_expect(msg_type)
                parts.append(chunk)
                got += len(chunk)
            data = b"".join(parts)
        if len(data) != want:
            raise ProtocolAbort(f"expected {n} elements, received {len(data)} bytes")
        return self.field.unpack(data)

    def exchange(self, msg_type: int, values: Sequence[int]) -> list:
        """Send our vector and receive the peer's (A sends first)."""
        if self.role == "A":
            self.send_elements(msg_type, values)
            return self.recv_elements(msg_type, len(values))
        theirs = self.recv_elements(msg_type, len(values))
        self.send_elements(msg_type, values)
        return theirs

    def exchange_bytes(self, msg_type: int, payload: bytes) -> bytes:
        ch = self.channel
        if self.role == "A":
            ch.send_frame(msg_type, payload)
            return ch.recv_expect(msg_type)
        theirs = ch.recv_expect(msg_type)
        ch.send_frame(msg_type, payload)
        return theirs

    # -- linear, local operations -----------------------------------------

    def _same(self, x: Shares, y: Shares):
        if x.session != y.session:
            raise SessionMismatch("shares come from different sessions")
        if len(x.v) != len(y.v):
            raise DimensionMismatch(f"length {len(x.v)} vs {len(y.v)}")

    def add(self, x: Shares, y: Shares) -> Shares:
        self._same(x, y)
        p = self.p
        return Shares([(a + b) % p for a, b in zip(x.v, y.v)],
                      [(a + b) % p for a, b in zip(x.m, y.m)], x.session)

    def sub(self, x: Shares, y: Shares) -> Shares:
        self._same(x, y)
        p = self.p
        return Shares([(a - b) % p for a, b in zip(x.v, y.v)],
                      [(a - b) % p for a, b in zip(x.m, y.m)], x.session)

    def neg(self, x: Shares) -> Shares:
        p = self.p
        return Shares([(-a) % p for a in x.v], [(-a) % p for a in x.m], x.session)

    def add_const(self, x: Shares, c) -> Shares:
        """Add a public constant (scalar or per-element list of field ints)."""
        p, k = self.p, self.key
        cs = c if isinstance(c, (list, tuple)) else [c] * len(x.v)
        if len(cs) != len(x.v):
            raise DimensionMismatch("constant vector length differs")
        v = [(a + b) % p for a, b in zip(x.v, cs)] if self.role == "A" else list(x.v)
        m = [(a + k * b) % p for a, b in zip(x.m, cs)]
        return Shares(v, m, x.session)

    def mul_const(self, x: Shares, c) -> Shares:
        p = self.p
        if isinstance(c, (list, tuple)):
            if len(c) != len(x.v):
                raise DimensionMismatch("constant vector length differs")
            return Shares([a * b % p for a, b in zip(x.v, c)],
                          [a * b % p for a, b in zip(x.m, c)], x.session)
        return Shares([a * c % p for a in x.v], [a * c % p for a in x.m], x.session)

    def constant(self, values: Sequence[int]) -> Shares:
        """Trivial sharing of public values."""
        p, k = self.p, self.key
        v = [a % p for a in values] if self.role == "A" else [0] * len(values)
        return Shares(v, [k * a % p for a in values], self.session)

    def sum(self, x: Shares) -> Shares:
        return Shares([sum(x.v) % self.p], [sum(x.m) % self.p], x.session)

    # -- inputs and openings ----------------------------------------------

    def input(self, owner: str, values: Optional[Sequence[int]], n: int) -> Shares:
        """Secret-share ``n`` field values held by ``owner``.

        The owner sends ``x - r`` for a preprocessed mask ``r`` it knows in the
        clear; the other side learns only that uniformly masked difference.
        """
        self._ensure_live()
        rv, rm, clear = self.store.masks(owner, n)
        p, k = self.p, self.key
        if owner == self.role:
            if values is None or len(values) != n:
                raise DimensionMismatch(f"owner must supply {n} values")
            eps = [(x - r) % p for x, r in zip(values, clear)]
            self.send_elements(MSG_SHARE, eps)
        else:
            eps = self.recv_elements(MSG_SHARE, n)
        if self.role == "A":
            v = [(r + e) % p for r, e in zip(rv, eps)]
        else:
            v = rv
        m = [(r + k * e) % p for r, e in zip(rm, eps)]
        return Shares(v, m, self.session)

    def _forge(self, target: str, vals: list) -> list:
        t = self.tamper
        if t is None or t.get("target") != target:
            return vals
        if t.get("skip", 0) > 0:
            t["skip"] -= 1
            return vals
        self.tamper = None
        vals = list(vals)
        i = t.get("index", 0) % max(1, len(vals))
        vals[i] = (vals[i] + t["delta"]) % self.p
        log.debug("forged %s share at position %d", target, i)
        return vals

    def open(self, x: Shares) -> list:
        """Reveal a shared vector to both parties (MAC-checked later)."""
        self._ensure_live()
        mine = self._forge("open", x.v)
        theirs = self.exchange(MSG_OPEN, mine)
        p = self.p
        vals = [(a + b) % p for a, b in zip(mine, theirs)]
        self._pending_x.extend(vals)
        self._pending_m.extend(self._forge("mac", x.m))
        self.opened_count += len(vals)
        if self.opens is not None:
            self.opens.append(list(vals))
        return vals

    def open_to(self, x: Shares, receiver: str) -> Optional[list]:
        """Reveal to ``receiver`` only.

        The value is opened under the receiver's private input mask, so the
        other side sees ``x + r`` with ``r`` uniform. Everything is MAC-checked
        before the receiver unmasks.
        """
        rv, rm, clear = self.store.masks(receiver, len(x.v))
        masked = self.add(x, Shares(rv, rm, x.session))
        opened = self.open(masked)
        self.mac_check()
        if self.role != receiver:
            return None
        p = self.p
        return [(a - r) % p for a, r in zip(opened, clear)]

    # -- batched MAC check --------------------------------------------------

    def _coin(self) -> bytes:
        mine = secrets.token_bytes(COIN_BYTES)
        c, opening = commit(mine)
        theirs_c = self.exchange_bytes(MSG_COMMIT, c)
        theirs = verify_commit(theirs_c, self.exchange_bytes(MSG_REVEAL, opening))
        if len(theirs) != COIN_BYTES:
            raise MacCheckFailed("malformed coin reveal")
        return bytes(a ^ b for a, b in zip(mine, theirs))

    def mac_check(self):
        """Verify every value opened since the last check, then forget them.

        Both parties draw the same random 63-bit coefficients from a jointly
        committed seed, fold the opened values and their own MAC shares, and
        exchange commitments to ``sigma_i = gamma_i - delta_i * a``. The sum
        of both sigmas is zero unless some opening was forged.
        """
        self._ensure_live()
        xs, ms = self._pending_x, self._pending_m
        self._pending_x, self._pending_m = [], []
        if not xs:
            return
        p = self.p
        seed = int.from_bytes(self._coin(), "little")
        rng = np.random.default_rng(seed)
        coeffs = rng.integers(0, 1 << CHECK_COEFF_BITS, size=len(xs), dtype=np.int64).tolist()
        a = sum(map(mul, coeffs, xs)) % p
        gamma = sum(map(mul, coeffs, ms)) % p
        sigma = (gamma - self.key * a) % p
        c, opening = commit(self.field.to_bytes(sigma))
        theirs_c = self.exchange_bytes(MSG_COMMIT, c)
        theirs = verify_commit(theirs_c, self.exchange_bytes(MSG_REVEAL, opening))
        self.mac_checks += 1
        if (sigma + int.from_bytes(theirs, "little")) % p != 0:
            self.aborted = True
            log.warning("MAC check failed; session aborted")
            raise MacCheckFailed("MAC check failed: an opened value was tampered with")

    @property
    def pending(self) -> int:
        return len(self._pending_x)
