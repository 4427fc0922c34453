"""Preprocessing stores: FIFO queues of correlated randomness per kind.

Kinds and the columns each item carries (one party's view):

* ``("triple",)``: a, a_mac, b, b_mac, c, c_mac
* ``("mask", owner)``: r, r_mac and, on the owner's side only, r in the clear
* ``("trunc", m, K)``: r_high, r_high_mac, then m pairs (bit_j, bit_j_mac)
  for the low bits of ``r = 2**m * r_high + sum_j 2**j * bit_j``

Items are handed out exactly once; asking for more than is left raises
:class:`PreprocessingExhausted`.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..errors import PreprocessingExhausted, ProtocolAbort
from ..field import Field

TRIPLE = ("triple",)


def mask_key(owner: str) -> tuple:
    return ("mask", owner)


def trunc_key(m: int, K: int) -> tuple:
    return ("trunc", m, K)


def n_columns(key: tuple, holds_clear: bool = False) -> int:
    if key[0] == "triple":
        return 6
    if key[0] == "mask":
        return 3 if holds_clear else 2
    if key[0] == "trunc":
        return 2 + 2 * key[1]
    raise ValueError(f"unknown preprocessing kind {key!r}")


class _Queue:
    __slots__ = ("cols", "pos")

    def __init__(self, ncols: int):
        self.cols = [[] for _ in range(ncols)]
        self.pos = 0

    def available(self) -> int:
        return len(self.cols[0]) - self.pos if self.cols else 0

    def push(self, cols):
        if self.pos and self.pos * 2 > len(self.cols[0]):
            self.cols = [c[self.pos:] for c in self.cols]
            self.pos = 0
        for dst, src in zip(self.cols, cols):
            dst.extend(src)

    def take(self, n: int) -> list:
        i = self.pos
        self.pos = i + n
        return [c[i:i + n] for c in self.cols]


@dataclass
class BeaverTriple:
    """A scalar triple; ``take`` hands out its shares and forbids reuse."""

    a: tuple
    b: tuple
    c: tuple
    used: bool = False

    def take(self):
        if self.used:
            raise RuntimeError("Beaver triple consumed twice")
        self.used = True
        return self.a, self.b, self.c


@dataclass
class TruncationPair:
    """Scalar view of one truncation item (high part plus low-bit shares)."""

    m: int
    K: int
    r_high: tuple
    bits: list = field(default_factory=list)
    used: bool = False

    def take(self):
        if self.used:
            raise RuntimeError("truncation pair consumed twice")
        self.used = True
        return self.r_high, self.bits


class MemoryStore:
    """In-memory store for one party.

    ``refill(role, key, n)`` (optional) is called when a queue holds fewer
    than ``n`` items and must top it up to at least ``n``.
    """

    def __init__(self, role: str, field: Field, key_share: Optional[int] = None,
                 refill: Optional[Callable] = None):
        self.role = role
        self.field = field
        self._key = key_share
        self._queues: dict = {}
        self.refill = refill
        self.consumed: dict = {}
        # a lazy dealer pushes into this store from the peer's thread
        self._lock = threading.Lock()

    def mac_key(self) -> int:
        if self._key is None:
            raise PreprocessingExhausted("no MAC key share was provisioned for this party")
        return self._key

    def set_mac_key(self, key: int):
        self._key = key

    def _queue(self, key: tuple) -> _Queue:
        q = self._queues.get(key)
        if q is None:
            # setdefault is atomic, so a concurrent refill cannot orphan a queue
            q = self._queues.setdefault(
                key, _Queue(n_columns(key, key[0] == "mask" and key[1] == self.role)))
        return q

    def push(self, key: tuple, cols: list):
        q = self._queue(key)
        if len(cols) != len(q.cols):
            raise ValueError(f"{key!r} expects {len(q.cols)} columns, got {len(cols)}")
        with self._lock:
            q.push(cols)

    def available(self, key: tuple) -> int:
        q = self._queues.get(key)
        return q.available() if q else 0

    def inventory(self) -> dict:
        return {k: q.available() for k, q in self._queues.items() if q.available()}

    def take(self, key: tuple, n: int) -> list:
        q = self._queue(key)
        if q.available() < n and self.refill is not None:
            self.refill(self.role, key, n)  # must not hold our lock: it pushes here
        with self._lock:
            if q.available() < n:
                raise PreprocessingExhausted(
                    f"need {n} x {key!r} but only {q.available()} remain; generate more with "
                    f"`eml dealer` (or a larger --queries) and pass it via --preproc-file")
            self.consumed[key] = self.consumed.get(key, 0) + n
            return q.take(n)

    # typed accessors used by the online phase

    def triples(self, n: int):
        return self.take(TRIPLE, n)

    def masks(self, owner: str, n: int):
        cols = self.take(mask_key(owner), n)
        clear = cols[2] if owner == self.role else None
        return cols[0], cols[1], clear

    def trunc(self, m: int, K: int, n: int):
        cols = self.take(trunc_key(m, K), n)
        bits_v = cols[2::2]
        bits_m = cols[3::2]
        return cols[0], cols[1], bits_v, bits_m

    def take_triple(self) -> BeaverTriple:
        av, am, bv, bm, cv, cm = self.triples(1)
        return BeaverTriple((av[0], am[0]), (bv[0], bm[0]), (cv[0], cm[0]))

    def take_trunc(self, m: int, K: int) -> TruncationPair:
        hv, hm, bv, bm = self.trunc(m, K, 1)
        return TruncationPair(m, K, (hv[0], hm[0]), [(v[0], w[0]) for v, w in zip(bv, bm)])


# -- persistence --------------------------------------------------------------

FILE_MAGIC = b"EMLP"
FILE_VERSION = 1
REC_KEY, REC_TRIPLES, REC_MASKS, REC_TRUNC = 1, 2, 3, 4
_REC = struct.Struct(">IB")
CHUNK = 1 << 14


def save_store(store: MemoryStore, path) -> None:
    """Write a store as length-prefixed records (layout in docs/wire.md)."""
    fld = store.field
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC + struct.pack("<BBH", FILE_VERSION, ord(store.role), fld.nbytes))
        fh.write(fld.p.to_bytes(fld.nbytes, "little"))

        def record(rtype, body):
            fh.write(_REC.pack(len(body) + 1, rtype))
            fh.write(body)

        record(REC_KEY, fld.to_bytes(store.mac_key()))
        for key, q in store._queues.items():
            n = q.available()
            for start in range(0, n, CHUNK):
                cnt = min(CHUNK, n - start)
                lo, hi = q.pos + start, q.pos + start + cnt
                elems = b"".join(fld.pack(c[lo:hi]) for c in q.cols)
                if key[0] == "triple":
                    record(REC_TRIPLES, struct.pack("<I", cnt) + elems)
                elif key[0] == "mask":
                    has_clear = len(q.cols) == 3
                    record(REC_MASKS, struct.pack("<BBI", ord(key[1]), has_clear, cnt) + elems)
                else:
                    record(REC_TRUNC, struct.pack("<HHI", key[1], key[2], cnt) + elems)


def load_store(path, refill=None) -> MemoryStore:
    path = Path(path)
    if not path.exists():
        raise PreprocessingExhausted(
            f"preprocessing file {path} not found; create it with `eml dealer`")
    data = path.read_bytes()
    if data[:4] != FILE_MAGIC:
        raise ProtocolAbort(f"{path} is not a preprocessing file")
    version, role, nbytes = struct.unpack_from("<BBH", data, 4)
    if version != FILE_VERSION:
        raise ProtocolAbort(f"unsupported preprocessing file version {version}")
    off = 8
    p = int.from_bytes(data[off:off + nbytes], "little")
    off += nbytes
    fld = Field(p)
    store = MemoryStore(chr(role), fld, refill=refill)
    while off < len(data):
        length, rtype = _REC.unpack_from(data, off)
        body = data[off + 5:off + 4 + length]
        off += 4 + length
        if len(body) != length - 1:
            raise ProtocolAbort("truncated preprocessing record")
        if rtype == REC_KEY:
            store.set_mac_key(fld.from_bytes(body))
            continue
        if rtype == REC_TRIPLES:
            (cnt,), rest, key, ncols = struct.unpack_from("<I", body), body[4:], TRIPLE, 6
        elif rtype == REC_MASKS:
            owner, has_clear, cnt = struct.unpack_from("<BBI", body)
            rest, key, ncols = body[6:], mask_key(chr(owner)), 3 if has_clear else 2
        elif rtype == REC_TRUNC:
            m, K, cnt = struct.unpack_from("<HHI", body)
            rest, key, ncols = body[8:], trunc_key(m, K), 2 + 2 * m
        else:
            raise ProtocolAbort(f"unknown preprocessing record type {rtype}")
        vals = fld.unpack(rest)
        if len(vals) != cnt * ncols:
            raise ProtocolAbort("preprocessing record length does not match its count")
        store.push(key, [vals[i * cnt:(i + 1) * cnt] for i in range(ncols)])
    return store

