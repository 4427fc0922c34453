"""Trusted-dealer preprocessing (insecure; for correctness runs and benchmarks).

The dealer knows the global MAC key and every secret it deals. It exists so
that the online numerics and traffic can be studied without the cost of the
oblivious-transfer provider.
"""

from __future__ import annotations

import random
import threading
from typing import Optional

from ..field import STAT_SEC, Field
from .store import TRIPLE, MemoryStore, mask_key, trunc_key

INSECURE_BANNER = "WARNING: dealer-mode preprocessing is INSECURE (a trusted third party knows all secrets)"


class Dealer:
    """Generates matched preprocessing for parties A and B from one seed."""

    def __init__(self, field: Field, seed: Optional[int] = None, s: int = STAT_SEC):
        self.field = field
        self.s = s
        self.rng = random.Random(seed)
        p = field.p
        self.keys = {"A": self._rand(), "B": self._rand()}
        self.delta = (self.keys["A"] + self.keys["B"]) % p

    def _rand(self) -> int:
        return self.rng.getrandbits(self.field.bits) % self.field.p

    def _rands(self, n: int) -> list:
        gb, bits, p = self.rng.getrandbits, self.field.bits, self.field.p
        return [gb(bits) % p for _ in range(n)]

    def _split(self, xs: list) -> tuple[list, list, list, list]:
        """Authenticate and share: returns (vA, mA, vB, mB)."""
        p, d = self.field.p, self.delta
        vb = self._rands(len(xs))
        mb = self._rands(len(xs))
        va = [(x - r) % p for x, r in zip(xs, vb)]
        ma = [(d * x - r) % p for x, r in zip(xs, mb)]
        return va, ma, vb, mb

    def _split_bits(self, bits: list) -> tuple[list, list, list, list]:
        p, d = self.field.p, self.delta
        vb = self._rands(len(bits))
        mb = self._rands(len(bits))
        va = [(x - r) % p for x, r in zip(bits, vb)]
        ma = [((d if x else 0) - r) % p for x, r in zip(bits, mb)]
        return va, ma, vb, mb

    def triples(self, n: int) -> tuple[list, list]:
        p = self.field.p
        a = self._rands(n)
        b = self._rands(n)
        c = [x * y % p for x, y in zip(a, b)]
        colsA, colsB = [], []
        for xs in (a, b, c):
            va, ma, vb, mb = self._split(xs)
            colsA += [va, ma]
            colsB += [vb, mb]
        return colsA, colsB

    def masks(self, owner: str, n: int) -> tuple[list, list]:
        r = self._rands(n)
        va, ma, vb, mb = self._split(r)
        colsA, colsB = [va, ma], [vb, mb]
        (colsA if owner == "A" else colsB).append(r)
        return colsA, colsB

    def trunc(self, m: int, K: int, n: int) -> tuple[list, list]:
        """Masks for exact truncation of K-bit signed values by m bits."""
        gb = self.rng.getrandbits
        hi_bits = K + self.s - m
        high = [gb(hi_bits) for _ in range(n)]
        low = [gb(m) for _ in range(n)]
        va, ma, vb, mb = self._split(high)
        colsA, colsB = [va, ma], [vb, mb]
        for j in range(m):
            bva, bma, bvb, bmb = self._split_bits([(x >> j) & 1 for x in low])
            colsA += [bva, bma]
            colsB += [bvb, bmb]
        return colsA, colsB

    def generate(self, key: tuple, n: int) -> tuple[list, list]:
        if key[0] == "triple":
            return self.triples(n)
        if key[0] == "mask":
            return self.masks(key[1], n)
        if key[0] == "trunc":
            return self.trunc(key[1], key[2], n)
        raise ValueError(f"unknown preprocessing kind {key!r}")

    def stores(self, plan: Optional[dict] = None) -> tuple[MemoryStore, MemoryStore]:
        """Eagerly deal everything in ``plan`` ({key: count}) into two stores."""
        sa = MemoryStore("A", self.field, self.keys["A"])
        sb = MemoryStore("B", self.field, self.keys["B"])
        for key, n in (plan or {}).items():
            if n > 0:
                ca, cb = self.generate(key, n)
                sa.push(key, ca)
                sb.push(key, cb)
        return sa, sb


def dealer_generate(n_triples: int, n_masks: int, n_trunc: int, field: Field, m: int, K: int,
                    seed: Optional[int] = None) -> tuple[MemoryStore, MemoryStore]:
    """Fixed-count convenience wrapper: triples, masks for each owner, pairs."""
    plan = {TRIPLE: n_triples, mask_key("A"): n_masks, mask_key("B"): n_masks,
            trunc_key(m, K): n_trunc}
    return Dealer(field, seed).stores(plan)


class LazyDealer:
    """Deals on demand into both parties' stores (the in-process benchmark path).

    Both parties issue the same sequence of requests, so generation happens
    in program order no matter which thread asks first, and a fixed seed
    makes whole runs reproducible.
    """

    def __init__(self, field: Field, seed: Optional[int] = None, s: int = STAT_SEC):
        self.dealer = Dealer(field, seed, s)
        self._lock = threading.Lock()
        self.stores = {
            "A": MemoryStore("A", field, self.dealer.keys["A"], refill=self._refill),
            "B": MemoryStore("B", field, self.dealer.keys["B"], refill=self._refill),
        }
        self.generated: dict = {}

    def _refill(self, role: str, key: tuple, n: int):
        with self._lock:
            short = n - self.stores[role].available(key)
            if short <= 0:
                return
            ca, cb = self.dealer.generate(key, short)
            self.stores["A"].push(key, ca)
            self.stores["B"].push(key, cb)
            self.generated[key] = self.generated.get(key, 0) + short

    def pair(self) -> tuple[MemoryStore, MemoryStore]:
        return self.stores["A"], self.stores["B"]
