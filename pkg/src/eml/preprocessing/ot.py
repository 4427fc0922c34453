"""Oblivious-transfer based preprocessing (no trusted dealer).

Building blocks, bottom up:

* base OT: the Chou-Orlandi "simplest OT" in the 2048-bit MODP group of
  RFC 3526 (quadratic-residue subgroup, generator 2), random-OT flavour;
* IKNP extension of 128 base OTs to any number of random OTs, with an
  AES-CTR PRG and a SHAKE-128 correlation-robust hash;
* Gilboa products: shares of ``x * y`` where the receiver's ``y`` is fed
  bit by bit as OT choices and the sender sends one correction per bit;
* COPE-style MACs: each party's MAC key share is the fixed choice vector
  of one set of base OTs, so authenticating a value costs one correction
  per key bit and no further public-key work.

Triples are generated in pairs sharing ``b`` and checked by sacrifice
under a joint random challenge; any inconsistency raises
:class:`CorrelationCheckFailed`. Random bits for truncation masks are
XORs of one bit from each party. Bit validity is not proven.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
from typing import Optional, Sequence

import gmpy2
import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from ..errors import CorrelationCheckFailed, HandshakeFailure, MacCheckFailed
from ..field import STAT_SEC, Field, FixedPointParams
from ..transport import MSG_OT, Channel
from .store import TRIPLE, MemoryStore

log = logging.getLogger(__name__)

# RFC 3526, group 14
MODP_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)
MODP_G = 2
ELEMENT_BYTES = 256
EXPONENT_BITS = 256
KAPPA = 128
SEED_BYTES = 16
BATCH = 1024


def _send(ch: Channel, data: bytes):
    cap = ch.max_payload
    for i in range(0, max(len(data), 1), cap):
        ch.send_frame(MSG_OT, data[i:i + cap])


def _recv(ch: Channel, n: int) -> bytes:
    parts, got = [], 0
    while True:
        chunk = ch.recv_expect(MSG_OT)
        parts.append(chunk)
        got += len(chunk)
        if got >= n:
            break
    data = b"".join(parts)
    if len(data) != n:
        raise HandshakeFailure(f"OT message of {len(data)} bytes, expected {n}")
    return data


def check_element(x: int) -> int:
    """Reject anything outside the prime-order subgroup (including 0, 1, p - 1)."""
    if not 1 < x < MODP_P - 1 or gmpy2.legendre(x, MODP_P) != 1:
        raise HandshakeFailure("malformed group element in base OT")
    return x


def _kdf(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big") + part)
    return h.digest()[:SEED_BYTES]


def _el(x) -> bytes:
    return int(x).to_bytes(ELEMENT_BYTES, "big")


# -- base OT ------------------------------------------------------------------------

def random_ot_send(ch: Channel, n: int) -> list:
    """Sender side of ``n`` random OTs; returns ``[(k0, k1), ...]``."""
    a = gmpy2.mpz(secrets.randbits(EXPONENT_BITS) | 1)
    A = gmpy2.powmod(MODP_G, a, MODP_P)
    _send(ch, _el(A))
    data = _recv(ch, n * ELEMENT_BYTES)
    A_inv = gmpy2.invert(A, MODP_P)
    keys = []
    for i in range(n):
        B = check_element(int.from_bytes(data[i * ELEMENT_BYTES:(i + 1) * ELEMENT_BYTES], "big"))
        tag = i.to_bytes(4, "big") + _el(A) + _el(B)
        k0 = _kdf(tag, _el(gmpy2.powmod(B, a, MODP_P)))
        k1 = _kdf(tag, _el(gmpy2.powmod(B * A_inv % MODP_P, a, MODP_P)))
        keys.append((k0, k1))
    return keys


def random_ot_receive(ch: Channel, choices: Sequence[int]) -> list:
    """Receiver side; returns the key matching each choice bit."""
    A = check_element(int.from_bytes(_recv(ch, ELEMENT_BYTES), "big"))
    out, msgs = [], []
    for i, c in enumerate(choices):
        b = gmpy2.mpz(secrets.randbits(EXPONENT_BITS) | 1)
        B = gmpy2.powmod(MODP_G, b, MODP_P)
        if c:
            B = B * A % MODP_P
        msgs.append(_el(B))
        tag = i.to_bytes(4, "big") + _el(A) + _el(B)
        out.append(_kdf(tag, _el(gmpy2.powmod(A, b, MODP_P))))
    _send(ch, b"".join(msgs))
    return out


def _stream(key: bytes, nonce: int, nbytes: int) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce.to_bytes(16, "big"))).encryptor()
    return enc.update(bytes(nbytes))


def base_ot(ch: Channel, role: str, messages: Optional[Sequence[tuple]] = None,
            choices: Optional[Sequence[int]] = None) -> Optional[list]:
    """Chosen-message 1-out-of-2 OT.

    The sender passes ``messages=[(m0, m1), ...]`` (equal-length bytes) and
    gets ``None``; the receiver passes ``choices`` and gets ``m_choice``.
    """
    if role == "sender":
        keys = random_ot_send(ch, len(messages))
        body = []
        for (m0, m1), (k0, k1) in zip(messages, keys):
            if len(m0) != len(m1):
                raise ValueError("OT messages must have equal length")
            body.append(len(m0).to_bytes(4, "big"))
            body.append(bytes(x ^ y for x, y in zip(m0, _stream(k0, 0, len(m0)))))
            body.append(bytes(x ^ y for x, y in zip(m1, _stream(k1, 0, len(m1)))))
        blob = b"".join(body)
        _send(ch, len(blob).to_bytes(8, "big"))
        _send(ch, blob)
        return None
    keys = random_ot_receive(ch, choices)
    size = int.from_bytes(_recv(ch, 8), "big")
    blob = _recv(ch, size)
    out, off = [], 0
    for c, k in zip(choices, keys):
        n = int.from_bytes(blob[off:off + 4], "big")
        e0, e1 = blob[off + 4:off + 4 + n], blob[off + 4 + n:off + 4 + 2 * n]
        off += 4 + 2 * n
        out.append(bytes(x ^ y for x, y in zip(e1 if c else e0, _stream(k, 0, n))))
    return out


# -- IKNP extension --------------------------------------------------------------------

def _transpose(M: np.ndarray, n: int) -> np.ndarray:
    """kappa x ceil(n/8) packed columns -> n x kappa/8 packed rows."""
    bits = np.unpackbits(M, axis=1)[:, :n]
    return np.packbits(bits.T, axis=1)


def _expand(seeds: Sequence[bytes], nonce: int, nb: int) -> np.ndarray:
    return np.frombuffer(b"".join(_stream(k, nonce, nb) for k in seeds), dtype=np.uint8).reshape(
        len(seeds), nb)


class IknpSender:
    """Extension sender: learns both pads of every OT (base-OT receiver role)."""

    def __init__(self, ch: Channel):
        self.ch = ch
        self.s = np.array([secrets.randbits(1) for _ in range(KAPPA)], dtype=np.uint8)
        self.s_row = np.packbits(self.s)
        self.seeds = random_ot_receive(ch, self.s.tolist())
        self.ctr = 0

    def extend(self, n: int) -> tuple[int, np.ndarray, np.ndarray]:
        nb = (n + 7) // 8
        U = np.frombuffer(_recv(self.ch, KAPPA * nb), dtype=np.uint8).reshape(KAPPA, nb)
        Q = _expand(self.seeds, self.ctr << 64, nb) ^ (U * self.s[:, None])
        ctr = self.ctr
        self.ctr += 1
        rows = _transpose(Q, n)
        return ctr, rows, rows ^ self.s_row


class IknpReceiver:
    """Extension receiver: picks one pad per OT by its choice bit."""

    def __init__(self, ch: Channel):
        self.ch = ch
        self.seeds = random_ot_send(ch, KAPPA)
        self.ctr = 0

    def extend(self, choices: np.ndarray) -> tuple[int, np.ndarray]:
        n = len(choices)
        nb = (n + 7) // 8
        r = np.packbits(np.asarray(choices, dtype=np.uint8))
        T = _expand([k0 for k0, _ in self.seeds], self.ctr << 64, nb)
        U = T ^ _expand([k1 for _, k1 in self.seeds], self.ctr << 64, nb) ^ r[None, :]
        _send(self.ch, U.tobytes())
        ctr = self.ctr
        self.ctr += 1
        return ctr, _transpose(T, n)


def _pads(field: Field, tweak: bytes, rows: np.ndarray, k: int) -> list:
    """Hash each OT row to ``k`` field elements."""
    w = field.nbytes + 8
    p = field.p
    out = []
    for i, row in enumerate(rows):
        d = hashlib.shake_128(tweak + i.to_bytes(4, "big") + row.tobytes()).digest(k * w)
        out.append([int.from_bytes(d[j * w:(j + 1) * w], "little") % p for j in range(k)])
    return out


def _field_stream(field: Field, key: bytes, nonce: int, n: int) -> list:
    w = field.nbytes + 8
    d = _stream(key, nonce, n * w)
    p = field.p
    return [int.from_bytes(d[i * w:(i + 1) * w], "little") % p for i in range(n)]


def _from_bits(parts: Sequence[int]) -> int:
    """sum_j 2**j * parts[j]."""
    acc = 0
    for z in reversed(parts):
        acc = (acc << 1) + z
    return acc


# -- the provider -------------------------------------------------------------------------

class OTProvider:
    """Two-party preprocessing over one channel; both sides run the same calls.

    ``tamper`` injects a fault on this party: ``{"target": "gilboa"}`` skews
    the product corrections of one value, ``{"target": "cope"}`` skews the
    MAC corrections of one value. Both are caught by the sacrifice check.
    """

    def __init__(self, role: str, field: Field, channel: Channel, params: FixedPointParams,
                 s: int = STAT_SEC, tamper: Optional[dict] = None):
        self.role = role
        self.field = field
        self.ch = channel
        self.params = params
        self.s = s
        self.tamper = tamper
        self.key = secrets.randbelow(field.p)
        self.ready = False
        self.stats = {"triples": 0, "bits": 0, "values": 0, "ots": 0}

    # setup: one IKNP and one COPE instance per direction
    def setup(self):
        nbits = self.field.bits
        key_bits = [(self.key >> j) & 1 for j in range(nbits)]
        with self.ch.meter.phase("preprocessing"):
            if self.role == "A":
                self.iknp_s = IknpSender(self.ch)      # A sends products to B
                self.iknp_r = IknpReceiver(self.ch)
                self.cope_v = random_ot_send(self.ch, nbits)   # A's values, B's key
                self.cope_d = random_ot_receive(self.ch, key_bits)
            else:
                self.iknp_r = IknpReceiver(self.ch)
                self.iknp_s = IknpSender(self.ch)
                self.cope_d = random_ot_receive(self.ch, key_bits)
                self.cope_v = random_ot_send(self.ch, nbits)
        self.key_bits = key_bits
        self.cope_ctr = 0
        self.ready = True

    def _forge(self, target: str) -> Optional[int]:
        t = self.tamper
        if t is None or t.get("target") != target:
            return None
        self.tamper = None
        return t.get("index", 0)

    # -- Gilboa products ------------------------------------------------------------

    def _gilboa(self, xs: list, ys: list, width: int) -> list:
        """Shares of ``x_peer * y_mine`` and ``x_mine * y_peer`` for each vector.

        ``xs`` is a list of k vectors held as sender values; ``ys`` holds the
        receiver values (below ``2**width``). Returns k vectors of shares of
        ``x^A y^B + x^B y^A``.
        """
        p = self.field.p
        k = len(xs)
        n = len(ys)
        choices = np.array([(y >> j) & 1 for y in ys for j in range(width)], dtype=np.uint8)
        self.stats["ots"] += 2 * n * width

        def as_receiver(ctr, rows):
            pads = _pads(self.field, b"G%d" % ctr, rows, k)
            d = self.field.unpack(_recv(self.ch, n * width * k * self.field.nbytes))
            out = [[0] * n for _ in range(k)]
            for i in range(n):
                for l in range(k):
                    parts = []
                    for j in range(width):
                        o = i * width + j
                        z = pads[o][l]
                        if choices[o]:
                            z += d[o * k + l]
                        parts.append(z)
                    out[l][i] = _from_bits(parts) % p
            return out

        def as_sender(ctr, q0, q1):
            p0 = _pads(self.field, b"G%d" % ctr, q0, k)
            p1 = _pads(self.field, b"G%d" % ctr, q1, k)
            bad = self._forge("gilboa")
            d = []
            out = [[0] * n for _ in range(k)]
            for i in range(n):
                for l in range(k):
                    out[l][i] = (-_from_bits([p0[i * width + j][l] for j in range(width)])) % p
                for j in range(width):
                    o = i * width + j
                    for l in range(k):
                        corr = p0[o][l] - p1[o][l] + xs[l][i]
                        if bad is not None and i == bad % n and l == 0:
                            corr += 1
                        d.append(corr % p)
            _send(self.ch, self.field.pack(d))
            return out

        # A: send U, recv U, send d, recv d; B mirrors
        if self.role == "A":
            ctr_r, t_rows = self.iknp_r.extend(choices)
            ctr_s, q0, q1 = self.iknp_s.extend(n * width)
            mine_s = as_sender(ctr_s, q0, q1)
            mine_r = as_receiver(ctr_r, t_rows)
        else:
            ctr_s, q0, q1 = self.iknp_s.extend(n * width)
            ctr_r, t_rows = self.iknp_r.extend(choices)
            mine_r = as_receiver(ctr_r, t_rows)
            mine_s = as_sender(ctr_s, q0, q1)
        return [[(a + b) % p for a, b in zip(mine_s[l], mine_r[l])] for l in range(k)]

    # -- MACs ---------------------------------------------------------------------------

    def authenticate(self, xs: list) -> list:
        """MAC shares for a shared vector whose local value shares are ``xs``."""
        p, f = self.field.p, self.field
        n, nbits = len(xs), f.bits
        nonce = self.cope_ctr << 64
        self.cope_ctr += 1
        self.stats["values"] += n

        def as_value_holder():
            bad = self._forge("cope")
            t0 = [_field_stream(f, k0, nonce, n) for k0, _ in self.cope_v]
            t1 = [_field_stream(f, k1, nonce, n) for _, k1 in self.cope_v]
            u = []
            for j in range(nbits):
                row = [(a - b + x) % p for a, b, x in zip(t0[j], t1[j], xs)]
                if bad is not None:
                    row[bad % n] = (row[bad % n] + 1) % p
                u.extend(row)
            _send(self.ch, f.pack(u))
            return [(-_from_bits([t0[j][i] for j in range(nbits)])) % p for i in range(n)]

        def as_key_holder():
            t = [_field_stream(f, k, nonce, n) for k in self.cope_d]
            u = f.unpack(_recv(self.ch, nbits * n * f.nbytes))
            out = []
            for i in range(n):
                parts = [t[j][i] + (u[j * n + i] if self.key_bits[j] else 0) for j in range(nbits)]
                out.append(_from_bits(parts) % p)
            return out

        if self.role == "A":
            s1 = as_value_holder()
            s2 = as_key_holder()
        else:
            s2 = as_key_holder()
            s1 = as_value_holder()
        return [(self.key * x + a + b) % p for x, a, b in zip(xs, s1, s2)]

    # -- correlated randomness --------------------------------------------------------------

    def _checker(self):
        from ..sharing import Party
        return Party(self.role, self.field, self.params, self.ch,
                     MemoryStore(self.role, self.field, self.key), b"preprocessing")

    def triples(self, n: int) -> list:
        """``n`` checked triples as store columns (av, am, bv, bm, cv, cm)."""
        from ..sharing import Shares
        p, rb = self.field.p, secrets.randbelow
        a = [rb(p) for _ in range(n)]
        a2 = [rb(p) for _ in range(n)]
        b = [rb(p) for _ in range(n)]
        cross, cross2 = self._gilboa([a, a2], b, self.field.bits)
        c = [(x * y + z) % p for x, y, z in zip(a, b, cross)]
        c2 = [(x * y + z) % p for x, y, z in zip(a2, b, cross2)]
        macs = self.authenticate(a + a2 + b + c + c2)
        am, a2m, bm, cm, c2m = (macs[i * n:(i + 1) * n] for i in range(5))

        # sacrifice (a2, b, c2) to check (a, b, c) under a joint challenge
        P = self._checker()
        t = int.from_bytes(P._coin(), "little") % p
        rho_v = [(t * x - y) % p for x, y in zip(a, a2)]
        rho_m = [(t * x - y) % p for x, y in zip(am, a2m)]
        rho = P.open(Shares(rho_v, rho_m, P.session))
        zv = [(t * x - y - r * w) % p for x, y, r, w in zip(c, c2, rho, b)]
        zm = [(t * x - y - r * w) % p for x, y, r, w in zip(cm, c2m, rho, bm)]
        zero = P.open(Shares(zv, zm, P.session))
        try:
            P.mac_check()
        except MacCheckFailed as exc:
            raise CorrelationCheckFailed("MAC check failed during triple sacrifice") from exc
        if any(zero):
            raise CorrelationCheckFailed(f"{sum(1 for z in zero if z)} of {n} triples failed the sacrifice check")
        self.stats["triples"] += n
        return [a, am, b, bm, c, cm]

    def random_bits(self, n: int) -> tuple[list, list]:
        """Shared uniform bits ``beta_A xor beta_B`` with MACs."""
        p = self.field.p
        beta = [secrets.randbits(1) for _ in range(n)]
        # the cross term already counts both directions: 2 * beta_A * beta_B
        (cross,) = self._gilboa([beta], beta, 1)
        v = [(x - z) % p for x, z in zip(beta, cross)]
        self.stats["bits"] += n
        return v, self.authenticate(v)

    def masks(self, owner: str, n: int) -> list:
        p = self.field.p
        clear = [secrets.randbelow(p) for _ in range(n)] if owner == self.role else None
        v = clear if clear is not None else [0] * n
        cols = [list(v), self.authenticate(v)]
        if clear is not None:
            cols.append(clear)
        return cols

    def trunc(self, m: int, K: int, n: int) -> list:
        # each side contributes one bit less so the sum stays below 2**(K+s-m)
        hi_bits = K + self.s - m - 1
        high = [secrets.randbits(hi_bits) for _ in range(n)]
        cols = [high, self.authenticate(high)]
        for _ in range(m):
            cols += list(self.random_bits(n))
        return cols

    def generate(self, key: tuple, n: int) -> list:
        if key[0] == "triple":
            return self.triples(n)
        if key[0] == "mask":
            return self.masks(key[1], n)
        if key[0] == "trunc":
            return self.trunc(key[1], key[2], n)
        raise ValueError(f"unknown preprocessing kind {key!r}")

    def fill(self, store: MemoryStore, plan: dict, batch: int = BATCH) -> MemoryStore:
        """Generate everything in ``plan`` ({key: count}) into ``store``."""
        if not self.ready:
            self.setup()
        store.set_mac_key(self.key)
        with self.ch.meter.phase("preprocessing"):
            for key in sorted(plan, key=repr):
                left = plan[key]
                while left > 0:
                    n = min(batch, left)
                    store.push(key, self.generate(key, n))
                    left -= n
        log.info("OT preprocessing done: %s", self.stats)
        return store


def ot_fill_pair(A_prov: "OTProvider", B_prov: "OTProvider", plan: dict):
    """Run both providers in-process (B in a thread); returns the two stores."""
    import threading

    stores = {"A": MemoryStore("A", A_prov.field), "B": MemoryStore("B", B_prov.field)}
    errors = {}

    def run(prov):
        try:
            prov.fill(stores[prov.role], plan)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[prov.role] = exc
            prov.ch.abort(type(exc).__name__)

    t = threading.Thread(target=run, args=(B_prov,), daemon=True)
    t.start()
    run(A_prov)
    t.join()
    # prefer the root cause over the peer's reaction to our abort frame
    for exc in errors.values():
        if type(exc).__name__ not in ("ProtocolAbort", "ConnectionFailure"):
            raise exc
    if errors:
        raise next(iter(errors.values()))
    return stores["A"], stores["B"]


__all__ = [
    "IknpReceiver", "IknpSender", "OTProvider", "base_ot", "check_element", "ot_fill_pair",
    "random_ot_receive", "random_ot_send", "TRIPLE",
]
