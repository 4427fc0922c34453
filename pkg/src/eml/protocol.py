"""Encrypted kernel ridge regression prediction between a model owner and a querier.

Party A (Alice) holds a trained :class:`~eml.krr.KrrModel`; party B (Bob)
holds query representations. After the handshake A secret-shares the scaled
training vectors, the weights and the label offset once per session. Each
query then runs

    u_i = ||x_i - q||^2            (sigma folded into the inputs)
    k_i = exp(-u_i)                (scaling and squaring)
    y   = sum_i alpha_i k_i + offset

entirely on shares, and only ``y`` is opened, to B alone.

The cost model at the bottom mirrors the round structure exactly, so the
predicted byte count equals what the traffic meter records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, RangeError, SplitMismatch
from .field import FixedPointParams, round_scaled
from .krr import KrrModel, mae, predict_plaintext
from .mpc import ExpConfig, beaver_mul, secure_exp_neg, sq_distance, trunc, trunc_cost
from .preprocessing.store import TRIPLE, mask_key, trunc_key
from .sharing import COMMIT_NONCE, COIN_BYTES, Party, Shares
from .transport import (
    DEFAULT_MAX_FRAME,
    HEADER_SIZE,
    MSG_CONTROL,
    PROTOCOL_VERSION,
    TrafficStats,
    handshake,
)

log = logging.getLogger(__name__)

# Per-party input bound: ||x||^2 below 2**17 keeps ||x - q||^2 below 2**19.
NORM_BOUND_LOG2 = 17

CTRL_QUERY = b"Q"
CTRL_END = b"E"


# -- encoding -----------------------------------------------------------------------

def kernel_scale(sigma: float) -> float:
    """Inputs are multiplied by this before encoding so that ||x - q||^2 = d / (2 sigma^2)."""
    return 1.0 / (math.sqrt(2.0) * sigma)


def encode_rows(X, params: FixedPointParams, scale: float = 1.0) -> list:
    """Signed fixed-point integers (not reduced mod p) for each row."""
    f = params.f
    bound = params.max_abs
    out = []
    for row in np.atleast_2d(np.asarray(X, dtype=float)) * scale:
        if not np.all(np.abs(row) < bound):
            raise RangeError("a representation entry exceeds the fixed-point range")
        if float(np.dot(row, row)) >= 2.0 ** NORM_BOUND_LOG2:
            raise RangeError(
                f"scaled vector norm^2 {float(np.dot(row, row)):.3g} exceeds 2**{NORM_BOUND_LOG2}; "
                "increase sigma")
        out.append([round_scaled(float(v), f) for v in row])
    return out


def encode_values(xs, params: FixedPointParams) -> list:
    f = params.f
    out = []
    for v in np.asarray(xs, dtype=float).ravel():
        if not abs(v) < params.max_abs:
            raise RangeError(f"a value of magnitude {abs(v):.3g} exceeds the fixed-point range")
        out.append(round_scaled(float(v), f))
    return out


@dataclass
class EncodedModel:
    rows: list
    alpha: list
    offset: int
    params: FixedPointParams

    @property
    def N(self) -> int:
        return len(self.rows)


def encode_model(model: KrrModel, params: FixedPointParams) -> EncodedModel:
    """Fixed-point model; checks that the weighted kernel sum cannot overflow."""
    alpha = encode_values(model.alpha, params)
    if sum(abs(a) for a in alpha) >= 1 << (params.M - 2 + params.f):
        raise RangeError("sum of |alpha| exceeds the fixed-point range; increase lambda or P")
    return EncodedModel(encode_rows(model.X, params, kernel_scale(model.sigma)), alpha,
                        encode_values([model.y_offset], params)[0], params)


def encode_query(XQ, sigma: float, params: FixedPointParams) -> list:
    return encode_rows(XQ, params, kernel_scale(sigma))


# -- session terms -----------------------------------------------------------------------

def session_terms(p: int, params: FixedPointParams, L: int, sigma: float, cfg: ExpConfig) -> dict:
    """Everything both parties must agree on before any data flows."""
    return {"version": PROTOCOL_VERSION, "p": str(p), "f": params.f, "M": params.M, "s": params.s,
            "L": int(L), "sigma": float(sigma), "exp": cfg.as_dict()}


def session_id(terms: dict) -> bytes:
    blob = json.dumps(terms, sort_keys=True).encode()
    return hashlib.sha256(b"eml-session" + blob).digest()[:8]


# -- the two-party pipeline ----------------------------------------------------------

def _share_model(P: Party, enc: Optional[EncodedModel], N: int, L: int):
    p = P.p
    flat = [v % p for row in enc.rows for v in row] if enc else None
    X = P.input("A", flat, N * L)
    w = [a % p for a in enc.alpha] + [enc.offset % p] if enc else None
    aw = P.input("A", w, N + 1)
    return X, aw[:N], aw[N:]


def _predict_one(P: Party, X: Shares, alpha: Shares, offset: Shares, q: Optional[list],
                 N: int, L: int, cfg: ExpConfig) -> Optional[float]:
    """One query on shares; returns the decoded prediction on B, None on A."""
    fp, p = P.params, P.p
    qs = P.input("B", [v % p for v in q] if q is not None else None, L)
    Q = Shares(qs.v * N, qs.m * N, qs.session)
    u = sq_distance(P, X, Q, L)
    k = secure_exp_neg(P, u, cfg)
    s = P.sum(beaver_mul(P, alpha, k))
    y = P.add(trunc(P, s, fp.f, fp.M + fp.f), offset)
    out = P.open_to(y, "B")
    if out is None:
        return None
    return P.field.signed(out[0]) / (1 << fp.f)


@dataclass
class PredictionReport:
    """What B learns from an encrypted run, plus run statistics."""

    predictions: np.ndarray
    plaintext: Optional[np.ndarray] = None
    delta: Optional[float] = None
    mae: Optional[float] = None
    traffic: Optional[TrafficStats] = None
    wall_time: list = field(default_factory=list)
    N: int = 0
    L: int = 0
    P: int = 0
    query_bytes: list = field(default_factory=list)
    setup_bytes: int = 0
    config: dict = field(default_factory=dict)

    @property
    def bytes_per_query(self) -> float:
        return float(np.mean(self.query_bytes)) if self.query_bytes else 0.0

    @property
    def time_per_query(self) -> float:
        return float(np.mean(self.wall_time)) if self.wall_time else 0.0

    def as_dict(self) -> dict:
        d = {"N": self.N, "L": self.L, "P": self.P,
             "predictions": [float(v) for v in self.predictions],
             "delta": self.delta, "mae": self.mae,
             "wall_time": list(self.wall_time), "query_bytes": list(self.query_bytes),
             "setup_bytes": self.setup_bytes, "config": self.config}
        if self.plaintext is not None:
            d["plaintext"] = [float(v) for v in self.plaintext]
        if self.traffic is not None:
            d["traffic"] = self.traffic.as_dict()
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.as_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("index,prediction,plaintext,wall_time,bytes\n")
            for i, v in enumerate(self.predictions):
                pt = "" if self.plaintext is None else repr(float(self.plaintext[i]))
                fh.write(f"{i},{float(v)!r},{pt},{self.wall_time[i]:.6f},{self.query_bytes[i]}\n")


class AliceSession:
    """Model owner's side of a session. Serves any number of queries.

    A session is bound to one training split: loading a second model with a
    different split fingerprint raises :class:`SplitMismatch`.
    """

    def __init__(self, party: Party, cfg: ExpConfig = ExpConfig()):
        self.party = party
        self.cfg = cfg
        self.split_id: Optional[str] = None
        self.served = 0
        self._shared = None

    def load_model(self, model: KrrModel):
        if self.split_id is not None and model.split_id != self.split_id:
            raise SplitMismatch("this session already served a model from another training split")
        self.split_id = model.split_id
        P = self.party
        enc = encode_model(model, P.params)
        with P.channel.meter.phase("online"):
            P.channel.send_frame(MSG_CONTROL, json.dumps({"N": enc.N}).encode())
            self._shared = _share_model(P, enc, enc.N, model.L)
        self.N, self.L = enc.N, model.L
        log.info("model shared: N=%d L=%d", self.N, self.L)

    def serve(self) -> int:
        """Answer queries until B ends the session; returns the count."""
        P = self.party
        with P.channel.meter.phase("online"):
            while True:
                msg = P.channel.recv_expect(MSG_CONTROL)
                if msg == CTRL_END:
                    break
                if msg != CTRL_QUERY:
                    raise DimensionMismatch(f"unexpected control message {msg[:16]!r}")
                _predict_one(P, *self._shared, None, self.N, self.L, self.cfg)
                self.served += 1
                log.info("query %d served", self.served)
        return self.served


class BobSession:
    """Querier's side: submits scaled queries and decodes the revealed predictions."""

    def __init__(self, party: Party, sigma: float, L: int, cfg: ExpConfig = ExpConfig()):
        self.party = party
        self.sigma = sigma
        self.L = L
        self.cfg = cfg
        self.N = None
        self._shared = None

    def receive_model(self):
        P = self.party
        with P.channel.meter.phase("online"):
            info = json.loads(P.channel.recv_expect(MSG_CONTROL).decode())
            self.N = int(info["N"])
            self._shared = _share_model(P, None, self.N, self.L)

    def predict(self, XQ) -> tuple[list, list, list]:
        """Predictions, per-query wall times and per-query link bytes."""
        P = self.party
        XQ = np.atleast_2d(np.asarray(XQ, dtype=float))
        if XQ.shape[1] != self.L:
            raise DimensionMismatch(f"query length {XQ.shape[1]} vs agreed L={self.L}")
        queries = encode_query(XQ, self.sigma, P.params)
        meter = P.channel.meter
        preds, times, nbytes = [], [], []
        with meter.phase("online"):
            for q in queries:
                before = meter.total
                t0 = time.perf_counter()
                P.channel.send_frame(MSG_CONTROL, CTRL_QUERY)
                preds.append(_predict_one(P, *self._shared, q, self.N, self.L, self.cfg))
                times.append(time.perf_counter() - t0)
                nbytes.append(meter.total - before)
        return preds, times, nbytes

    def close(self):
        with self.party.channel.meter.phase("online"):
            self.party.channel.send_frame(MSG_CONTROL, CTRL_END)


def run_local(model: KrrModel, XQ, params: FixedPointParams, cfg: ExpConfig = ExpConfig(),
              seed: Optional[int] = None, y_true=None, stores=None, tamper: Optional[dict] = None,
              record: bool = False, parties=None,
              link_mbps: Optional[float] = None) -> PredictionReport:
    """Both parties in one process over a socket pair (dealer preprocessing by default).

    ``tamper`` is installed on A's party (see :meth:`Party._forge`). With
    ``record`` both parties keep every opened vector in ``party.opens``;
    pass ``parties`` to inspect them afterwards. ``link_mbps`` runs over an
    emulated link of that rate instead of raw loopback.
    """
    from .runtime import local_parties, run_pair

    XQ = np.atleast_2d(np.asarray(XQ, dtype=float))
    if XQ.shape[1] != model.L:
        raise DimensionMismatch(f"query length {XQ.shape[1]} vs model length {model.L}")
    A, B = parties or local_parties(params, seed=seed, stores=stores, record=record,
                                   link_mbps=link_mbps)
    terms = session_terms(A.p, params, model.L, model.sigma, cfg)
    A.tamper = dict(tamper) if tamper else None
    alice = AliceSession(A, cfg)
    bob = BobSession(B, model.sigma, model.L, cfg)

    def side_a(_):
        handshake(A.channel, "A", terms)
        alice.load_model(model)
        alice.serve()

    def side_b(_):
        handshake(B.channel, "B", terms)
        before = B.channel.meter.total
        bob.receive_model()
        setup = B.channel.meter.total - before
        out = bob.predict(XQ)
        bob.close()
        return out, setup

    _, ((preds, times, nbytes), setup) = run_pair(side_a, side_b, A, B)
    preds = np.array(preds, dtype=float)
    ref = predict_plaintext(model, XQ)
    report = PredictionReport(
        preds, ref, mae(preds, ref), None if y_true is None else mae(preds, y_true),
        B.channel.meter.snapshot(), times, model.N, model.L, params.P, nbytes, setup,
        {"f": params.f, "M": params.M, "s": params.s, "p_bits": A.field.bits,
         "sigma": model.sigma, "exp": cfg.as_dict(), "seed": seed, "link_mbps": link_mbps})
    return report


# -- cost model -------------------------------------------------------------------------

def _trunc_rounds(n: int, m: int) -> list:
    return [n] + [2 * n] * (m - 1)


def query_rounds(N: int, L: int, params: FixedPointParams, cfg: ExpConfig) -> list:
    """Sizes (in field elements) of every opening round of one query."""
    f, M = params.f, params.M
    W = cfg.work_bits(params)
    rounds = [2 * N * L]                                  # squared differences
    rounds += _trunc_rounds(N, f)                         # distance truncation
    rounds += _trunc_rounds(N, M - 1) + [2 * N]           # clamp bit and b * w
    rounds += _trunc_rounds(N, f + cfg.k)                 # first Horner step
    for _ in range(cfg.d - 1):
        rounds += [2 * N] + _trunc_rounds(N, f + cfg.k)
    for j in range(cfg.k):
        rounds += [2 * N] + _trunc_rounds(N, 2 * W - f if j == cfg.k - 1 else W)
    if cfg.k == 0 and cfg.guard:
        rounds += _trunc_rounds(N, cfg.guard)
    rounds += [2 * N]                                      # zero the clamped tail
    rounds += [2 * N]                                      # alpha * k
    rounds += _trunc_rounds(1, f)                          # final truncation
    rounds += [1]                                          # open_to(B)
    return rounds


def _frame_bytes(payload: int, max_frame: int, nbytes: int) -> int:
    """Bytes on the wire for one logical message of ``payload`` bytes."""
    cap = max_frame - 1  # the length field also covers the type byte
    if payload <= cap:
        return HEADER_SIZE + payload
    step = cap - cap % nbytes
    return HEADER_SIZE * math.ceil(payload / step) + payload


@dataclass
class CostModel:
    """Closed-form online cost of one session (both directions of the link)."""

    N: int
    L: int
    openings_per_query: int
    rounds_per_query: int
    triples_per_query: int
    trunc_pairs_per_query: dict
    bytes_per_query: int
    setup_bytes: int
    element_bytes: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d["trunc_pairs_per_query"] = {f"{m},{K}": n for (m, K), n in self.trunc_pairs_per_query.items()}
        return d


def cost_model(N: int, L: int, params: FixedPointParams, cfg: ExpConfig = ExpConfig(),
               nbytes: Optional[int] = None, max_frame: int = DEFAULT_MAX_FRAME) -> CostModel:
    """Openings, preprocessing and exact link bytes per query.

    Openings per query are ``(2 L + c_exp + 2) N + c_0`` where ``c_exp`` is
    the per-element cost of the distance truncation plus the exponential.
    """
    if nbytes is None:
        from .field import prime_for
        nbytes = (prime_for(params).bit_length() + 7) // 8
    rounds = query_rounds(N, L, params, cfg)

    def exchange(n):  # both parties send n elements
        return 2 * _frame_bytes(n * nbytes, max_frame, nbytes)

    total = HEADER_SIZE + len(CTRL_QUERY)                    # B's query request
    total += _frame_bytes(L * nbytes, max_frame, nbytes)      # B's masked input
    total += sum(exchange(n) for n in rounds)
    # MAC check: coin commit + reveal, then sigma commit + reveal (both sides)
    digest = hashlib.sha256().digest_size
    total += 2 * (HEADER_SIZE + digest) + 2 * (HEADER_SIZE + COMMIT_NONCE + COIN_BYTES)
    total += 2 * (HEADER_SIZE + digest) + 2 * (HEADER_SIZE + COMMIT_NONCE + nbytes)

    setup = HEADER_SIZE + len(json.dumps({"N": N}).encode())
    setup += _frame_bytes(N * L * nbytes, max_frame, nbytes)
    setup += _frame_bytes((N + 1) * nbytes, max_frame, nbytes)

    plan = query_plan(N, L, params, cfg)
    pairs = {key[1:]: n for key, n in plan.items() if key[0] == "trunc"}
    return CostModel(N, L, sum(rounds), len(rounds), plan[TRIPLE], pairs, total, setup, nbytes)


def query_plan(N: int, L: int, params: FixedPointParams, cfg: ExpConfig = ExpConfig()) -> dict:
    """Preprocessing consumed by one query, keyed like the store."""
    from .mpc import exp_cost

    f, M = params.f, params.M
    _, tri_exp, pairs_exp = exp_cost(params, cfg)
    plan = {TRIPLE: N * L + N * tri_exp + N, mask_key("B"): L + 1}
    _, t = trunc_cost(f)
    plan[TRIPLE] += N * t + t
    dist = trunc_key(f, M + f)
    plan[dist] = N + 1                                     # distances + final sum
    for (m, K), n in pairs_exp.items():
        key = trunc_key(m, K)
        plan[key] = plan.get(key, 0) + N * n
    return plan


def session_plan(N: int, L: int, queries: int, params: FixedPointParams,
                 cfg: ExpConfig = ExpConfig()) -> dict:
    """Preprocessing for model sharing plus ``queries`` predictions."""
    plan = {key: n * queries for key, n in query_plan(N, L, params, cfg).items()}
    plan[mask_key("A")] = N * L + N + 1
    return plan


__all__ = [
    "AliceSession", "BobSession", "CostModel", "EncodedModel", "PredictionReport",
    "cost_model", "encode_model", "encode_query", "encode_rows", "encode_values",
    "kernel_scale", "query_plan", "query_rounds", "run_local", "session_id", "session_plan",
    "session_terms",
]
