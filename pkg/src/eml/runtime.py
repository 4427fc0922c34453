"""In-process two-party execution over a local socket pair."""

from __future__ import annotations

import secrets
import threading
from typing import Callable, Optional

from .field import Field, FixedPointParams, prime_for
from .preprocessing.dealer import LazyDealer
from .sharing import Party
from .transport import DEFAULT_MAX_FRAME, TrafficMeter, channel_pair


def local_parties(params: FixedPointParams, p: Optional[int] = None, seed: Optional[int] = None,
                  stores=None, record: bool = False, max_frame: int = DEFAULT_MAX_FRAME,
                  link_mbps: Optional[float] = None):
    """Two connected parties sharing a lazily-dealing trusted dealer.

    Pass ``stores=(store_a, store_b)`` to use other preprocessing instead,
    and ``link_mbps`` to run over an emulated link instead of raw loopback.
    """
    field = Field(p or prime_for(params))
    if stores is None:
        stores = LazyDealer(field, seed, params.s).pair()
    ca, cb = channel_pair(link_mbps, meter=None, max_frame=max_frame, record=record)
    ca.meter, cb.meter = TrafficMeter(), TrafficMeter()
    session = secrets.token_bytes(8) if seed is None else seed.to_bytes(8, "little", signed=True)
    A = Party("A", field, params, ca, stores[0], session, record_opens=record)
    B = Party("B", field, params, cb, stores[1], session, record_opens=record)
    return A, B


def run_pair(fn_a: Callable, fn_b: Optional[Callable], A: Party, B: Party, timeout: float = None):
    """Run ``fn_a(A)`` and ``fn_b(B)`` concurrently; re-raise the first failure.

    With ``fn_b=None`` the same function runs on both sides.
    """
    fn_b = fn_b or fn_a
    results: dict = {}
    errors: dict = {}

    def target(role, fn, party):
        try:
            results[role] = fn(party)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[role] = exc
            # unblock the peer if it is waiting on us
            party.channel.abort(type(exc).__name__)

    tb = threading.Thread(target=target, args=("B", fn_b, B), daemon=True)
    tb.start()
    target("A", fn_a, A)
    tb.join(timeout)
    if errors:
        # prefer the root cause over the peer's reaction to our abort frame
        for role in ("A", "B"):
            exc = errors.get(role)
            if exc is not None and type(exc).__name__ not in ("ProtocolAbort", "ConnectionFailure"):
                raise exc
        raise next(iter(errors.values()))
    return results["A"], results["B"]
