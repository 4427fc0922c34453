"""Length-prefixed framing over a stream socket, the parameter handshake and
per-phase traffic accounting.

Wire layout of a frame::

    u32 length (big endian, = len(payload) + 1) | u8 msg_type | payload

The meter counts ``5 + len(payload)`` bytes per frame in the phase that is
current when the frame crosses the socket.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from .errors import (
    AgreementMismatch,
    ConnectionFailure,
    FrameTooLarge,
    ProtocolAbort,
    VersionMismatch,
)

log = logging.getLogger(__name__)

MSG_HANDSHAKE = 0x01
MSG_SHARE = 0x02
MSG_OPEN = 0x03
MSG_OT = 0x04
MSG_ABORT = 0x05
MSG_REVEAL = 0x06
MSG_COMMIT = 0x07
MSG_CONTROL = 0x08

MSG_NAMES = {
    MSG_HANDSHAKE: "handshake",
    MSG_SHARE: "share",
    MSG_OPEN: "open",
    MSG_OT: "ot",
    MSG_ABORT: "abort",
    MSG_REVEAL: "reveal",
    MSG_COMMIT: "commit",
    MSG_CONTROL: "control",
}

HEADER = struct.Struct(">IB")
HEADER_SIZE = HEADER.size  # 5
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
PROTOCOL_VERSION = 1
PHASES = ("handshake", "preprocessing", "online")


@dataclass
class PhaseStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    seconds: float = 0.0

    def copy(self) -> "PhaseStats":
        return PhaseStats(self.bytes_sent, self.bytes_received, self.messages_sent,
                          self.messages_received, self.seconds)


@dataclass
class TrafficStats:
    """Snapshot of the meter; one :class:`PhaseStats` per protocol phase."""

    phases: dict = field(default_factory=lambda: {p: PhaseStats() for p in PHASES})

    def __getitem__(self, phase) -> PhaseStats:
        return self.phases[phase]

    @property
    def bytes_sent(self) -> int:
        return sum(s.bytes_sent for s in self.phases.values())

    @property
    def bytes_received(self) -> int:
        return sum(s.bytes_received for s in self.phases.values())

    def minus(self, earlier: "TrafficStats") -> "TrafficStats":
        out = TrafficStats()
        for name, s in self.phases.items():
            e = earlier.phases.get(name, PhaseStats())
            out.phases[name] = PhaseStats(
                s.bytes_sent - e.bytes_sent, s.bytes_received - e.bytes_received,
                s.messages_sent - e.messages_sent, s.messages_received - e.messages_received,
                s.seconds - e.seconds)
        return out

    def as_dict(self) -> dict:
        return {name: vars(s).copy() for name, s in self.phases.items()}


class TrafficMeter:
    def __init__(self):
        self._stats = TrafficStats()
        self.current = "handshake"
        self._since = None

    def _tick(self):
        if self._since is not None:
            now = time.perf_counter()
            self._stats.phases[self.current].seconds += now - self._since
            self._since = now

    @contextmanager
    def phase(self, name: str):
        if name not in self._stats.phases:
            raise ValueError(f"unknown phase {name!r}")
        self._tick()
        prev, prev_since = self.current, self._since
        self.current = name
        self._since = time.perf_counter()
        try:
            yield
        finally:
            self._tick()
            self.current = prev
            self._since = time.perf_counter() if prev_since is not None else None

    def sent(self, nbytes: int):
        s = self._stats.phases[self.current]
        s.bytes_sent += nbytes
        s.messages_sent += 1

    def received(self, nbytes: int):
        s = self._stats.phases[self.current]
        s.bytes_received += nbytes
        s.messages_received += 1

    @property
    def total(self) -> int:
        """Bytes sent plus received so far, over all phases."""
        return self._stats.bytes_sent + self._stats.bytes_received

    def snapshot(self) -> TrafficStats:
        self._tick()
        return TrafficStats({k: v.copy() for k, v in self._stats.phases.items()})


@dataclass
class LinkModel:
    """Virtual network link: each frame occupies the sender's link for
    ``latency + size / bandwidth`` seconds.

    Departure times are scheduled on an absolute clock, so oversleeping one
    frame does not delay the next one further.
    """

    mbps: float
    latency: float = 0.0

    def __post_init__(self):
        if not self.mbps > 0 or self.latency < 0:
            raise ValueError("link needs a positive rate and a non-negative latency")
        self._free_at = 0.0

    def transmit(self, nbytes: int):
        now = time.perf_counter()
        start = max(now, self._free_at)
        self._free_at = start + nbytes * 8 / (self.mbps * 1e6)
        wait = self._free_at + self.latency - now
        if wait > 0:
            time.sleep(wait)


class Channel:
    """One side of a framed, metered, in-order byte stream.

    ``record=True`` keeps every frame as ``(direction, msg_type, payload)``
    for transcript audits. ``link`` (a :class:`LinkModel`) throttles sends.
    """

    def __init__(self, sock: socket.socket, meter: Optional[TrafficMeter] = None,
                 max_frame: int = DEFAULT_MAX_FRAME, record: bool = False,
                 link: Optional[LinkModel] = None):
        self.sock = sock
        self.meter = meter if meter is not None else TrafficMeter()
        self.max_frame = max_frame
        self.transcript: Optional[list] = [] if record else None
        self.link = link
        self.closed = False
        self.aborted = False

    @property
    def max_payload(self) -> int:
        return self.max_frame - 1

    def send_frame(self, msg_type: int, payload: bytes = b""):
        if self.closed or self.aborted:
            raise ConnectionFailure("channel is closed")
        length = len(payload) + 1
        if length > self.max_frame:
            raise FrameTooLarge(f"frame of {length} bytes exceeds cap {self.max_frame}")
        try:
            self.sock.sendall(HEADER.pack(length, msg_type) + payload if len(payload) < 65536
                              else HEADER.pack(length, msg_type))
            if len(payload) >= 65536:
                self.sock.sendall(payload)
        except OSError as exc:
            raise ConnectionFailure(f"send failed: {exc}") from exc
        if self.link is not None:
            self.link.transmit(HEADER_SIZE + len(payload))
        self.meter.sent(HEADER_SIZE + len(payload))
        if self.transcript is not None:
            self.transcript.append(("sent", msg_type, bytes(payload)))

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(view[got:], n - got)
            except OSError as exc:
                raise ConnectionFailure(f"receive failed: {exc}") from exc
            if k == 0:
                raise ConnectionFailure(f"peer closed the connection after {got} of {n} bytes")
            got += k
        return bytes(buf)

    def recv_frame(self) -> tuple[int, bytes]:
        if self.closed:
            raise ConnectionFailure("channel is closed")
        length, msg_type = HEADER.unpack(self._recv_exact(HEADER_SIZE))
        if length < 1:
            raise ConnectionFailure("malformed frame length 0")
        if length > self.max_frame:
            raise FrameTooLarge(f"incoming frame of {length} bytes exceeds cap {self.max_frame}")
        payload = self._recv_exact(length - 1) if length > 1 else b""
        self.meter.received(HEADER_SIZE + len(payload))
        if self.transcript is not None:
            self.transcript.append(("received", msg_type, payload))
        return msg_type, payload

    def recv_expect(self, msg_type: int) -> bytes:
        got, payload = self.recv_frame()
        if got == MSG_ABORT:
            self.aborted = True
            raise ProtocolAbort(payload.decode("utf-8", "replace") or "peer aborted")
        if got != msg_type:
            raise ConnectionFailure(
                f"expected {MSG_NAMES.get(msg_type, msg_type)} frame, got {MSG_NAMES.get(got, got)}")
        return payload

    def abort(self, reason: str = ""):
        """Best-effort abort notice; afterwards nothing else is sent."""
        if not (self.closed or self.aborted):
            try:
                self.send_frame(MSG_ABORT, reason.encode("utf-8")[:1024])
            except Exception:  # noqa: BLE001 - peer may already be gone
                pass
        self.aborted = True

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass


def channel_pair(link_mbps: Optional[float] = None, latency: float = 0.0,
                 **kwargs) -> tuple[Channel, Channel]:
    """Two connected channels over a local socket pair (the virtual network).

    With ``link_mbps`` each direction gets its own emulated link.
    """
    a, b = socket.socketpair()
    if link_mbps is None:
        return Channel(a, **kwargs), Channel(b, **kwargs)
    return (Channel(a, link=LinkModel(link_mbps, latency), **kwargs),
            Channel(b, link=LinkModel(link_mbps, latency), **kwargs))


def parse_addr(addr: Optional[str], default_port: int = 14000) -> tuple[str, int]:
    addr = addr or os.environ.get("EML_BIND") or f"127.0.0.1:{default_port}"
    host, _, port = addr.rpartition(":")
    if not host:
        host, port = port, str(default_port)
    return host, int(port)


def listen(addr: Optional[str] = None, timeout: Optional[float] = None, **kwargs) -> Channel:
    host, port = parse_addr(addr)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        conn, _ = srv.accept()
    except OSError as exc:
        raise ConnectionFailure(f"cannot accept on {host}:{port}: {exc}") from exc
    finally:
        srv.close()
    conn.settimeout(None)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Channel(conn, **kwargs)


def connect(addr: Optional[str] = None, retries: int = 50, delay: float = 0.1, **kwargs) -> Channel:
    host, port = parse_addr(addr)
    last = None
    for _ in range(max(1, retries)):
        try:
            sock = socket.create_connection((host, port))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Channel(sock, **kwargs)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionFailure(f"cannot connect to {host}:{port}: {last}")


def _canonical(terms: dict) -> dict:
    return json.loads(json.dumps(terms, sort_keys=True))


def _compare(ours: dict, theirs: dict):
    if theirs.get("version") != ours.get("version"):
        raise VersionMismatch(ours.get("version"), theirs.get("version"))
    for key in sorted(set(ours) | set(theirs)):
        if key == "role":
            continue
        if ours.get(key) != theirs.get(key):
            raise AgreementMismatch(key, ours.get(key), theirs.get(key))


def handshake(channel: Channel, role: str, terms: dict) -> dict:
    """Agree on session terms; A speaks first.

    ``terms`` holds everything both sides must share (field prime, fixed-point
    layout, representation length, sigma, exp configuration). The protocol
    version is added here. Any disagreement aborts before data flows.
    """
    ours = _canonical({**terms, "version": terms.get("version", PROTOCOL_VERSION)})
    blob = json.dumps({**ours, "role": role}, sort_keys=True).encode()
    with channel.meter.phase("handshake"):
        if role == "A":
            channel.send_frame(MSG_HANDSHAKE, blob)
            theirs = _decode_terms(channel.recv_expect(MSG_HANDSHAKE))
            _compare(ours, theirs)
        else:
            theirs = _decode_terms(channel.recv_expect(MSG_HANDSHAKE))
            try:
                _compare(ours, theirs)
            except AgreementMismatch as exc:
                channel.abort(f"mismatch:{exc.field}")
                raise
            channel.send_frame(MSG_HANDSHAKE, blob)
    log.info("handshake complete as %s (version %s)", role, ours["version"])
    return ours


def _decode_terms(payload: bytes) -> dict:
    try:
        terms = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConnectionFailure(f"malformed handshake frame: {exc}") from exc
    if not isinstance(terms, dict):
        raise ConnectionFailure("malformed handshake frame")
    return terms
