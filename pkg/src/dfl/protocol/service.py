"""Third-party service, data-center client and the transports between them."""

import logging
import math
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from dfl import _random
from dfl.fairfilter import FairIndexSet, hard_filter, reference_hypothesis, soft_filter
from dfl.protocol import wire

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
ENV_ADDR = "DFL_TP_ADDR"
TO_TP, TO_DC = "dc->tp", "tp->dc"


class ProtocolError(RuntimeError):
    pass


class RemoteError(ProtocolError):
    """The third party answered with an ERROR frame."""

    def __init__(self, code, reason):
        super().__init__(f"third party error {code}: {reason}")
        self.code = code
        self.reason = reason


class NoFairHypotheses(ProtocolError):
    """The third party certified none of the submitted hypotheses."""

    def __init__(self, fair_set):
        super().__init__(f"no fair hypotheses among {fair_set.m} ({fair_set.policy}, "
                         f"threshold {fair_set.threshold})")
        self.fair_set = fair_set


@dataclass(frozen=True)
class Policy:
    kind: str = "hard"
    rho: float = math.nan  # NaN: use the third party's default
    sigma2: float = math.nan
    seed: int = None  # soft policy acceptance stream; None: third party's seed
    star_row: int = -1  # soft policy reference: -1 is the zero hypothesis

    @classmethod
    def hard(cls, rho):
        return cls("hard", rho=float(rho))

    @classmethod
    def soft(cls, sigma2, seed=None, star_row=-1):
        return cls("soft", sigma2=float(sigma2), seed=seed, star_row=star_row)

    @property
    def param(self):
        return self.rho if self.kind == "hard" else self.sigma2


def parse_address(address):
    if address is None:
        address = os.environ.get(ENV_ADDR)
        if not address:
            raise ProtocolError(f"no third-party address given and {ENV_ADDR} unset")
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        return host or "127.0.0.1", int(port)
    return tuple(address)


# --------------------------------------------------------------------------
# Third party
# --------------------------------------------------------------------------


def apply_policy(preds, s, policy, param, seed, star_row):
    """The certification a third party runs for one PREDICTIONS request."""
    if policy == "hard":
        return hard_filter(preds, s, param)
    if star_row < 0:
        star = np.zeros(preds.shape[1])
    else:
        star = reference_hypothesis(preds[star_row], s)
    return soft_filter(preds, star, param, seed)


@dataclass
class PolicyDefaults:
    rho: float = 0.1
    sigma2: float = 1.0


class TPSession:
    """Frame-level state machine for one data-center session.

    ``handle`` consumes a decoded frame and returns the reply frames. The
    sensitive vector never leaves this object except through the index set.
    """

    def __init__(self, s, defaults=None, seed=0):
        self._s = np.asarray(s, dtype=float)
        self.defaults = defaults or PolicyDefaults()
        self.seed = seed
        self.session = None
        self.closed = False
        self._pending = None

    def _reply(self, kind, payload=b""):
        return wire.Frame(kind, self.session or bytes(16), payload)

    def fail(self, code, reason):
        self.closed = True
        log.info("tp: closing session with error %d: %s", code, reason)
        return [self._reply(wire.ERROR, wire.error_payload(code, reason))]

    def handle(self, frame):
        if self.session is None:
            self.session = frame.session
        elif frame.session != self.session:
            return self.fail(wire.ERR_STATE, "session id changed mid-session")
        try:
            if frame.kind == wire.HELLO:
                wire.decode_hello(frame.payload)
                return [self._reply(wire.HELLO, wire.hello_payload(wire.ROLE_TP))]
            if frame.kind == wire.PREDICTIONS:
                return self._predictions(wire.decode_predictions(frame.payload))
            if frame.kind == wire.BYE:
                self.closed = True
                return [self._reply(wire.BYE)]
            return self.fail(wire.ERR_STATE, f"unexpected {wire.KIND_NAMES[frame.kind]} frame")
        except wire.FrameError as exc:
            return self.fail(wire.ERR_MALFORMED, str(exc))

    def _predictions(self, chunk):
        if chunk.n != self._s.size:
            return self.fail(wire.ERR_LENGTH_MISMATCH, "length mismatch")
        if self._pending is None:
            if chunk.row_start != 0:
                return self.fail(wire.ERR_STATE, "first chunk must start at row 0")
            self._pending = (chunk, np.empty((chunk.m, chunk.n)), 0)
        first, buf, filled = self._pending
        if (chunk.m, chunk.policy, chunk.star_row) != (first.m, first.policy, first.star_row) or not (
            chunk.param == first.param or (math.isnan(chunk.param) and math.isnan(first.param))
        ):
            return self.fail(wire.ERR_STATE, "chunk header differs from the first chunk")
        if chunk.row_start != filled:
            return self.fail(wire.ERR_STATE, f"expected chunk at row {filled}, got {chunk.row_start}")
        rows = chunk.rows.shape[0]
        buf[filled : filled + rows] = chunk.rows
        filled += rows
        self._pending = (first, buf, filled)
        if chunk.more:
            return []
        self._pending = None
        if filled != first.m:
            return self.fail(wire.ERR_STATE, f"received {filled} of {first.m} rows")
        if not np.isfinite(buf).all():
            return self.fail(wire.ERR_MALFORMED, "non-finite prediction values")
        return [self._reply(wire.FAIR_INDICES, self.certify(first, buf))]

    def certify(self, first, preds):
        policy = first.policy
        param = first.param
        if math.isnan(param):
            param = self.defaults.rho if policy == "hard" else self.defaults.sigma2
        seed = self.seed if first.seed is None else first.seed
        if first.star_row >= first.m:
            raise wire.FrameError("star_row out of range")
        fair = apply_policy(preds, self._s, policy, param, seed, first.star_row)
        return self.fair_indices_payload(fair)

    def fair_indices_payload(self, fair):
        return wire.fair_indices_payload(fair.policy, fair.m, fair.threshold, fair.indices)


def _serve_stream(session, read_exactly, write):
    """Run one session over a byte stream until BYE, error or EOF."""
    while not session.closed:
        try:
            frame, _ = wire.read_frame(read_exactly)
        except wire.FrameError as exc:
            for r in session.fail(wire.ERR_MALFORMED, str(exc)):
                write(r.encode())
            return
        except EOFError:
            return
        for reply in session.handle(frame):
            write(reply.encode())


def _socket_reader(sock):
    def read_exactly(n):
        chunks, got = [], 0
        while got < n:
            part = sock.recv(min(n - got, 1 << 20))
            if not part:
                raise EOFError("connection closed")
            chunks.append(part)
            got += len(part)
        return b"".join(chunks)

    return read_exactly


class TPService:
    """Handle on a running third-party TCP service; sessions are served one at
    a time in arrival order."""

    def __init__(self, s, bind_address=("127.0.0.1", 0), policy_defaults=None, seed=0,
                 session_factory=TPSession, timeout=DEFAULT_TIMEOUT):
        s = np.asarray(s, dtype=float)
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                self.request.settimeout(timeout)
                session = session_factory(s, policy_defaults, seed)
                try:
                    _serve_stream(session, _socket_reader(self.request), self.request.sendall)
                except (OSError, socket.timeout) as exc:
                    log.info("tp: session ended: %s", exc)
                outer.sessions_served += 1

        self.sessions_served = 0
        self._server = socketserver.TCPServer(parse_address(bind_address), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,),
                                        daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._server.server_address[:2]

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def tp_serve(s, bind_address=("127.0.0.1", 0), policy_defaults=None, seed=0, **kw):
    return TPService(s, bind_address, policy_defaults, seed, **kw)


class MemoryTP:
    """In-memory stand-in for a third-party address. Each ``connect`` opens a
    fresh session; bytes pass through the same framing as over TCP."""

    def __init__(self, s, policy_defaults=None, seed=0, session_factory=TPSession):
        self._s = np.asarray(s, dtype=float)
        self.policy_defaults = policy_defaults
        self.seed = seed
        self.session_factory = session_factory

    def connect(self, timeout=None):
        return _MemoryConnection(self.session_factory(self._s, self.policy_defaults, self.seed))


class _MemoryConnection:
    def __init__(self, session):
        self._session = session
        self._inbox = bytearray()
        self._outbox = bytearray()

    def sendall(self, data):
        self._inbox += data
        while len(self._inbox) >= wire.FRAME_HEADER.size and not self._session.closed:
            try:
                _, _, length = wire.parse_header(bytes(self._inbox[: wire.FRAME_HEADER.size]))
            except wire.FrameError as exc:
                for r in self._session.fail(wire.ERR_MALFORMED, str(exc)):
                    self._outbox += r.encode()
                return
            end = wire.FRAME_HEADER.size + length
            if len(self._inbox) < end:
                return
            (frame,) = wire.split_frames(bytes(self._inbox[:end]))
            del self._inbox[:end]
            for r in self._session.handle(frame):
                self._outbox += r.encode()

    def read_exactly(self, n):
        if len(self._outbox) < n:
            raise EOFError("third party sent no more data")
        out = bytes(self._outbox[:n])
        del self._outbox[:n]
        return out

    def close(self):
        pass


class _SocketConnection:
    def __init__(self, address, timeout):
        self._sock = socket.create_connection(parse_address(address), timeout=timeout)
        self.read_exactly = _socket_reader(self._sock)

    def sendall(self, data):
        self._sock.sendall(data)

    def close(self):
        self._sock.close()


# --------------------------------------------------------------------------
# Transcripts
# --------------------------------------------------------------------------


@dataclass
class Transcript:
    entries: list = field(default_factory=list)  # (direction, timestamp, raw frame bytes)

    def record(self, direction, raw):
        self.entries.append((direction, time.time(), bytes(raw)))

    def frames(self, direction=None):
        return [
            wire.split_frames(raw)[0]
            for d, _, raw in self.entries
            if direction is None or d == direction
        ]

    def raw(self, direction=None):
        return b"".join(raw for d, _, raw in self.entries if direction is None or d == direction)

    def content(self):
        """Everything except timestamps; equal across deterministic reruns."""
        return [(d, raw) for d, _, raw in self.entries]

    def save(self, path):
        """Raw frame stream at ``path`` plus a ``path.index`` sidecar of
        ``direction offset length timestamp`` lines."""
        off = 0
        with open(path, "wb") as fh, open(path + ".index", "w", encoding="utf-8") as ix:
            for d, ts, raw in self.entries:
                fh.write(raw)
                ix.write(f"{d} {off} {len(raw)} {ts!r}\n")
                off += len(raw)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        t = cls()
        with open(path + ".index", encoding="utf-8") as ix:
            for line in ix:
                d, off, length, ts = line.split()
                off, length = int(off), int(length)
                t.entries.append((d, float(ts), data[off : off + length]))
        return t


# --------------------------------------------------------------------------
# Data center client
# --------------------------------------------------------------------------


def session_id(seed):
    return _random.stream(seed, _random.SESSION).bytes(16)


def _exchange(conn, preds, policy, sid, transcript):
    def send(frame):
        raw = frame.encode()
        transcript.record(TO_TP, raw)
        conn.sendall(raw)

    def recv():
        frame, raw = wire.read_frame(conn.read_exactly)
        transcript.record(TO_DC, raw)
        if frame.kind == wire.ERROR:
            raise RemoteError(*wire.decode_error(frame.payload))
        return frame

    send(wire.Frame(wire.HELLO, sid, wire.hello_payload(wire.ROLE_DC)))
    if recv().kind != wire.HELLO:
        raise ProtocolError("third party did not answer HELLO")
    for chunk in wire.chunk_predictions(preds, policy.kind, policy.param, policy.seed,
                                        policy.star_row):
        send(wire.Frame(wire.PREDICTIONS, sid, chunk.encode()))
    reply = recv()
    if reply.kind != wire.FAIR_INDICES:
        raise ProtocolError(f"expected FAIR_INDICES, got {wire.KIND_NAMES[reply.kind]}")
    pname, m, threshold, idx = wire.decode_fair_indices(reply.payload)
    send(wire.Frame(wire.BYE, sid))
    try:
        recv()
    except (EOFError, OSError):
        pass
    return FairIndexSet(idx, threshold, pname, m)


def dc_request_fair_set(address, preds, policy, session_seed=0, timeout=DEFAULT_TIMEOUT,
                        transcript=None, retries=1):
    """Submit a prediction matrix in one round trip and return the certified
    index set. ``address`` is ``(host, port)``, ``"host:port"``, a MemoryTP,
    or None to read ``DFL_TP_ADDR``. Raises NoFairHypotheses when k = 0.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    if not np.isfinite(preds).all():
        raise ValueError("prediction matrix has non-finite values")
    sid = session_id(session_seed)
    attempt = 0
    while True:
        rec = Transcript()
        try:
            conn = address.connect(timeout) if isinstance(address, MemoryTP) else _SocketConnection(address, timeout)
        except OSError as exc:
            if attempt < retries:
                attempt += 1
                log.info("dc: connection failed (%s), retrying", exc)
                continue
            raise ProtocolError(f"cannot reach third party: {exc}") from exc
        try:
            fair = _exchange(conn, preds, policy, sid, rec)
            break
        except socket.timeout as exc:
            raise ProtocolError(f"timed out after {timeout} s") from exc
        except wire.FrameError as exc:
            raise ProtocolError(f"malformed reply from third party: {exc}") from exc
        except (ConnectionError, EOFError) as exc:
            if attempt < retries:
                attempt += 1
                continue
            raise ProtocolError(f"connection lost: {exc}") from exc
        finally:
            conn.close()
            # failed exchanges are kept too, so they can be audited
            if transcript is not None:
                transcript.entries.extend(rec.entries)
    if fair.k == 0:
        raise NoFairHypotheses(fair)
    return fair
