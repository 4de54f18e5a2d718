"""Length-prefixed binary frames exchanged between the data center and the
third party.

Frame layout (all integers little-endian)::

    magic      4 bytes  b"DFL1"
    kind       u8       HELLO=1 PREDICTIONS=2 FAIR_INDICES=3 ERROR=4 BYE=5
    session   16 bytes
    length     u32      payload length, at most 16 MiB
    payload    length bytes

Payloads:

    HELLO         <H B      version, role (0 data center, 1 third party)
    PREDICTIONS   <B B 2x i I I I I d Q, then row_count*n float64
                  flags (bit0 more chunks follow, bit1 seed present), policy
                  (0 hard, 1 soft), star_row (-1: zero reference), m, n,
                  row_start, row_count, rho|sigma2 (NaN: server default), seed
    FAIR_INDICES  <B B 2x I I d, then k unsigned indices of `width` bytes
                  policy, width (1, 2 or 4), m, k, threshold used
    ERROR         <H then a UTF-8 reason
    BYE           empty

No payload has a field for sensitive values, features or labels.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DFL1"
VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024

HELLO, PREDICTIONS, FAIR_INDICES, ERROR, BYE = 1, 2, 3, 4, 5
KIND_NAMES = {HELLO: "HELLO", PREDICTIONS: "PREDICTIONS", FAIR_INDICES: "FAIR_INDICES",
              ERROR: "ERROR", BYE: "BYE"}

ROLE_DC, ROLE_TP = 0, 1
POLICY_CODES = {"hard": 0, "soft": 1}
POLICY_NAMES = {v: k for k, v in POLICY_CODES.items()}

FLAG_MORE = 0x01
FLAG_SEED = 0x02

ERR_MALFORMED = 1
ERR_LENGTH_MISMATCH = 2
ERR_STATE = 3
ERR_INTERNAL = 4

FRAME_HEADER = struct.Struct("<4sB16sI")
HELLO_BODY = struct.Struct("<HB")
PRED_HEADER = struct.Struct("<BBxxiIIIIdQ")
FAIR_HEADER = struct.Struct("<BBxxIId")
ERROR_HEADER = struct.Struct("<H")


class FrameError(ValueError):
    """A byte sequence that is not a valid frame or payload."""


@dataclass
class Frame:
    kind: int
    session: bytes
    payload: bytes = b""

    def encode(self):
        if len(self.session) != 16:
            raise FrameError("session id must be 16 bytes")
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        return FRAME_HEADER.pack(MAGIC, self.kind, self.session, len(self.payload)) + self.payload


def parse_header(buf):
    magic, kind, session, length = FRAME_HEADER.unpack(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if kind not in KIND_NAMES:
        raise FrameError(f"unknown frame kind {kind}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload length {length} exceeds limit")
    return kind, session, length


def read_frame(read_exactly):
    """Read one frame with ``read_exactly(n) -> bytes``; returns (Frame, raw bytes)."""
    head = read_exactly(FRAME_HEADER.size)
    kind, session, length = parse_header(head)
    payload = read_exactly(length) if length else b""
    return Frame(kind, session, payload), head + payload


def split_frames(buf):
    """Decode a concatenation of frames, failing on any trailing garbage."""
    frames, off = [], 0
    while off < len(buf):
        if len(buf) - off < FRAME_HEADER.size:
            raise FrameError("truncated frame header")
        kind, session, length = parse_header(buf[off : off + FRAME_HEADER.size])
        end = off + FRAME_HEADER.size + length
        if end > len(buf):
            raise FrameError("truncated payload")
        frames.append(Frame(kind, session, bytes(buf[off + FRAME_HEADER.size : end])))
        off = end
    return frames


# --------------------------------------------------------------------------
# Payload codecs
# --------------------------------------------------------------------------


def hello_payload(role):
    return HELLO_BODY.pack(VERSION, role)


def decode_hello(payload):
    if len(payload) != HELLO_BODY.size:
        raise FrameError("HELLO payload has wrong length")
    return HELLO_BODY.unpack(payload)


def error_payload(code, reason):
    return ERROR_HEADER.pack(code) + reason.encode("utf-8")


def decode_error(payload):
    if len(payload) < ERROR_HEADER.size:
        raise FrameError("ERROR payload too short")
    (code,) = ERROR_HEADER.unpack_from(payload)
    return code, payload[ERROR_HEADER.size :].decode("utf-8", errors="replace")


@dataclass
class PredictionsChunk:
    policy: str
    m: int
    n: int
    row_start: int
    rows: np.ndarray  # (row_count, n)
    param: float = float("nan")
    seed: int = None
    star_row: int = -1
    more: bool = False

    def encode(self):
        rows = np.ascontiguousarray(self.rows, dtype="<f8")
        flags = (FLAG_MORE if self.more else 0) | (FLAG_SEED if self.seed is not None else 0)
        head = PRED_HEADER.pack(
            flags,
            POLICY_CODES[self.policy],
            self.star_row,
            self.m,
            self.n,
            self.row_start,
            rows.shape[0],
            self.param,
            0 if self.seed is None else self.seed,
        )
        return head + rows.tobytes()


def decode_predictions(payload):
    if len(payload) < PRED_HEADER.size:
        raise FrameError("PREDICTIONS payload too short")
    flags, pcode, star_row, m, n, row_start, row_count, param, seed = PRED_HEADER.unpack_from(payload)
    if pcode not in POLICY_NAMES:
        raise FrameError(f"unknown policy code {pcode}")
    if flags & ~(FLAG_MORE | FLAG_SEED):
        raise FrameError(f"unknown flag bits {flags:#x}")
    expected = PRED_HEADER.size + 8 * row_count * n
    if len(payload) != expected:
        raise FrameError(f"PREDICTIONS payload is {len(payload)} bytes, header implies {expected}")
    if row_start + row_count > m:
        raise FrameError("chunk rows run past m")
    rows = np.frombuffer(payload, dtype="<f8", offset=PRED_HEADER.size).reshape(row_count, n)
    return PredictionsChunk(
        policy=POLICY_NAMES[pcode],
        m=m,
        n=n,
        row_start=row_start,
        rows=rows.astype(float),
        param=param,
        seed=seed if flags & FLAG_SEED else None,
        star_row=star_row,
        more=bool(flags & FLAG_MORE),
    )


def rows_per_chunk(n, limit=MAX_PAYLOAD):
    per = (limit - PRED_HEADER.size) // (8 * n)
    if per < 1:
        raise FrameError(f"a single prediction row of length {n} does not fit in a frame")
    return per


def chunk_predictions(preds, policy, param, seed=None, star_row=-1, limit=MAX_PAYLOAD):
    """Split an (m, n) prediction matrix into continuation-flagged chunks."""
    preds = np.asarray(preds, dtype=float)
    m, n = preds.shape
    per = rows_per_chunk(n, limit)
    starts = list(range(0, m, per)) or [0]
    return [
        PredictionsChunk(policy, m, n, a, preds[a : a + per], param, seed, star_row,
                         more=a + per < m)
        for a in starts
    ]


def index_width(m):
    if m <= 1 << 8:
        return 1
    if m <= 1 << 16:
        return 2
    return 4


_WIDTH_DTYPE = {1: "<u1", 2: "<u2", 4: "<u4"}


def fair_indices_payload(policy, m, threshold, indices):
    width = index_width(m)
    idx = np.asarray(indices, dtype=np.int64)
    head = FAIR_HEADER.pack(POLICY_CODES[policy], width, m, idx.size, threshold)
    return head + idx.astype(_WIDTH_DTYPE[width]).tobytes()


def decode_fair_indices(payload):
    if len(payload) < FAIR_HEADER.size:
        raise FrameError("FAIR_INDICES payload too short")
    pcode, width, m, k, threshold = FAIR_HEADER.unpack_from(payload)
    if pcode not in POLICY_NAMES or width not in _WIDTH_DTYPE:
        raise FrameError("bad policy or index width")
    if width != index_width(m):
        raise FrameError(f"index width {width} does not match m={m}")
    expected = FAIR_HEADER.size + width * k
    if len(payload) != expected:
        raise FrameError(f"FAIR_INDICES payload is {len(payload)} bytes, header implies {expected}")
    idx = np.frombuffer(payload, dtype=_WIDTH_DTYPE[width], offset=FAIR_HEADER.size).astype(np.int64)
    if idx.size and (idx[-1] >= m or np.any(np.diff(idx) <= 0)):
        raise FrameError("indices are not sorted, unique and below m")
    return POLICY_NAMES[pcode], m, threshold, idx
