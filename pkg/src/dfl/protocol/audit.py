"""Encoding-level privacy audit of a recorded session.

Three checks:

(a) every third-party frame decodes exactly under the documented encoding,
    so nothing but an index set (plus fixed header fields) flows back, and
    each index set equals the certification replayed from the recorded
    predictions and s;
(b) every data-center frame is HELLO, a well-formed PREDICTIONS chunk, or BYE;
(c) no frame, in either direction, contains a serialized copy of s, a
    feature column or the labels (float64/float32/int64/int32/int8 encodings).

Inference from the index set itself (e.g. adaptive queries) is not audited.
"""

from dataclasses import dataclass, field

import math

import numpy as np

from dfl.protocol import wire
from dfl.protocol.service import TO_DC, TO_TP, PolicyDefaults, apply_policy

_SCAN_DTYPES = ("<f8", "<f4", "<i8", "<i4", "<i1")
MIN_PATTERN_BYTES = 16

TP_KINDS = {wire.HELLO, wire.FAIR_INDICES, wire.ERROR, wire.BYE}
DC_KINDS = {wire.HELLO, wire.PREDICTIONS, wire.BYE}


@dataclass
class AuditReport:
    checks: dict = field(default_factory=dict)  # name -> (passed, detail)

    @property
    def passed(self):
        return all(ok for ok, _ in self.checks.values())

    def __str__(self):
        return "\n".join(
            f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, (ok, detail) in self.checks.items()
        )


def _frames(transcript, direction):
    out = []
    for d, _, raw in transcript.entries:
        if d == direction:
            out.extend(wire.split_frames(raw))
    return out


def _requests(transcript):
    """Assembled PREDICTIONS requests in order: (first chunk, matrix) or None
    when the request cannot be reassembled."""
    out, first, rows = [], None, []
    for d, _, raw in transcript.entries:
        if d != TO_TP:
            continue
        for f in wire.split_frames(raw):
            if f.kind != wire.PREDICTIONS:
                continue
            try:
                chunk = wire.decode_predictions(f.payload)
            except wire.FrameError:
                out.append(None)
                first, rows = None, []
                continue
            first = first or chunk
            rows.append(chunk.rows)
            if not chunk.more:
                out.append((first, np.vstack(rows)))
                first, rows = None, []
    return out


def _replay(first, preds, s, defaults, tp_seed):
    param = first.param
    if math.isnan(param):
        param = defaults.rho if first.policy == "hard" else defaults.sigma2
    seed = first.seed if first.seed is not None else tp_seed
    if first.policy == "soft" and seed is None:
        return None
    return apply_policy(preds, s, first.policy, param, seed, first.star_row)


def _check_tp(transcript, s, defaults, tp_seed):
    try:
        frames = _frames(transcript, TO_DC)
        requests = _requests(transcript)
    except wire.FrameError as exc:
        return False, f"unparseable frame: {exc}"
    replayed, answers = 0, 0
    for i, f in enumerate(frames):
        try:
            if f.kind not in TP_KINDS:
                return False, f"frame {i}: third party may not send {wire.KIND_NAMES[f.kind]}"
            if f.kind == wire.HELLO:
                wire.decode_hello(f.payload)
            elif f.kind == wire.FAIR_INDICES:
                _, m, _, idx = wire.decode_fair_indices(f.payload)
                req = requests[answers] if answers < len(requests) else None
                answers += 1
                if req is None or req[1].shape[1] != len(s) or req[0].m != m:
                    return False, f"frame {i}: index set does not answer a recorded request"
                expect = _replay(req[0], req[1], s, defaults, tp_seed)
                if expect is not None:
                    if not np.array_equal(expect.indices, idx):
                        return False, f"frame {i}: index set differs from the replayed certification"
                    replayed += 1
            elif f.kind == wire.ERROR:
                wire.decode_error(f.payload)
            elif f.payload:
                return False, f"frame {i}: BYE with a payload"
        except wire.FrameError as exc:
            return False, f"frame {i}: {exc}"
    return True, f"{len(frames)} frames conform, {replayed} of {answers} index sets replayed"


def _check_dc(transcript):
    try:
        frames = _frames(transcript, TO_TP)
    except wire.FrameError as exc:
        return False, f"unparseable frame: {exc}"
    rows = 0
    for i, f in enumerate(frames):
        try:
            if f.kind not in DC_KINDS:
                return False, f"frame {i}: data center may not send {wire.KIND_NAMES[f.kind]}"
            if f.kind == wire.HELLO:
                wire.decode_hello(f.payload)
            elif f.kind == wire.PREDICTIONS:
                chunk = wire.decode_predictions(f.payload)
                if not np.isfinite(chunk.rows).all():
                    return False, f"frame {i}: non-finite prediction values"
                rows += chunk.rows.shape[0]
            elif f.payload:
                return False, f"frame {i}: BYE with a payload"
        except wire.FrameError as exc:
            return False, f"frame {i}: {exc}"
    return True, f"{len(frames)} frames, {rows} prediction rows"


def _patterns(name, vec):
    vec = np.asarray(vec, dtype=float)
    if vec.size == 0 or np.all(vec == vec[0]):
        return
    integral = np.all(vec == np.round(vec))
    for dt in _SCAN_DTYPES:
        if dt[1] in "i":
            if not integral or np.abs(vec).max() >= np.iinfo(np.dtype(dt)).max:
                continue
        b = vec.astype(dt).tobytes()
        if len(b) >= MIN_PATTERN_BYTES:
            yield f"{name} as {dt}", b


def _check_scan(transcript, s, X, Y):
    blobs = {d: transcript.raw(d) for d in (TO_TP, TO_DC)}
    targets = [("s", s), ("1-s", 1.0 - np.asarray(s, dtype=float)), ("Y", Y)]
    if X is not None:
        X = np.asarray(X, dtype=float)
        targets += [(f"X[:, {j}]", X[:, j]) for j in range(X.shape[1])]
    hits = []
    for name, vec in targets:
        if vec is None:
            continue
        for label, pattern in _patterns(name, vec):
            for d, blob in blobs.items():
                if pattern in blob:
                    hits.append(f"{label} in {d}")
    if hits:
        return False, "found " + ", ".join(hits)
    return True, "no serialized copy of s, X columns or Y"


def audit_transcript(transcript, s, X=None, Y=None, policy_defaults=None, tp_seed=None):
    """``policy_defaults`` and ``tp_seed`` are the third party's fallbacks for
    requests that left the threshold or the soft-policy seed unset; without
    them such requests are decoded but not replayed."""
    s = np.asarray(s, dtype=float)
    return AuditReport(
        {
            "a_tp_sends_index_sets_only": _check_tp(transcript, s, policy_defaults or PolicyDefaults(),
                                                    tp_seed),
            "b_dc_sends_predictions_only": _check_dc(transcript),
            "c_no_raw_data_in_bytes": _check_scan(transcript, s, X, Y),
        }
    )
