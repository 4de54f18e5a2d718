"""Two-party protocol: the third party certifies, the data center learns."""

from dfl.protocol.audit import AuditReport, audit_transcript
from dfl.protocol.service import (
    ENV_ADDR,
    MemoryTP,
    NoFairHypotheses,
    Policy,
    PolicyDefaults,
    ProtocolError,
    RemoteError,
    TPService,
    TPSession,
    Transcript,
    apply_policy,
    dc_request_fair_set,
    tp_serve,
)

__all__ = [
    "AuditReport",
    "audit_transcript",
    "ENV_ADDR",
    "MemoryTP",
    "NoFairHypotheses",
    "Policy",
    "PolicyDefaults",
    "ProtocolError",
    "RemoteError",
    "TPService",
    "TPSession",
    "Transcript",
    "apply_policy",
    "dc_request_fair_set",
    "tp_serve",
]
