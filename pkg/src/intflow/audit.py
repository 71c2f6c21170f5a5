"""Append-only log of executed kernel operations.

Each record notes which lane did the work: "payload" for integer arithmetic
on tensor values, "scale" for the cheap FP32 bookkeeping on scales, and
"fp32" for rational arithmetic on tensor values (only the canonical
quantize/de-quantize baseline produces those).
"""
from __future__ import annotations

from dataclasses import dataclass, field

PAYLOAD = "payload"
SCALE = "scale"
FP32 = "fp32"

_LANES = (PAYLOAD, SCALE, FP32)


@dataclass(frozen=True)
class AuditRecord:
    kind: str
    lane: str
    elements: int
    rescaled: bool = False
    module: str = ""

    def __post_init__(self):
        if self.lane not in _LANES:
            raise ValueError(f"unknown lane {self.lane!r}")


@dataclass
class OpAuditLog:
    records: list[AuditRecord] = field(default_factory=list)

    def append(self, record: AuditRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def payload_records(self) -> list[AuditRecord]:
        return [r for r in self.records if r.lane == PAYLOAD]

    def fp32_records(self) -> list[AuditRecord]:
        return [r for r in self.records if r.lane == FP32]

    def dequantize_records(self) -> list[AuditRecord]:
        return [r for r in self.records if r.kind == "dequantize"]

    def integer_pure(self) -> bool:
        """True when no de-quantize and no FP32 work on tensor values occurred."""
        return not self.dequantize_records() and not self.fp32_records()
