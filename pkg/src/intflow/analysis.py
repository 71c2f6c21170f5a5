"""Precision-loss attribution, storage accounting, and speed-up estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .audit import OpAuditLog
from .errors import ValidationError
from .scaling import (
    Precision,
    Session,
    dequantize,
    init_scale,
)
from .tensor import RationalTensor, ScaledTensor
from .transformer import (
    FP32ReferenceModel,
    IntegerTransformerModel,
    MODULES,
    TransformerLayerParams,
    forward,
    quantize_model,
    reference_forward,
    reference_twin,
)


@dataclass(frozen=True)
class PrecisionEntry:
    module: str
    layer: int
    mse: float
    elements: int


@dataclass(frozen=True)
class PrecisionReport:
    entries: tuple[PrecisionEntry, ...]

    def get(self, module: str, layer: int) -> float:
        for e in self.entries:
            if e.module == module and e.layer == layer:
                return e.mse
        raise KeyError((module, layer))

    def lines(self) -> list[str]:
        return [
            f"{e.module}\t{e.layer}\tmse\t{e.mse:.10e}" for e in self.entries
        ]


@dataclass(frozen=True)
class StorageReport:
    fp32_bytes: int
    int8_payload_bytes: int
    scale_bytes: int
    header_bytes: int

    @property
    def int8_total_bytes(self) -> int:
        return self.int8_payload_bytes + self.scale_bytes + self.header_bytes

    @property
    def ratio(self) -> float:
        return self.fp32_bytes / self.int8_total_bytes

    def lines(self) -> list[str]:
        return [
            f"storage\tfp32\tbytes\t{self.fp32_bytes}",
            f"storage\tint8_payload\tbytes\t{self.int8_payload_bytes}",
            f"storage\tscales\tbytes\t{self.scale_bytes}",
            f"storage\theader\tbytes\t{self.header_bytes}",
            f"storage\tratio\tx\t{self.ratio:.4f}",
        ]


@dataclass(frozen=True)
class SpeedupEstimate:
    op_shares: dict[str, float]
    accelerable_share: float
    factor: float
    estimate: float

    def lines(self) -> list[str]:
        out = [
            f"speedup\taccelerable\tshare\t{self.accelerable_share:.4f}",
            f"speedup\tfactor\tx\t{self.factor:.2f}",
            f"speedup\testimate\tx\t{self.estimate:.4f}",
        ]
        for kind in sorted(self.op_shares):
            out.append(f"speedup\t{kind}\tshare\t{self.op_shares[kind]:.4f}")
        return out


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))


def _as_float(state) -> np.ndarray:
    if isinstance(state, ScaledTensor):
        return dequantize(state).values
    if isinstance(state, RationalTensor):
        return state.values
    return np.asarray(state, dtype=np.float64)


class _TapCollector:
    def __init__(self):
        self.taps: list[tuple[str, int, np.ndarray]] = []

    def __call__(self, tag, layer, state):
        self.taps.append((tag, layer, _as_float(state)))


def precision_loss(
    model: IntegerTransformerModel,
    ref: FP32ReferenceModel,
    inputs: list[np.ndarray],
) -> PrecisionReport:
    """Per-module, per-layer MSE between FP32 and de-quantized activations."""
    sums: dict[tuple[str, int], list[float]] = {}
    counts: dict[tuple[str, int], int] = {}
    for tokens in inputs:
        int_tap = _TapCollector()
        ref_tap = _TapCollector()
        session = Session(Precision(model.config.precision))
        forward(model, session, tokens=tokens, tap=int_tap)
        reference_forward(ref, tokens=tokens, tap=ref_tap)
        if len(int_tap.taps) != len(ref_tap.taps):
            raise ValidationError("tap sequences diverged between twins")
        for (tag_i, li, act_i), (tag_r, lr, act_r) in zip(int_tap.taps, ref_tap.taps):
            if tag_i != tag_r or li != lr:
                raise ValidationError("tap sequences diverged between twins")
            if act_i.shape != act_r.shape:
                raise ValidationError("tap shapes diverged between twins")
            key = (tag_i, li)
            sums.setdefault(key, []).append(_mse(act_i, act_r))
            counts[key] = act_i.size
    entries = [
        PrecisionEntry(module, layer, float(np.mean(vals)), counts[(module, layer)])
        for (module, layer), vals in sorted(
            sums.items(), key=lambda kv: (kv[0][1], MODULES.index(kv[0][0]))
        )
    ]
    return PrecisionReport(tuple(entries))


def module_ablation(
    model: IntegerTransformerModel,
    inputs: list[np.ndarray],
    module_set: frozenset[str],
    ref: FP32ReferenceModel | None = None,
) -> float:
    """Output MSE vs the full-FP32 reference when only `module_set` runs INT8."""
    unknown = set(module_set) - set(MODULES)
    if unknown:
        raise ValidationError(f"unknown module tags: {sorted(unknown)}")
    ref = ref or reference_twin(model)
    losses = []
    for tokens in inputs:
        session = Session(Precision(model.config.precision))
        out = forward(
            model, session, tokens=tokens, int_modules=frozenset(module_set), ref=ref
        )
        oracle = reference_forward(ref, tokens=tokens)
        losses.append(_mse(_as_float(out), oracle.values))
    return float(np.mean(losses))


def storage_report(model: IntegerTransformerModel) -> StorageReport:
    """Byte accounting from the actual serializations of the model pair."""
    from .modelfile import (
        HEADER_SIZE,
        record_sizes,
        serialize_int_model,
        serialize_reference_model,
    )

    fp32_blob = serialize_reference_model(reference_twin(model))
    int_blob = serialize_int_model(model)
    payload_bytes, scale_bytes = record_sizes(int_blob)
    report = StorageReport(
        fp32_bytes=len(fp32_blob),
        int8_payload_bytes=payload_bytes,
        scale_bytes=scale_bytes,
        header_bytes=HEADER_SIZE,
    )
    assert report.int8_total_bytes == len(int_blob)
    return report


# Modern CPUs accelerate the integer GEMM lane; everything else is taken at
# its FP32 cost.
DEFAULT_ACCELERABLE = frozenset({"matmul"})


def speedup_estimate(
    log: OpAuditLog,
    factor: float = 6.0,
    accelerable: frozenset[str] = DEFAULT_ACCELERABLE,
) -> SpeedupEstimate:
    """Amdahl-style estimate with audited element counts as time proxies."""
    if not log.records:
        raise ValidationError("audit log is empty")
    totals: dict[str, int] = {}
    for r in log.records:
        totals[r.kind] = totals.get(r.kind, 0) + r.elements
    grand = sum(totals.values())
    acc = sum(v for k, v in totals.items() if k in accelerable)
    estimate = grand / (acc / factor + (grand - acc))
    return SpeedupEstimate(
        op_shares={k: v / grand for k, v in totals.items()},
        accelerable_share=acc / grand,
        factor=factor,
        estimate=estimate,
    )


def bit_sweep(
    ref: FP32ReferenceModel,
    inputs: list[np.ndarray],
    p_range: range,
) -> list[tuple[int, float]]:
    """Re-quantize at each precision and record output MSE vs the reference."""
    results = []
    for p in p_range:
        model = quantize_model(ref, precision=p)
        losses = []
        for tokens in inputs:
            session = Session(Precision(p))
            out = forward(model, session, tokens=tokens)
            oracle = reference_forward(ref, tokens=tokens)
            losses.append(_mse(_as_float(out), oracle.values))
        results.append((p, float(np.mean(losses))))
    return results


def canonical_ffn_forward(
    x: ScaledTensor, lp: TransformerLayerParams, session: Session
) -> ScaledTensor:
    """The quantize/de-quantize-sandwiched FFN baseline.

    Every FP32 stage de-quantizes its input and the result is re-quantized
    before the next integer GEMM; this is the comparator the integer
    pipeline eliminates.
    """
    from .transformer import FFN, L1LNParams, ref_l1ln

    prec = session.precision
    ln = L1LNParams(
        dequantize(lp.ln2_g).values, dequantize(lp.ln2_b).values, lp.ln2.n_h
    )

    def requantize(values: np.ndarray) -> ScaledTensor:
        t = RationalTensor(values)
        return session.quantize(t, init_scale(t, prec=prec), FFN)

    r = ref_l1ln(session.dequantize(x, FFN).values, ln)
    h = session.apply(K.matmul, [requantize(r), lp.w1], FFN)
    r = session.dequantize(h, FFN).values + dequantize(lp.b1).values
    h = session.apply(K.matmul, [requantize(np.maximum(r, 0.0)), lp.w2], FFN)
    r = session.dequantize(h, FFN).values + dequantize(lp.b2).values
    r = r + session.dequantize(x, FFN).values
    return requantize(r)
