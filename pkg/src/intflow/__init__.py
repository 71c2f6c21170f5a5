"""Integer-only transformer inference with propagated quantization scales."""

from .audit import FP32, PAYLOAD, SCALE, AuditRecord, OpAuditLog
from .errors import (
    IntflowError,
    LaneOverflowError,
    PrecisionError,
    ShapeError,
    ValidationError,
)
from .scaling import (
    Precision,
    ScaleGranularity,
    Session,
    dequantize,
    init_scale,
    protocol_apply,
    quantize,
    rescale,
    scale_match,
    scale_match_dim,
)
from .tensor import (
    DEFAULT_PRECISION,
    LANE_MAX,
    IntTensor,
    RationalTensor,
    ScaledTensor,
    ScaleTensor,
    broadcast_scale,
    concat,
    transpose,
)
from .transformer import (
    FP32ReferenceModel,
    IntegerTransformerModel,
    L1LNParams,
    ModelConfig,
    PolyParams,
    TransformerLayerParams,
    forward,
    quantize_model,
    random_reference_model,
    reference_forward,
    reference_twin,
)

__version__ = "0.1.0"

__all__ = [
    "AuditRecord",
    "DEFAULT_PRECISION",
    "FP32",
    "FP32ReferenceModel",
    "IntTensor",
    "IntegerTransformerModel",
    "IntflowError",
    "L1LNParams",
    "LANE_MAX",
    "LaneOverflowError",
    "ModelConfig",
    "OpAuditLog",
    "PAYLOAD",
    "PolyParams",
    "Precision",
    "PrecisionError",
    "RationalTensor",
    "SCALE",
    "ScaleGranularity",
    "ScaleTensor",
    "ScaledTensor",
    "Session",
    "ShapeError",
    "TransformerLayerParams",
    "ValidationError",
    "broadcast_scale",
    "concat",
    "dequantize",
    "forward",
    "init_scale",
    "protocol_apply",
    "quantize",
    "quantize_model",
    "random_reference_model",
    "reference_forward",
    "reference_twin",
    "rescale",
    "scale_match",
    "scale_match_dim",
    "transpose",
]
