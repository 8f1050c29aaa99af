"""Mixed-precision INT4/INT8 linear layers with floating-point outlier features.

Base weights and activations are quantized (weights offline with GPTQ,
activations per token at run time) and multiplied in integer arithmetic;
a small set of outlier input features stays in floating point.
"""
from ._backend import available as available_backends
from ._backend import get as active_backend
from ._backend import set_backend, use_backend
from .analysis import (
    DeviceSpec,
    ErrorReport,
    ModelArchSpec,
    error_report,
    flop_breakdown,
    load_arch,
    memory_estimate,
    roofline_classify,
)
from .calibration import (
    CalibStats,
    OutlierSet,
    accumulate_stats,
    permute_columns,
    select_outliers,
    sensitivity_report,
    zero_outlier_rule,
)
from .container import read_container, write_container
from .errors import FormatError, GraphError, NumericalError, QuikError, RangeError, ShapeError
from .packed import PackedIntMatrix, int_matmul, pack_int4, pack_int8, unpack_int4
from .quantizer import (
    Hessian,
    QuantizedWeights,
    SparsityMask,
    build_hessian,
    clip_search,
    compute_wreduced,
    gptq_quantize,
    proxy_loss,
    rtn_quantize,
    rtn_quantize_row,
    sparsegpt_joint,
)
from .runtime import (
    ActQuantResult,
    LayerPrecisionPolicy,
    Node,
    QuikLinearLayer,
    dequantize_epilogue,
    forward_model,
    mlp_block,
    quantize_activations,
    quantize_activations_fused,
    quantize_linear,
    quik_matmul,
    split_activations,
)

__version__ = "0.1.0"
