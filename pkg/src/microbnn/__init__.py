"""Memory-minimal binarized network inference, training and deployment.

Networks store one bit per weight and activation, run every block through
one fused pass (convolution, batch-norm threshold, binarization, optional
pooling) and need only two small bit buffers plus a single accumulator of
working storage, so models fit alongside their code in tens of kilobytes.
"""

from .bitops import BitTensor, binary_activation, popcount, xnor_popcount_dot
from .codegen import CodegenOptions, GeneratedCode, find_c_compiler, generate
from .errors import (BudgetError, CapacityError, CodegenError, ModelFormatError,
                     TemplateError, TrainingDivergedError, UnsupportedVersionError,
                     ValidationError)
from .inference import ForwardResult, InputTensor, TempArena, Trace, network_forward
from .memory import MemoryReport, fits, memory_report
from .model import (BnParams, FusedConv, FusedConvPool, FusedFC, InputSpec, Network,
                    deserialize, fold_bn, network_shapes, serialize, validate)
from .presets import PRESETS
from .screening import (DeviceProfile, SearchSpace, cost_metrics, mnist_space,
                        results_records, results_table, screen)
from .trainer import (EvalResult, TrainConfig, TrainResult, evaluate,
                      load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "BitTensor", "binary_activation", "popcount", "xnor_popcount_dot",
    "CodegenOptions", "GeneratedCode", "find_c_compiler", "generate",
    "BudgetError", "CapacityError", "CodegenError", "ModelFormatError",
    "TemplateError", "TrainingDivergedError", "UnsupportedVersionError",
    "ValidationError",
    "ForwardResult", "InputTensor", "TempArena", "Trace", "network_forward",
    "MemoryReport", "fits", "memory_report",
    "BnParams", "FusedConv", "FusedConvPool", "FusedFC", "InputSpec",
    "Network", "deserialize", "fold_bn", "network_shapes", "serialize",
    "validate",
    "PRESETS",
    "DeviceProfile", "SearchSpace", "cost_metrics", "mnist_space",
    "results_records", "results_table", "screen",
    "EvalResult", "TrainConfig", "TrainResult", "evaluate",
    "load_checkpoint", "save_checkpoint", "train",
    "__version__",
]
