"""Instance-level meta normalization with a minimal autodiff core."""

from .autodiff import Tape, Variable, backward, finite_diff_check
from .ilm import (IlmParams, KeyFeatures, align, count_ilm_params, decode, encode,
                  extract_key_features, ilm_forward, init_ilm_params)
from .models import (ArchTable, NormOptions, build_micro_cnn, count_parameters,
                     resnet_arch_table)
from .norms import (AffineParams, NormStats, PartitionScheme, RunningStats,
                    norm_layer_forward, rescale, standardize)
from .tensor import elementwise, grouped_moments, matmul
from .train import (SgdState, StepSchedule, load_cifar10, sgd_step,
                    softmax_cross_entropy, synthetic_dataset, train)

__all__ = [
    "AffineParams", "ArchTable", "IlmParams", "KeyFeatures", "NormOptions",
    "NormStats", "PartitionScheme", "RunningStats", "SgdState", "StepSchedule",
    "Tape", "Variable", "align", "backward", "build_micro_cnn",
    "count_ilm_params", "count_parameters", "decode", "elementwise", "encode",
    "extract_key_features", "finite_diff_check", "grouped_moments",
    "ilm_forward", "init_ilm_params", "load_cifar10", "matmul",
    "norm_layer_forward", "rescale", "resnet_arch_table", "sgd_step",
    "softmax_cross_entropy", "standardize", "synthetic_dataset", "train",
]
