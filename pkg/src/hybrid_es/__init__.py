"""Separable NES with distributed semi-updates, and hybrid ES/SGD training of sparsity masks."""

from .executor import BatchRegime, ExecMode, ExecPlan, GenerationMetrics, SemiUpdate, run_generation
from .mask_dist import MaskDist, SparsitySchedule, retained_count, test_time_mask
from .samplers import CategoricalDist, Mask, SamplerStrategy, build_cdf, draw, draw_k_sorted, sample_mask
from .search_dist import (
    GaussianSearchDist,
    ShapingConfig,
    SigmaGradForm,
    apply_update,
    default_learning_rates,
    natural_gradient,
    sample_params,
    shape_utilities,
)

__version__ = "0.1.0"
