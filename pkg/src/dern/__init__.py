"""Expert pruning, neuron-level segment recombination and spherical k-means
reconstruction for GLU sparse mixture-of-experts layers."""

from .calibration import (
    CalibrationSet,
    ImportanceReport,
    RoutingStats,
    collect_stats,
    importance_report,
    importance_scores,
    select_retained,
    synth_calibration,
)
from .clustering import ClusterConfig, ClusterState, compress_layer, reconstruct_expert, run_kmeans
from .model import (
    ExpertWeights,
    MoeLayer,
    MoeModel,
    expert_forward,
    layer_forward,
    model_forward,
    param_count,
    route,
)
from .pipeline import (
    EvalReport,
    PipelineConfig,
    compress,
    evaluate,
    run_dern,
    run_expert_average,
    run_prune_only,
)
from .segments import ComponentMask, Segment, decompose, reassign, transfer_router_mass
from .similarity import SimReport, similarity_report
from .storage import load_model, save_model
from .synth import gen_synthetic_model

__version__ = "0.1.0"
