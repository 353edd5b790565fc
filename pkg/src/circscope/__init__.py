"""Circuit discovery in decomposed transformers by edge attribution patching."""

__version__ = "0.1.0"

from .acdc import AcdcConfig, acdc_prune, eap_then_acdc
from .core import CircscopeError, NonFiniteError, finite_difference, run_backward, run_forward
from .eap import (
    Circuit,
    EdgeScoreTable,
    ZeroGradientWarning,
    eap_scores,
    eap_scores_per_reader,
    threshold_circuit,
    top_k_circuit,
)
from .estimators import ACDC, ActivationPatching, EAPThenACDC, EdgeAttributionPatching
from .evaluation import (
    GroundTruthCircuit,
    RocCurve,
    roc_from_circuit_family,
    roc_from_ranking,
    score_distribution,
    youden_j,
)
from .model import (
    DecomposedGraph,
    DecomposedTransformer,
    Edge,
    ModelConfig,
    NodeId,
    build_graph,
    init_weights,
    load_model,
    load_weights,
    save_weights,
)
from .patching import PatchRequest, activation_patch, activation_patch_scores, interpolation_sweep
from .tasks import MetricSpec, PromptPair, TaskDataset, load_task
