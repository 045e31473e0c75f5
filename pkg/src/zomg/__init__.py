"""Zero-shot motion grounding with test-time soft-mask optimization.

Decomposes a free-form action description into ordered sub-action queries
and, per instance, optimizes frame-wise soft masks over precomputed motion
frame features to localize each sub-action as a temporal segment.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DecompositionParseError,
    DegeneratePoolingError,
    DegenerateVectorError,
    EvalInputError,
    InvalidInputError,
    LspUnavailableError,
    NumericalError,
    OptimizationDivergedError,
    SchemaValidationError,
    ShapeError,
    TooLargeError,
)
from .estimators import AttentionPoolEmbedder, SoftMaskGrounder
from .formats import Instance, Query, ResultRecord, Span, load_instance, save_instance
from .lsp import (
    DecompositionResult,
    HttpChatClient,
    LspConfig,
    MockClient,
    decompose_with_voting,
    rule_based_split,
)
from .metrics import (
    EvalReport,
    GtSegment,
    ScoredSegment,
    average_precision,
    mean_ap,
    segment_iou,
    semantic_similarity_report,
)
from .model import (
    AttentionPoolParams,
    PretrainConfig,
    attention_pool,
    pretrain,
    sequence_contrastive_loss,
)
from .numerics import Rng
from .smo import (
    GroundingResult,
    LossBreakdown,
    Segment,
    SmoConfig,
    decode_segments,
    decode_segments_ordered,
    exclusivity_loss,
    grad_total_loss,
    intra_contrastive_loss,
    normalize_masks,
    optimize_masks,
    smoothness_loss,
    total_loss,
)
from .synth import SynthSpec, brute_force_best_segmentation, finite_diff_grad, generate_instance

__all__ = [
    "__version__",
    "AttentionPoolEmbedder",
    "AttentionPoolParams",
    "ConfigError",
    "DecompositionParseError",
    "DecompositionResult",
    "DegeneratePoolingError",
    "DegenerateVectorError",
    "EvalInputError",
    "EvalReport",
    "GroundingResult",
    "GtSegment",
    "HttpChatClient",
    "Instance",
    "InvalidInputError",
    "LossBreakdown",
    "LspConfig",
    "LspUnavailableError",
    "MockClient",
    "NumericalError",
    "OptimizationDivergedError",
    "PretrainConfig",
    "Query",
    "ResultRecord",
    "Rng",
    "SchemaValidationError",
    "ScoredSegment",
    "Segment",
    "ShapeError",
    "SmoConfig",
    "SoftMaskGrounder",
    "Span",
    "SynthSpec",
    "TooLargeError",
    "attention_pool",
    "average_precision",
    "brute_force_best_segmentation",
    "decode_segments",
    "decode_segments_ordered",
    "decompose_with_voting",
    "exclusivity_loss",
    "finite_diff_grad",
    "generate_instance",
    "grad_total_loss",
    "intra_contrastive_loss",
    "load_instance",
    "mean_ap",
    "normalize_masks",
    "optimize_masks",
    "pretrain",
    "rule_based_split",
    "save_instance",
    "segment_iou",
    "semantic_similarity_report",
    "sequence_contrastive_loss",
    "smoothness_loss",
    "total_loss",
]
