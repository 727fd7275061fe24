"""Part-aligned bilinear re-identification at desk scale.

A minimal tape-based autodiff tensor core, a two-stream network
(appearance plus staged part extraction), exact and compact (tensor
sketch) bilinear pooling, triplet/identity/layer-wise losses with
batch-hard mining, a synthetic dataset generator, and query/gallery
retrieval evaluation.
"""

from .config import RunConfig, config_digest, load_config, parse_config, serialize_config
from .datasynth import (
    Manifest,
    PKBatch,
    Sample,
    generate_synthetic,
    load_manifest,
    sample_pk_batch,
    save_manifest,
)
from .errors import (
    ConfigurationError,
    DataIOError,
    EvaluationError,
    NumericError,
    PartReidError,
    UsageError,
    ValidationError,
)
from .losses import (
    LayerwiseSpec,
    LossReport,
    TripletSpec,
    cross_entropy,
    euclidean_distance,
    layerwise_similarity_loss,
    mine_batch_hard,
    total_loss,
    triplet_loss,
)
from .model import Model, build_model, load_model, model_digest, save_model
from .pooling import (
    PooledDescriptor,
    SketchParams,
    bilinear_pool_exact,
    circular_convolve,
    compact_bilinear,
    compact_bilinear_pool,
    count_sketch,
    l2_normalize,
    l2_normalize_vector,
)
from .retrieval import (
    EvalReport,
    RankingResult,
    average_precision,
    evaluate,
    evaluate_descriptors,
    extract_descriptors,
    rank_gallery,
)
from .streams import (
    ConvSpec,
    FeatureMap,
    LayerTap,
    StreamConfig,
    appearance_forward,
    init_stream_params,
    part_forward,
    two_stream_forward,
)
from .tensor import Tape, Tensor, backward, finite_diff_check
from .train import TrainResult, run_training
from .tsrio import read_tensor, write_tensor

__version__ = "0.1.0"
