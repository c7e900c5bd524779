"""Stochastic patch filtering engine for few-shot classification over
precomputed patch embeddings."""

from .domain import (
    EmbeddingDataset,
    Episode,
    EpisodeSpec,
    InvariantViolation,
    PatchEmbeddingSet,
    RunConfig,
    ScorerParams,
    SelectionResult,
    validate_dataset,
)
from .filtering import (
    DegenerateClassTokenError,
    class_aware_addition,
    class_similarity,
    filter_patches,
    l2_normalize,
    select_deterministic,
    select_mixed,
    select_random,
    select_stochastic,
    similarity_to_probabilities,
)
from .scoring import (
    EpisodeScores,
    MlpScorer,
    ScorerGrads,
    aggregate_shots,
    classify,
    cross_entropy_loss,
    episode_backward,
    episode_forward,
    init_scorer,
    mlp_score,
    pairwise_matrix,
)
from .dataio import (
    EmbeddingFileHeader,
    FileFormatError,
    SyntheticSpec,
    TruncatedPayloadError,
    foreground_recovery,
    generate_synthetic,
    make_splits,
    read_dataset,
    read_header,
    write_dataset,
)
from .training import (
    EpisodeResult,
    EvalReport,
    OptimizerState,
    TrainState,
    TrainingDivergedError,
    apply_gradients,
    config_hash,
    evaluate,
    init_optimizer,
    load_checkpoint,
    run_episode,
    sample_episode,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
