"""Probabilistic embedding toolkit: Gaussian embeddings with distances,
training objectives, retrieval, evaluation, and a binary interchange format.
"""

from .core import (
    BadConfig,
    BadMagic,
    BadNlist,
    DegenerateRange,
    DimensionMismatch,
    DuplicateId,
    EmbeddingSet,
    EmptyBatch,
    EmptyClass,
    EmptyGallery,
    GaussianEmbedding,
    LengthMismatch,
    MatchTable,
    Modality,
    NoNegative,
    NonFiniteGradient,
    NonFiniteValue,
    OutOfRange,
    PembError,
    ShapeMismatch,
    ShortlistTooSmall,
    TruncatedFile,
    UnknownId,
    VarianceUnderflow,
    VersionUnsupported,
    make_embedding,
    uncertainty_mass,
)
from .distances import (
    VARIANCE_FLOOR,
    DistanceKind,
    McConfig,
    bhattacharyya,
    csd,
    distance,
    elk_neglog,
    euclidean_mu_only,
    js_mc,
    kl_gaussian,
    pairwise_distance_matrix,
    pcme_match_prob,
    wasserstein2_sq,
)
from .objectives import (
    GradientBundle,
    LossReport,
    ObjectiveParams,
    find_pseudo_positives,
    infonce_loss,
    match_loss,
    mix_labels,
    total_objective,
    triplet_loss,
    vib_loss,
)
from .fileio import (
    read_annotations,
    read_embeddings_jsonl,
    read_pemb,
    write_annotations,
    write_embeddings_jsonl,
    write_pemb,
)
from .metrics import (
    MetricReport,
    PromptFilterReport,
    QueryDiagnostic,
    UncertaintyProfile,
    evaluate,
    map_at_r,
    prompt_filter_eval,
    r_precision,
    rank_by_distance,
    recall_at_k,
    rsum,
    uncertainty_profile,
)
from .optim import AdamState, adam_step, finite_diff_check
from .retrieval import (
    CoarseConfig,
    ProbIndex,
    RankedList,
    batch_search,
    build_index,
    load_index,
    save_index,
    search_exact,
    search_two_stage,
)
from .toybench import MixConfig, ToyConfig, ToyDataset, ToyReport, generate_toy, run_toy

__version__ = "0.1.0"
