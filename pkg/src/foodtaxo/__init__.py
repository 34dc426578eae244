"""Staged, taxonomy-constrained food recognition on top of vision-language models."""

from .backend import (
    BackendRequest,
    BackendResponse,
    DecodeParams,
    HttpConfig,
    MockBackend,
    MockScript,
    NoiseConfig,
    make_http_backend,
    make_mock_backend,
)
from .engine import (
    CheckOutcome,
    ErrorCode,
    Mode,
    PredictionRecord,
    RecoveryPolicy,
    StageResult,
    Triple,
    build_prompt,
    classify,
    classify_many,
    classify_one_shot,
    run_stage,
    validate,
)
from .estimator import ImagePreprocessor, StagedFoodClassifier
from .evalkit import (
    AnnotatedImage,
    compute_ewr,
    compute_prf,
    evaluate,
    latency_summary,
    load_annotations,
    load_predictions,
)
from .imageio import PreparedImage, PreprocessConfig, preprocess
from .ontology import (
    UNKNOWN,
    Label,
    StageId,
    Taxonomy,
    candidates,
    dump_taxonomy,
    is_valid_child,
    load_taxonomy,
    load_taxonomy_file,
)
from .textnorm import (
    MatchKind,
    MatchOutcome,
    NormalizerConfig,
    canonicalize,
    load_synonyms,
    normalize_surface,
    parse_strict_json,
    similarity,
)

__version__ = "0.1.0"
