"""varir: benchmark, train, and evaluate retrieval across language varieties.

The toolkit builds seeded cross-variety retrieval benchmarks, runs BM25
and hashing bi-encoder rankers over them, fine-tunes the encoder
contrastively on transduced queries, and measures how effectiveness
changes across varieties, training conditions, and variety families.
"""

from .corpus import (
    Document,
    DocumentCollection,
    Query,
    QuerySet,
    Ranking,
    Run,
    RunEntry,
    Qrels,
    load_collection,
    load_qrels,
    load_queries,
    read_run,
    restrict_qrels,
    run_entries_to_rankings,
    save_qrels,
    write_run,
)
from .errors import (
    ConfigInvalid,
    DegenerateEmbedding,
    DimensionMismatch,
    DuplicateId,
    DuplicateLexiconKey,
    EmptyCollection,
    EmptyLhs,
    EmptyPool,
    EmptyText,
    EmptyToken,
    FamilyOverlap,
    IoFailure,
    MalformedRecord,
    MissingTrainedParams,
    NegativeGrade,
    NoPositives,
    NonContiguousRanks,
    NonFiniteLoss,
    PairNotUnseen,
    QuerySetMismatch,
    RuleSyntaxError,
    StaleEncodings,
    UnknownDocId,
    VarirError,
)
from .encoder import (
    EncodedText,
    EncoderParams,
    EncodingStore,
    ScoringMode,
    SubwordHasherConfig,
    encode,
    hash_subwords,
    init_params,
    load_params,
    rerank,
    save_params,
    score_maxsim,
    score_single_vector,
    search_dense,
)
from .evaluation import (
    ComparisonResult,
    EvalReport,
    MetricSpec,
    compare_runs,
    evaluate_run,
    mrr_at_k,
    ndcg_at_k,
    recall_at_k,
    sign_test,
)
from .lexical import (
    AnalyzerConfig,
    BM25Params,
    InvertedIndex,
    analyze,
    bm25_score_naive,
    bm25_search,
    build_index,
    load_index,
    save_index,
)
from .training import (
    LossReport,
    TrainConfig,
    TrainingTriplet,
    build_triplets,
    gradient_check,
    infonce_loss,
    train,
)
from .transducer import (
    FamilySpec,
    RewriteRule,
    Scope,
    VarietyRuleSet,
    generate_family,
    load_ruleset,
    parse_ruleset,
    transduce,
    transduce_queryset,
)
from .config import (
    ExperimentConfig,
    config_hash,
    load_config,
    parse_config,
    validate_config,
    with_overrides,
)
from .synth import SynthBenchmark, build_family_specs, build_rulesets, synthesize_corpus
from .experiments import (
    ExperimentContext,
    emit_plot_data,
    ensure_family_disjointness,
    identity_control_rows,
    read_table,
    run_all,
    run_rq1,
    run_rq2,
    run_rq3,
    run_rq4,
    write_report,
)

__version__ = "0.1.0"
