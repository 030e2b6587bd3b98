"""LLM-based column type annotation: prompting strategies, definition
refinement, self-correction, fine-tuning set export and cost accounting."""

from .corpus import Corpus, TableDoc, Vocabulary, downsample, filter_domains, load_corpus, save_corpus
from .definitions import (
    Definition,
    ErrorDigest,
    collect_errors,
    generate_comparative,
    generate_demonstration,
    generate_initial,
    refine,
)
from .gateway import (
    BackendConfig,
    ChatMessage,
    Completion,
    HttpBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    build_backend,
    estimate_tokens,
)
from .ledger import PriceSheet, UsageEntry, breakeven_columns, cost_per_column, total_cost
from .metrics import MetricsReport, diff_runs, error_table, score
from .prompts import (
    ColumnPrediction,
    PromptVariant,
    build_annotation_prompt,
    build_task_description,
    parse_annotation_response,
    parse_review_response,
)
from .reviewer import select_comparative_for_prediction, self_correct
from .runner import Run, annotate, annotate_self_consistency, load_run, save_run
from .selector import (
    EmbeddingVector,
    HashedEmbedder,
    cosine,
    mean_demo_similarity,
    select_definitions,
    select_demonstrations,
)
from .serialize import SerializationOptions, serialize_table

__version__ = "0.1.0"
