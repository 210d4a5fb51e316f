"""LLM-backed annotation workflow.

Pipeline 1 collects extension tags (entities, segmentation, part of speech),
standardizes their labels, and fuses them into the corpus. Pipeline 2
synthesizes explanation texts and annotates them with a frozen model plus a
Pipeline 1 re-run. Both pipelines run live against an HTTP endpoint or fully
offline from recorded fixtures.
"""

from .client import (
    API_KEY_ENV,
    FixtureMissingError,
    FixtureStore,
    HttpTransport,
    LlmClient,
    TransportError,
    WorkflowError,
    request_key,
)
from .parsing import parse_free_text, parse_pair_lines, parse_seg_lines, parse_synonym_groups
from .pipeline import (
    ExtractionResult,
    MergeStage,
    Pipeline1Result,
    Pipeline2Result,
    PipelineStats,
    SynthesisResult,
    annotate_synthetic,
    build_fusion_set,
    combine_seg_pos,
    run_extraction,
    run_label_merge,
    run_pipeline1,
    run_pipeline2,
    run_pos,
    synthesize_explanations,
)
from .prompts import TEMPLATE_NAMES, TEMPLATES, PromptError, PromptTemplate

__all__ = [
    "API_KEY_ENV",
    "ExtractionResult",
    "FixtureMissingError",
    "FixtureStore",
    "HttpTransport",
    "LlmClient",
    "MergeStage",
    "Pipeline1Result",
    "Pipeline2Result",
    "PipelineStats",
    "PromptError",
    "PromptTemplate",
    "SynthesisResult",
    "TEMPLATES",
    "TEMPLATE_NAMES",
    "TransportError",
    "WorkflowError",
    "annotate_synthetic",
    "build_fusion_set",
    "combine_seg_pos",
    "parse_free_text",
    "parse_pair_lines",
    "parse_seg_lines",
    "parse_synonym_groups",
    "request_key",
    "run_extraction",
    "run_label_merge",
    "run_pipeline1",
    "run_pipeline2",
    "run_pos",
    "synthesize_explanations",
]
