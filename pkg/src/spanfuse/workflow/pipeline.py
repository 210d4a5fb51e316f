"""Annotation pipelines built on the LLM client.

Pipeline 1: extract entity/seg/pos tags per sample, standardize entity labels
with the synonym merge, ground every surface in its sentence, and attach the
grounded spans as extension annotations (provenance "fusion").

Pipeline 2: synthesize explanation texts for each sample, annotate target
spans with a frozen model, and re-run Pipeline 1 extraction on the synthetic
texts for their extension spans (provenance "synthetic").
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..corpus import AnnotatedSample, LabelVocabulary, Span, TokenSequence, ground_entity_mentions
from ..label_merge import (
    Embedder,
    EntityTypePair,
    MergeDecision,
    MergePolicy,
    SynonymMap,
    build_clusters,
    merge_decisions,
)
from .client import LlmClient, WorkflowError
from .parsing import SEG_LABEL, parse_free_text, parse_pair_lines, parse_seg_lines, parse_synonym_groups
from .prompts import TEMPLATES, PromptTemplate

log = logging.getLogger(__name__)

EXTRACTION_KINDS = ("ent", "seg", "pos")
FALLBACK_POS = "X"


@dataclass(frozen=True)
class ExtractionResult:
    """Parsed (surface, label) items of one extraction call."""

    sample_id: int
    kind: str
    items: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if self.kind not in EXTRACTION_KINDS:
            raise WorkflowError(f"unknown extraction kind {self.kind!r}")
        for surface, label in self.items:
            if not surface:
                raise WorkflowError("extraction surfaces must be non-empty")
            if self.kind == "seg" and label != SEG_LABEL:
                raise WorkflowError(f"seg items must use label {SEG_LABEL!r}, got {label!r}")


@dataclass(frozen=True)
class SynthesisResult:
    """One generated explanation text."""

    sample_id: int
    text: str
    origin: str

    def __post_init__(self) -> None:
        if self.origin not in ("exp", "ext"):
            raise WorkflowError(f"unknown synthesis origin {self.origin!r}")
        if not self.text:
            raise WorkflowError("synthesis text must be non-empty")


@dataclass
class PipelineStats:
    """Mutable counters shared across pipeline stages."""

    parse_failures: int = 0
    grounding_misses: int = 0
    coverage_warnings: int = 0
    dropped_generations: int = 0
    skipped_synthetic: int = 0
    unknown_merge_labels: int = 0

    def to_dict(self) -> dict:
        return {
            "parse_failures": self.parse_failures,
            "grounding_misses": self.grounding_misses,
            "coverage_warnings": self.coverage_warnings,
            "dropped_generations": self.dropped_generations,
            "skipped_synthetic": self.skipped_synthetic,
            "unknown_merge_labels": self.unknown_merge_labels,
        }


def _parse_extraction(kind: str, response: str) -> tuple[tuple[str, str], ...]:
    pairs = parse_seg_lines(response) if kind == "seg" else parse_pair_lines(response)
    return tuple(pairs)


def run_extraction(
    samples: Sequence[AnnotatedSample],
    template: PromptTemplate,
    client: LlmClient,
    stats: PipelineStats | None = None,
    render_fields: Callable[[AnnotatedSample], dict[str, str]] | None = None,
) -> list[ExtractionResult]:
    """One extraction call per sample; results in input order.

    A non-empty response with no parseable items yields empty items and bumps
    the parse-failure counter instead of aborting. A blank ent response is a
    legitimate "no entities here" answer and is not counted.
    """
    if template.name not in EXTRACTION_KINDS:
        raise WorkflowError(f"run_extraction needs an ent/seg/pos template, got {template.name!r}")
    stats = stats if stats is not None else PipelineStats()
    prompts = []
    for sample in samples:
        fields = {"sentence": sample.sequence.text}
        if render_fields is not None:
            fields.update(render_fields(sample))
        prompts.append(template.render(**fields))
    responses = client.complete_many([(template.name, p) for p in prompts])
    results = []
    for i, response in enumerate(responses):
        items = _parse_extraction(template.name, response)
        if not items and (template.name != "ent" or response.strip()):
            stats.parse_failures += 1
            log.warning("no parseable %s items for sample %d", template.name, i)
        results.append(ExtractionResult(sample_id=i, kind=template.name, items=items))
    return results


def _pos_items(
    words: Sequence[str],
    response: str,
    sample_id: int,
    stats: PipelineStats,
) -> tuple[tuple[str, str], ...]:
    tags: dict[str, str] = {}
    for surface, tag in parse_pair_lines(response):
        tags.setdefault(surface, tag)
    items = []
    for word in words:
        tag = tags.get(word)
        if tag is None:
            stats.coverage_warnings += 1
            log.warning("pos response omits word %r of sample %d; tagging %s", word, sample_id, FALLBACK_POS)
            tag = FALLBACK_POS
        items.append((word, tag))
    return tuple(items)


def combine_seg_pos(
    sample: AnnotatedSample,
    seg: ExtractionResult,
    client: LlmClient,
    template: PromptTemplate,
    stats: PipelineStats | None = None,
) -> ExtractionResult:
    """POS tags for every segmentation word of one sample.

    The prompt carries both the sentence and the word list; words the
    response misses fall back to tag X with a coverage warning.
    """
    stats = stats if stats is not None else PipelineStats()
    words = [surface for surface, _ in seg.items]
    if not words:
        return ExtractionResult(sample_id=seg.sample_id, kind="pos", items=())
    prompt = template.render(sentence=sample.sequence.text, words="\n".join(words))
    response = client.complete(template.name, prompt)
    return ExtractionResult(
        sample_id=seg.sample_id,
        kind="pos",
        items=_pos_items(words, response, seg.sample_id, stats),
    )


def run_pos(
    samples: Sequence[AnnotatedSample],
    seg_results: Sequence[ExtractionResult],
    client: LlmClient,
    template: PromptTemplate,
    stats: PipelineStats | None = None,
) -> list[ExtractionResult]:
    """Batched combine_seg_pos over aligned samples and seg results."""
    if len(samples) != len(seg_results):
        raise WorkflowError("samples and seg results are not aligned")
    stats = stats if stats is not None else PipelineStats()
    requests = []
    word_lists: list[list[str]] = []
    for sample, seg in zip(samples, seg_results):
        words = [surface for surface, _ in seg.items]
        word_lists.append(words)
        if words:
            prompt = template.render(sentence=sample.sequence.text, words="\n".join(words))
            requests.append((len(word_lists) - 1, prompt))
    responses = client.complete_many([(template.name, p) for _, p in requests])
    by_index = {index: response for (index, _), response in zip(requests, responses)}
    results = []
    for i, words in enumerate(word_lists):
        if not words:
            results.append(ExtractionResult(sample_id=i, kind="pos", items=()))
        else:
            results.append(
                ExtractionResult(sample_id=i, kind="pos", items=_pos_items(words, by_index[i], i, stats))
            )
    return results


def _grounded_extension_spans(
    sequence: TokenSequence,
    results: Sequence[ExtractionResult],
    mapping: dict[str, str],
    stats: PipelineStats,
) -> set[Span]:
    spans: set[Span] = set()
    for result in results:
        for surface, label in result.items:
            standard = mapping.get(label, label)
            matches = ground_entity_mentions(sequence, surface, standard)
            if not matches:
                stats.grounding_misses += 1
                log.debug("surface %r not found in sample %d", surface, result.sample_id)
            spans.update(matches)
    return spans


def build_fusion_set(
    samples: Sequence[AnnotatedSample],
    ent_results: Sequence[ExtractionResult],
    seg_results: Sequence[ExtractionResult],
    pos_results: Sequence[ExtractionResult],
    mapping: dict[str, str],
    stats: PipelineStats | None = None,
) -> list[AnnotatedSample]:
    """Original samples plus grounded, label-standardized extension spans.

    Target spans pass through untouched; ungroundable surfaces are dropped
    and counted. Provenance becomes "fusion".
    """
    if not (len(samples) == len(ent_results) == len(seg_results) == len(pos_results)):
        raise WorkflowError("extraction results are not aligned with samples")
    stats = stats if stats is not None else PipelineStats()
    fused = []
    for i, sample in enumerate(samples):
        spans = _grounded_extension_spans(
            sample.sequence, (ent_results[i], seg_results[i], pos_results[i]), mapping, stats
        )
        fused.append(sample.with_extension_spans(spans, provenance="fusion"))
    return fused


@dataclass
class Pipeline1Result:
    fusion: list[AnnotatedSample]
    mapping: dict[str, str]
    decisions: list[MergeDecision]
    synonym_groups: dict[str, list[str]]
    stats: PipelineStats


def _merge_inventory(pairs: Sequence[EntityTypePair], examples_per_label: int) -> str:
    surfaces: dict[str, list[str]] = {}
    for pair in pairs:
        bucket = surfaces.setdefault(pair.raw_label, [])
        if pair.entity not in bucket and len(bucket) < examples_per_label:
            bucket.append(pair.entity)
    lines = [f"{label}: {', '.join(surfaces[label])}" for label in sorted(surfaces)]
    return "\n".join(lines)


@dataclass(frozen=True)
class MergeStage:
    """Outcome of the label-standardization step."""

    mapping: dict[str, str]
    decisions: list[MergeDecision]
    synonym_groups: dict[str, list[str]]


def run_label_merge(
    pairs: Sequence[EntityTypePair],
    client: LlmClient,
    embedder: Embedder,
    policy: MergePolicy | None = None,
    templates: dict[str, PromptTemplate] = TEMPLATES,
    stats: PipelineStats | None = None,
    examples_per_label: int = 3,
) -> MergeStage:
    """Cluster extracted labels, query synonym groups, decide standard names.

    Synonym-group members that never appeared in the extraction inventory are
    dropped and counted rather than trusted.
    """
    stats = stats if stats is not None else PipelineStats()
    policy = policy if policy is not None else MergePolicy()
    if not pairs:
        return MergeStage(mapping={}, decisions=[], synonym_groups={})
    clusters = build_clusters(pairs, embedder, policy)
    prompt = templates["merge"].render(labels=_merge_inventory(pairs, examples_per_label))
    response = client.complete("merge", prompt)
    groups: dict[str, list[str]] = {}
    for standard, synonyms in parse_synonym_groups(response).items():
        known = [s for s in synonyms if s in clusters]
        unknown = len(synonyms) - len(known)
        if unknown:
            stats.unknown_merge_labels += unknown
            log.warning("merge response names %d unknown labels under %r", unknown, standard)
        if known:
            groups[standard] = known
    decisions = merge_decisions(SynonymMap(groups), clusters, policy)
    mapping = {d.raw_label: d.standard_label for d in decisions}
    return MergeStage(mapping=mapping, decisions=decisions, synonym_groups=groups)


def run_pipeline1(
    samples: Sequence[AnnotatedSample],
    client: LlmClient,
    embedder: Embedder,
    policy: MergePolicy | None = None,
    templates: dict[str, PromptTemplate] = TEMPLATES,
    stats: PipelineStats | None = None,
    merge_examples_per_label: int = 3,
) -> Pipeline1Result:
    """Label extension annotation: extract, merge labels, ground, fuse."""
    stats = stats if stats is not None else PipelineStats()
    policy = policy if policy is not None else MergePolicy()
    ent_results = run_extraction(samples, templates["ent"], client, stats)
    seg_results = run_extraction(samples, templates["seg"], client, stats)
    pos_results = run_pos(samples, seg_results, client, templates["pos"], stats)

    pairs = [
        EntityTypePair(surface, label)
        for result in ent_results
        for surface, label in result.items
    ]
    merge = run_label_merge(
        pairs,
        client,
        embedder,
        policy=policy,
        templates=templates,
        stats=stats,
        examples_per_label=merge_examples_per_label,
    )
    fusion = build_fusion_set(samples, ent_results, seg_results, pos_results, merge.mapping, stats)
    return Pipeline1Result(
        fusion=fusion,
        mapping=merge.mapping,
        decisions=merge.decisions,
        synonym_groups=merge.synonym_groups,
        stats=stats,
    )


def synthesize_explanations(
    samples: Sequence[AnnotatedSample],
    client: LlmClient,
    templates: dict[str, PromptTemplate] = TEMPLATES,
    stats: PipelineStats | None = None,
    per_sample: int = 1,
    max_chars: int = 2000,
) -> list[SynthesisResult]:
    """Explanation texts: one exp call per target entity, one ext call per
    entity-free sample. Empty generations are dropped with a warning."""
    stats = stats if stats is not None else PipelineStats()
    requests: list[tuple[str, str, int, str]] = []
    for i, sample in enumerate(samples):
        sentence = sample.sequence.text
        if sample.target_spans:
            for span in sorted(sample.target_spans):
                entity = sample.sequence.slice_text(span.start, span.end)
                base = templates["exp"].render(sentence=sentence, entity=entity, label=span.label)
                for k in range(per_sample):
                    requests.append(("exp", _variation(base, k), i, "exp"))
        else:
            base = templates["ext"].render(sentence=sentence)
            for k in range(per_sample):
                requests.append(("ext", _variation(base, k), i, "ext"))
    responses = client.complete_many([(name, prompt) for name, prompt, _, _ in requests])
    results = []
    for (name, _, sample_id, origin), response in zip(requests, responses):
        text = parse_free_text(response)[:max_chars].strip()
        if not text:
            stats.dropped_generations += 1
            log.warning("empty %s generation for sample %d dropped", origin, sample_id)
            continue
        results.append(SynthesisResult(sample_id=sample_id, text=text, origin=origin))
    return results


def _variation(prompt: str, k: int) -> str:
    if k == 0:
        return prompt
    return f"{prompt}\n\nProvide variation {k + 1}, distinct from your earlier answers."


def annotate_synthetic(
    syntheses: Sequence[SynthesisResult],
    model,
    client: LlmClient,
    mapping: dict[str, str],
    templates: dict[str, PromptTemplate] = TEMPLATES,
    stats: PipelineStats | None = None,
    threshold: float = 0.5,
    expected_vocab: LabelVocabulary | None = None,
) -> list[AnnotatedSample]:
    """Synthetic samples: frozen-model target spans plus re-extracted
    extension spans. Texts where the model fires nothing are retained."""
    stats = stats if stats is not None else PipelineStats()
    if expected_vocab is not None and model.vocab.target_labels != expected_vocab.target_labels:
        raise WorkflowError(
            f"model targets {model.vocab.target_labels} do not match dataset targets "
            f"{expected_vocab.target_labels}"
        )
    kept: list[SynthesisResult] = []
    bare: list[AnnotatedSample] = []
    for synthesis in syntheses:
        sequence = TokenSequence.from_text(synthesis.text, model.tokenizer)
        if len(sequence) == 0:
            stats.skipped_synthetic += 1
            log.warning("synthetic text for sample %d tokenizes to nothing; skipped", synthesis.sample_id)
            continue
        if len(sequence) > model.encoder.config.max_len:
            stats.skipped_synthetic += 1
            log.warning(
                "synthetic text for sample %d has %d tokens (max %d); skipped",
                synthesis.sample_id,
                len(sequence),
                model.encoder.config.max_len,
            )
            continue
        kept.append(synthesis)
        bare.append(AnnotatedSample(sequence=sequence))

    ent_results = run_extraction(bare, templates["ent"], client, stats)
    seg_results = run_extraction(bare, templates["seg"], client, stats)
    pos_results = run_pos(bare, seg_results, client, templates["pos"], stats)

    out = []
    for i, sample in enumerate(bare):
        targets = model.predict(sample.sequence.text, threshold)
        spans = _grounded_extension_spans(
            sample.sequence, (ent_results[i], seg_results[i], pos_results[i]), mapping, stats
        )
        out.append(
            AnnotatedSample(
                sequence=sample.sequence,
                target_spans=targets,
                extension_spans=spans,
                provenance="synthetic",
            )
        )
    return out


@dataclass
class Pipeline2Result:
    synthetic: list[AnnotatedSample]
    syntheses: list[SynthesisResult]
    stats: PipelineStats


def run_pipeline2(
    samples: Sequence[AnnotatedSample],
    model,
    client: LlmClient,
    mapping: dict[str, str],
    templates: dict[str, PromptTemplate] = TEMPLATES,
    stats: PipelineStats | None = None,
    per_sample: int = 1,
    max_chars: int = 2000,
    threshold: float = 0.5,
    expected_vocab: LabelVocabulary | None = None,
) -> Pipeline2Result:
    """Enriched explanation synthesis plus frozen-model annotation."""
    stats = stats if stats is not None else PipelineStats()
    syntheses = synthesize_explanations(
        samples, client, templates=templates, stats=stats, per_sample=per_sample, max_chars=max_chars
    )
    synthetic = annotate_synthetic(
        syntheses,
        model,
        client,
        mapping,
        templates=templates,
        stats=stats,
        threshold=threshold,
        expected_vocab=expected_vocab,
    )
    return Pipeline2Result(synthetic=synthetic, syntheses=syntheses, stats=stats)
