"""Synonymous label merging.

LLM-proposed synonym groups are refined with embedding clusters: each raw
label's (entity, label) pairs are embedded, a reference cluster is chosen per
standard label, and a candidate is merged only when its centroid lies within
epsilon times the reference's mean radius. Everything here is pure and
deterministic given the embedder.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import AnnotatedSample, Span

log = logging.getLogger(__name__)

PAIR_TEMPLATE = "{entity} is {label}"

Embedder = Callable[[str], np.ndarray]


class MergeError(ValueError):
    """Invalid synonym map, missing cluster, or embedder failure."""


@dataclass(frozen=True)
class EntityTypePair:
    """One extracted entity surface with its raw label string."""

    entity: str
    raw_label: str

    def __post_init__(self) -> None:
        if not self.entity or not self.raw_label:
            raise MergeError("entity and raw_label must be non-empty")

    def render(self) -> str:
        return PAIR_TEMPLATE.format(entity=self.entity, label=self.raw_label)


@dataclass(frozen=True)
class MergePolicy:
    """Acceptance policy: radius multiplier and Top-p farthest sample count."""

    epsilon: float = 1.5
    top_p: int = 5

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise MergeError("epsilon must be positive")
        if self.top_p < 1:
            raise MergeError("top_p must be at least 1")


class SynonymMap:
    """Mapping from a standard label to its synonym labels.

    Each synonym appears under exactly one standard label.
    """

    def __init__(self, entries: dict[str, Sequence[str]]):
        seen: set[str] = set()
        for standard, synonyms in entries.items():
            for syn in synonyms:
                if syn in seen:
                    raise MergeError(f"synonym {syn!r} appears under more than one standard label")
                seen.add(syn)
        self.entries: dict[str, tuple[str, ...]] = {k: tuple(v) for k, v in entries.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, SynonymMap) and self.entries == other.entries

    def __repr__(self) -> str:
        return f"SynonymMap({self.entries!r})"


@dataclass(frozen=True)
class LabelCluster:
    """Embedded vectors of one raw label with centroid and mean radius."""

    label: str
    vectors: tuple[np.ndarray, ...]
    centroid: np.ndarray
    radius: float

    @property
    def count(self) -> int:
        return len(self.vectors)

    @classmethod
    def build(cls, label: str, vectors: Sequence[np.ndarray], policy: MergePolicy) -> "LabelCluster":
        centroid, radius = cluster_stats(vectors, policy)
        return cls(label=label, vectors=tuple(vectors), centroid=centroid, radius=radius)


def embed_pairs(pairs: Sequence[EntityTypePair], embedder: Embedder) -> list[np.ndarray]:
    """Embed each pair rendered as "<entity> is <label>", preserving order."""
    vectors = []
    dim: int | None = None
    for i, pair in enumerate(pairs):
        try:
            vec = np.asarray(embedder(pair.render()), dtype=np.float64)
        except Exception as exc:
            raise MergeError(f"embedder failed on pair {i} ({pair.render()!r}): {exc}") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise MergeError(f"embedder returned a non-finite or non-vector result for pair {i}")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise MergeError(f"embedding dimension changed at pair {i}: {vec.shape[0]} != {dim}")
        vectors.append(vec)
    return vectors


def cluster_stats(vectors: Sequence[np.ndarray], policy: MergePolicy) -> tuple[np.ndarray, float]:
    """Centroid and mean distance of the Top-p farthest vectors from it."""
    if len(vectors) == 0:
        raise MergeError("cluster_stats requires at least one vector")
    matrix = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    centroid = matrix.mean(axis=0)
    distances = np.linalg.norm(matrix - centroid, axis=1)
    k = min(policy.top_p, len(vectors))
    farthest = np.sort(distances)[-k:]
    return centroid, float(farthest.mean())


def select_reference(clusters: Sequence[LabelCluster]) -> LabelCluster:
    """Reference cluster: most samples, then largest radius, then label order."""
    if not clusters:
        raise MergeError("select_reference requires at least one cluster")
    return min(clusters, key=lambda c: (-c.count, -c.radius, c.label))


@dataclass(frozen=True)
class MergeDecision:
    """Audit row for one raw label's merge outcome."""

    raw_label: str
    standard_label: str
    count: int
    radius: float
    centroid_norm: float
    reference: str | None
    distance: float | None
    merged: bool

    def to_dict(self) -> dict:
        return {
            "raw_label": self.raw_label,
            "standard_label": self.standard_label,
            "count": self.count,
            "radius": self.radius,
            "centroid_norm": self.centroid_norm,
            "reference": self.reference,
            "distance": self.distance,
            "merged": self.merged,
        }


def merge_decisions(
    raw: SynonymMap,
    clusters: dict[str, LabelCluster],
    policy: MergePolicy,
) -> list[MergeDecision]:
    """Evaluate the merge criterion for every raw label.

    Synonyms of a standard label are tested against the group's reference
    cluster; those failing the criterion become independent standard labels.
    Raw labels absent from the synonym map pass through unchanged.
    """
    decisions: list[MergeDecision] = []
    grouped: set[str] = set()
    for standard in sorted(raw.entries):
        synonyms = raw.entries[standard]
        group = []
        for syn in synonyms:
            if syn not in clusters:
                raise MergeError(f"no cluster for mapped label {syn!r}")
            group.append(clusters[syn])
        if not group:
            continue
        reference = select_reference(group)
        for cluster in group:
            grouped.add(cluster.label)
            if cluster.label == reference.label:
                target, distance, merged = standard, 0.0, True
            else:
                distance = float(np.linalg.norm(cluster.centroid - reference.centroid))
                merged = distance <= policy.epsilon * reference.radius
                target = standard if merged else cluster.label
            decisions.append(
                MergeDecision(
                    raw_label=cluster.label,
                    standard_label=target,
                    count=cluster.count,
                    radius=cluster.radius,
                    centroid_norm=float(np.linalg.norm(cluster.centroid)),
                    reference=reference.label,
                    distance=distance,
                    merged=merged,
                )
            )
    for label in sorted(clusters):
        if label not in grouped:
            cluster = clusters[label]
            decisions.append(
                MergeDecision(
                    raw_label=label,
                    standard_label=label,
                    count=cluster.count,
                    radius=cluster.radius,
                    centroid_norm=float(np.linalg.norm(cluster.centroid)),
                    reference=None,
                    distance=None,
                    merged=False,
                )
            )
    return decisions


def merge_labels(
    raw: SynonymMap,
    clusters: dict[str, LabelCluster],
    policy: MergePolicy,
) -> dict[str, str]:
    """Final raw-label to standard-label mapping (total over all raw labels)."""
    return {d.raw_label: d.standard_label for d in merge_decisions(raw, clusters, policy)}


def build_clusters(
    pairs: Sequence[EntityTypePair],
    embedder: Embedder,
    policy: MergePolicy,
) -> dict[str, LabelCluster]:
    """Group pairs by raw label and embed each group into a cluster."""
    vectors = embed_pairs(pairs, embedder)
    by_label: dict[str, list[np.ndarray]] = {}
    for pair, vec in zip(pairs, vectors):
        by_label.setdefault(pair.raw_label, []).append(vec)
    return {label: LabelCluster.build(label, vecs, policy) for label, vecs in by_label.items()}


def apply_label_mapping(
    samples: Iterable[AnnotatedSample],
    mapping: dict[str, str],
) -> list[AnnotatedSample]:
    """Rename every extension span's label to its standard label."""
    out = []
    for sample in samples:
        renamed = set()
        for span in sample.extension_spans:
            if span.label not in mapping:
                raise MergeError(f"unmapped extension label {span.label!r}")
            renamed.add(Span(span.start, span.end, mapping[span.label]))
        out.append(sample.with_extension_spans(renamed))
    return out


class HashEmbedder:
    """Deterministic text-to-vector stub.

    Hashes the input to seed a fixed-dimension Gaussian draw. With
    ``bag_of_words=True`` the embedding is the mean of per-word vectors, so
    texts sharing words land near each other; useful when merge decisions
    should loosely track surface overlap.
    """

    def __init__(self, dim: int = 32, bag_of_words: bool = False):
        self.dim = dim
        self.bag_of_words = bag_of_words

    def _word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.dim)

    def __call__(self, text: str) -> np.ndarray:
        if not self.bag_of_words:
            return self._word_vector(text)
        words = text.split() or [text]
        return np.mean([self._word_vector(w) for w in words], axis=0)
