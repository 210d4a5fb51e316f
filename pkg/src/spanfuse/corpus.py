"""Data model, JSONL on-disk format, BIO conversion, and span grounding.

A corpus is a list of annotated samples. Each sample owns a token sequence
(characters for character-dense text, whitespace tokens otherwise), a set of
target spans (the labels the model must predict) and a set of extension spans
(auxiliary labels used only during training). Spans are inclusive on both
ends. Nested and overlapping spans are permitted in both sets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

log = logging.getLogger(__name__)

PROVENANCES = ("original", "fusion", "synthetic")
TOKENIZER_MODES = ("char", "whitespace")


class CorpusError(ValueError):
    """Malformed corpus file or invalid annotation."""


def tokenize(text: str, mode: str) -> tuple[str, ...]:
    """Split raw text into tokens.

    ``char`` mode yields one token per character (for character-dense
    languages). ``whitespace`` mode splits on whitespace runs; the canonical
    text of the resulting sequence uses single spaces.
    """
    if mode == "char":
        return tuple(text)
    if mode == "whitespace":
        return tuple(text.split())
    raise CorpusError(f"unknown tokenizer mode {mode!r}")


def joiner_for_mode(mode: str) -> str:
    if mode not in TOKENIZER_MODES:
        raise CorpusError(f"unknown tokenizer mode {mode!r}")
    return "" if mode == "char" else " "


@dataclass(frozen=True)
class TokenSequence:
    """An ordered sequence of text units plus the joiner that restores text."""

    tokens: tuple[str, ...]
    joiner: str = ""

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise CorpusError("token sequence must contain at least one token")
        if any(not isinstance(t, str) or not t for t in self.tokens):
            raise CorpusError("tokens must be non-empty strings")

    @classmethod
    def from_text(cls, text: str, mode: str = "char") -> "TokenSequence":
        return cls(tokens=tokenize(text, mode), joiner=joiner_for_mode(mode))

    @property
    def text(self) -> str:
        return self.joiner.join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def slice_text(self, start: int, end: int) -> str:
        """Text of the inclusive token range [start, end]."""
        return self.joiner.join(self.tokens[start : end + 1])


@dataclass(frozen=True, order=True)
class Span:
    """Inclusive token range carrying one label."""

    start: int
    end: int
    label: str

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise CorpusError(f"invalid span bounds ({self.start}, {self.end})")
        if not self.label:
            raise CorpusError("span label must be non-empty")


def _check_spans_in_bounds(spans: Iterable[Span], length: int) -> None:
    for span in spans:
        if span.end >= length:
            raise CorpusError(
                f"span out of bounds: ({span.start}, {span.end}, {span.label}) "
                f"on a {length}-token sentence"
            )


@dataclass(frozen=True)
class AnnotatedSample:
    """One sentence with its target and extension span annotations.

    Duplicate (start, end, label) triples are silently deduplicated by the
    frozenset representation.
    """

    sequence: TokenSequence
    target_spans: frozenset[Span] = field(default_factory=frozenset)
    extension_spans: frozenset[Span] = field(default_factory=frozenset)
    provenance: str = "original"

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_spans", frozenset(self.target_spans))
        object.__setattr__(self, "extension_spans", frozenset(self.extension_spans))
        _check_spans_in_bounds(self.target_spans, len(self.sequence))
        _check_spans_in_bounds(self.extension_spans, len(self.sequence))
        if self.provenance not in PROVENANCES:
            raise CorpusError(f"unknown provenance {self.provenance!r}")

    def validate_labels(self, vocab: "LabelVocabulary") -> None:
        """Check that span labels fall in the correct vocabulary partition."""
        for span in self.target_spans:
            if span.label not in vocab.target_set:
                raise CorpusError(f"unknown target label {span.label!r}")
        for span in self.extension_spans:
            if span.label not in vocab.extension_set:
                raise CorpusError(f"unknown extension label {span.label!r}")

    def with_extension_spans(self, spans: Iterable[Span], provenance: str | None = None) -> "AnnotatedSample":
        return AnnotatedSample(
            sequence=self.sequence,
            target_spans=self.target_spans,
            extension_spans=frozenset(spans),
            provenance=provenance or self.provenance,
        )


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered label space: target channels first, extension channels after."""

    target_labels: tuple[str, ...]
    extension_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_labels", tuple(self.target_labels))
        object.__setattr__(self, "extension_labels", tuple(self.extension_labels))
        all_labels = self.target_labels + self.extension_labels
        if len(set(all_labels)) != len(all_labels):
            raise CorpusError("labels must be distinct across both partitions")

    @property
    def num_target(self) -> int:
        return len(self.target_labels)

    @property
    def num_extension(self) -> int:
        return len(self.extension_labels)

    @property
    def num_channels(self) -> int:
        return self.num_target + self.num_extension

    @property
    def target_set(self) -> frozenset[str]:
        return frozenset(self.target_labels)

    @property
    def extension_set(self) -> frozenset[str]:
        return frozenset(self.extension_labels)

    def channel(self, label: str) -> int:
        """Channel index of a label; targets occupy [0, num_target)."""
        try:
            return self.target_labels.index(label)
        except ValueError:
            pass
        try:
            return self.num_target + self.extension_labels.index(label)
        except ValueError:
            raise CorpusError(f"unknown label {label!r}") from None

    def label_for_channel(self, channel: int) -> str:
        if 0 <= channel < self.num_target:
            return self.target_labels[channel]
        if self.num_target <= channel < self.num_channels:
            return self.extension_labels[channel - self.num_target]
        raise CorpusError(f"channel {channel} out of range")

    def to_dict(self) -> dict:
        return {
            "target_labels": list(self.target_labels),
            "extension_labels": list(self.extension_labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabelVocabulary":
        return cls(
            target_labels=tuple(data["target_labels"]),
            extension_labels=tuple(data.get("extension_labels", ())),
        )


def _spans_from_record(raw, length: int, what: str) -> frozenset[Span]:
    spans = set()
    for item in raw:
        if not (isinstance(item, (list, tuple)) and len(item) == 3):
            raise CorpusError(f"{what} span must be a [start, end, label] triple, got {item!r}")
        start, end, label = item
        if not (isinstance(start, int) and isinstance(end, int) and isinstance(label, str)):
            raise CorpusError(f"{what} span fields have wrong types: {item!r}")
        span = Span(start, end, label)
        if span.end >= length:
            raise CorpusError(f"span out of bounds: {item!r} on a {length}-token sentence")
        spans.add(span)
    return frozenset(spans)


def record_to_sample(record: dict, tokenizer: str = "char") -> AnnotatedSample:
    """Build a sample from one parsed JSONL record."""
    if "text" not in record:
        raise CorpusError("record is missing the 'text' field")
    sequence = TokenSequence.from_text(record["text"], tokenizer)
    length = len(sequence)
    return AnnotatedSample(
        sequence=sequence,
        target_spans=_spans_from_record(record.get("target", []), length, "target"),
        extension_spans=_spans_from_record(record.get("extension", []), length, "extension"),
        provenance=record.get("provenance", "original"),
    )


def sample_to_record(sample: AnnotatedSample) -> dict:
    """Canonical record: fixed key order, spans sorted by (start, end, label)."""
    return {
        "text": sample.sequence.text,
        "target": [[s.start, s.end, s.label] for s in sorted(sample.target_spans)],
        "extension": [[s.start, s.end, s.label] for s in sorted(sample.extension_spans)],
        "provenance": sample.provenance,
    }


def load_jsonl(
    path: str | Path,
    vocab: LabelVocabulary | None = None,
    tokenizer: str = "char",
) -> list[AnnotatedSample]:
    """Load a JSONL corpus, validating spans and (optionally) labels.

    Errors carry the offending line number. ``vocab=None`` skips label
    validation, for stages that discover the label space from the data.
    """
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                sample = record_to_sample(record, tokenizer)
                if vocab is not None:
                    sample.validate_labels(vocab)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            samples.append(sample)
    return samples


def save_jsonl(samples: Iterable[AnnotatedSample], path: str | Path) -> None:
    """Write samples in the canonical JSONL form (stable bytes)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def _parse_bio_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if tag.startswith("B-") or tag.startswith("I-"):
        kind, label = tag[0], tag[2:]
        if not label:
            raise CorpusError(f"BIO tag {tag!r} has an empty label")
        return kind, label
    raise CorpusError(f"invalid BIO tag {tag!r}")


def bio_to_spans(tags: list[str]) -> set[Span]:
    """Decode BIO tags into spans (lenient: a bare I-x opens a new span)."""
    spans: set[Span] = set()
    open_start: int | None = None
    open_label: str | None = None

    def close(end: int) -> None:
        nonlocal open_start, open_label
        if open_start is not None:
            spans.add(Span(open_start, end, open_label))
            open_start, open_label = None, None

    for i, tag in enumerate(tags):
        kind, label = _parse_bio_tag(tag)
        if kind == "O":
            close(i - 1)
        elif kind == "B":
            close(i - 1)
            open_start, open_label = i, label
        else:  # I-x
            if open_label == label:
                continue
            close(i - 1)
            open_start, open_label = i, label
    close(len(tags) - 1)
    return spans


def spans_to_bio(spans: Iterable[Span], length: int) -> list[str]:
    """Encode flat (non-overlapping) spans as BIO tags."""
    tags = ["O"] * length
    claimed = [False] * length
    for span in sorted(spans):
        if span.end >= length:
            raise CorpusError(f"span ({span.start}, {span.end}) exceeds length {length}")
        if any(claimed[span.start : span.end + 1]):
            raise CorpusError(f"overlapping spans at ({span.start}, {span.end})")
        for i in range(span.start, span.end + 1):
            claimed[i] = True
        tags[span.start] = f"B-{span.label}"
        for i in range(span.start + 1, span.end + 1):
            tags[i] = f"I-{span.label}"
    return tags


def load_bio_file(path: str | Path, joiner: str = "") -> list[AnnotatedSample]:
    """Import a column-format BIO file (token<TAB>tag, blank line between sentences)."""
    path = Path(path)
    samples = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush(lineno: int) -> None:
        if not tokens:
            return
        try:
            spans = bio_to_spans(tags)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        samples.append(
            AnnotatedSample(
                sequence=TokenSequence(tuple(tokens), joiner=joiner),
                target_spans=frozenset(spans),
            )
        )
        tokens.clear()
        tags.clear()

    with path.open(encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) < 2:
                raise CorpusError(f"{path}:{lineno}: expected 'token tag' columns, got {line!r}")
            tokens.append(parts[0])
            tags.append(parts[-1])
        flush(lineno)
    return samples


def ground_entity_mentions(sentence: TokenSequence, surface: str, label: str) -> set[Span]:
    """Find every exact occurrence of ``surface`` as a contiguous token run.

    Occurrences may overlap each other. Surfaces that do not align with token
    boundaries yield no span (the caller logs a grounding miss).
    """
    if not surface:
        raise CorpusError("cannot ground an empty surface")
    spans: set[Span] = set()
    n = len(sentence)
    for start in range(n):
        acc = ""
        for end in range(start, n):
            acc = sentence.tokens[end] if end == start else acc + sentence.joiner + sentence.tokens[end]
            if len(acc) > len(surface):
                break
            if acc == surface:
                spans.add(Span(start, end, label))
    return spans
