"""Lenient parsers for LLM responses.

Extraction responses are requested as "surface<TAB>label" lines but real
responses arrive decorated with numbering, bullets, code fences, and prose.
The parsers keep every line that fits the grammar and silently skip the rest;
callers decide whether an empty result counts as a parse failure.
"""

from __future__ import annotations

import logging
import re

log = logging.getLogger(__name__)

SEG_LABEL = "WORD"

_NUMBERING = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]?)\s+")
_FENCE = re.compile(r"^\s*```")


def _content_lines(text: str) -> list[str]:
    lines = []
    for raw in text.splitlines():
        if _FENCE.match(raw):
            continue
        line = _NUMBERING.sub("", raw).strip()
        if line:
            lines.append(line)
    return lines


def parse_pair_lines(text: str) -> list[tuple[str, str]]:
    """(surface, label) pairs from tab-separated lines, order preserved.

    Lines without a tab, or with an empty surface or label, are skipped.
    """
    pairs = []
    for line in _content_lines(text):
        if "\t" not in line:
            continue
        fields = [f.strip() for f in line.split("\t") if f.strip()]
        if len(fields) >= 2:
            pairs.append((fields[0], fields[1]))
    return pairs


def parse_seg_lines(text: str) -> list[tuple[str, str]]:
    """Segmentation words, each labeled WORD.

    Tab-separated lines keep only the first field; bare lines are taken as
    one word each, so plain word-per-line responses also parse.
    """
    pairs = []
    for line in _content_lines(text):
        fields = [f.strip() for f in line.split("\t") if f.strip()]
        if fields:
            pairs.append((fields[0], SEG_LABEL))
    return pairs


def parse_synonym_groups(text: str) -> dict[str, list[str]]:
    """Standard label -> synonym labels from "label<TAB>standard" lines.

    A label claimed by multiple standards keeps its first assignment; later
    claims are dropped with a warning so the result is a valid synonym map.
    """
    groups: dict[str, list[str]] = {}
    assigned: set[str] = set()
    for label, standard in parse_pair_lines(text):
        if label in assigned:
            log.warning("label %r claimed by multiple standards; keeping first", label)
            continue
        assigned.add(label)
        groups.setdefault(standard, []).append(label)
    return groups


def parse_free_text(text: str) -> str:
    """Synthesis response with code fences stripped, whitespace trimmed."""
    kept = [raw for raw in text.splitlines() if not _FENCE.match(raw)]
    return "\n".join(kept).strip()
