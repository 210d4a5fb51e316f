"""Deterministic toy corpus, scripted annotator, and fixture recording.

The corpus is tiny but keeps the interesting structure: ORG spans have the
shape "<person> <suffix>" with a nested PER span inside, and the scripted
annotator emits extension tags that correlate with the targets (human for
person names, business for name-suffix bigrams, place for place names), so
the extension channels carry real signal during training.

Sentences are deliberately short. Grid cells are overwhelmingly negative,
and with sigmoid channels the negative majority drags every channel down
before the positives can establish themselves; single-entity sentences keep
the positive fraction per training step high enough that all three label
channels survive. The firm pattern carries the nesting (PER inside ORG), and
visit/meet place entities away from position zero so no channel can lean on
absolute position alone.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import AnnotatedSample, LabelVocabulary, Span, TokenSequence, save_jsonl
from .encoder import EncoderConfig, build_vocab
from .label_merge import HashEmbedder
from .span_model import HeadConfig, SpanModel
from .train_eval import TrainConfig
from .workflow.client import FixtureStore, LlmClient, TransportError
from .workflow.pipeline import Pipeline1Result, Pipeline2Result, run_pipeline1, run_pipeline2

TOY_TARGET_LABELS = ("PER", "ORG", "LOC")
TOY_EXTENSION_LABELS = ("human", "business", "place", "WORD", "NOUN", "OTH")

PERSONS = ("Ada", "Bo", "Cy", "Dee", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jo")
SUFFIXES = ("Labs", "Corp", "Group", "Works")
PLACES = ("Rome", "Oslo", "Lima", "Cairo", "Quito", "Kyiv", "Bonn", "Perth", "Turin")


class _Bag:
    """Shuffled-bag sampler: every item appears once per refill cycle."""

    def __init__(self, items: Sequence[str], rng: random.Random):
        self._items = list(items)
        self._rng = rng
        self._pool: list[str] = []

    def draw(self) -> str:
        if not self._pool:
            self._pool = list(self._items)
            self._rng.shuffle(self._pool)
        return self._pool.pop()

    def draw_distinct(self, other: str) -> str:
        for _ in range(len(self._items) + 1):
            candidate = self.draw()
            if candidate != other:
                return candidate
        return candidate


def _pattern_person(persons: _Bag, suffixes: _Bag, places: _Bag) -> tuple[str, set[Span]]:
    return persons.draw(), {Span(0, 0, "PER")}


def _pattern_place(persons: _Bag, suffixes: _Bag, places: _Bag) -> tuple[str, set[Span]]:
    return places.draw(), {Span(0, 0, "LOC")}


def _pattern_firm(persons: _Bag, suffixes: _Bag, places: _Bag) -> tuple[str, set[Span]]:
    text = f"{persons.draw()} {suffixes.draw()}"
    return text, {Span(0, 0, "PER"), Span(0, 1, "ORG")}


def _pattern_visit(persons: _Bag, suffixes: _Bag, places: _Bag) -> tuple[str, set[Span]]:
    text = f"{persons.draw()} visited {places.draw()}"
    return text, {Span(0, 0, "PER"), Span(2, 2, "LOC")}


def _pattern_meet(persons: _Bag, suffixes: _Bag, places: _Bag) -> tuple[str, set[Span]]:
    a = persons.draw()
    b = persons.draw_distinct(a)
    text = f"{a} met {b}"
    return text, {Span(0, 0, "PER"), Span(2, 2, "PER")}


_ENTITY_PATTERNS = (_pattern_person, _pattern_place, _pattern_firm, _pattern_visit, _pattern_meet)


@dataclass
class ToyCorpus:
    train: list[AnnotatedSample]
    test: list[AnnotatedSample]
    vocab: LabelVocabulary


def make_toy_corpus(n_train: int = 30, n_test: int = 10, seed: int = 0) -> ToyCorpus:
    """Generate a nested-span corpus; the test split reuses only train vocabulary.

    Both splits cycle the five entity patterns in a fixed order, drawing names
    from shared shuffled bags, so every pattern contributes evenly and the
    default train split covers the whole token vocabulary. Sentence texts
    never repeat within or across splits.
    """
    rng = random.Random(seed)
    persons = _Bag(PERSONS, rng)
    suffixes = _Bag(SUFFIXES, rng)
    places = _Bag(PLACES, rng)
    seen: set[str] = set()

    def build(kind: int) -> AnnotatedSample:
        for _ in range(200):
            text, spans = _ENTITY_PATTERNS[kind](persons, suffixes, places)
            if text not in seen:
                seen.add(text)
                sequence = TokenSequence.from_text(text, "whitespace")
                return AnnotatedSample(sequence, frozenset(spans))
        raise RuntimeError("could not generate a fresh sentence; corpus request too large")

    train = [build(i % len(_ENTITY_PATTERNS)) for i in range(n_train)]
    test = [build(i % len(_ENTITY_PATTERNS)) for i in range(n_test)]
    return ToyCorpus(train=train, test=test, vocab=LabelVocabulary(TOY_TARGET_LABELS, TOY_EXTENSION_LABELS))


def _sentence_of(prompt: str) -> str:
    return prompt.split("Sentence: ", 1)[1].splitlines()[0]


def _words_of(prompt: str) -> list[str]:
    return [w for w in prompt.split("Words:\n", 1)[1].splitlines() if w]


class ScriptedAnnotator:
    """Rule-based transport standing in for a live LLM when recording fixtures.

    Responses are pure functions of the prompt, so recorded fixture files are
    reproducible byte for byte.
    """

    def __call__(self, template_name: str, prompt: str) -> str:
        handler = getattr(self, f"_{template_name}", None)
        if handler is None:
            raise TransportError(f"no scripted response for template {template_name!r}")
        return handler(prompt)

    def _ent(self, prompt: str) -> str:
        words = _sentence_of(prompt).split()
        lines: list[str] = []
        seen: set[str] = set()

        def add(surface: str, label: str) -> None:
            if surface not in seen:
                seen.add(surface)
                lines.append(f"{surface}\t{label}")

        for i, word in enumerate(words):
            if word in PERSONS:
                add(word, "human")
                if i + 1 < len(words) and words[i + 1] in SUFFIXES:
                    add(f"{word} {words[i + 1]}", "business")
            elif word in PLACES:
                add(word, "place")
        return "\n".join(lines)

    def _seg(self, prompt: str) -> str:
        return "\n".join(f"{w}\tWORD" for w in _sentence_of(prompt).split())

    def _pos(self, prompt: str) -> str:
        return "\n".join(
            f"{w}\t{'NOUN' if w[:1].isupper() else 'OTH'}" for w in _words_of(prompt)
        )

    def _merge(self, prompt: str) -> str:
        inventory = prompt.split("Labels with example mentions:\n", 1)[1]
        labels = [line.split(":", 1)[0].strip() for line in inventory.splitlines() if ":" in line]
        return "\n".join(f"{label}\t{label}" for label in labels)

    def _exp(self, prompt: str) -> str:
        match = re.search(r'"([^"]+)" \(type: ([^)]+)\)', prompt)
        entity, label = match.group(1), match.group(2)
        return f"The name {entity} stands for one {label} in this story."

    def _ext(self, prompt: str) -> str:
        first = _sentence_of(prompt).split()[0]
        return f"The phrase {first} simply sets the scene here."


def toy_token_vocab(samples: Sequence[AnnotatedSample]) -> dict[str, int]:
    return build_vocab([s.sequence.tokens for s in samples])


def toy_model(
    token_vocab: dict[str, int],
    seed: int = 0,
    window: int = 3,
    vocab: LabelVocabulary | None = None,
    dropout: float = 0.3,
) -> SpanModel:
    """Desk-scale model sized for the toy corpus.

    The heavy dropout is load-bearing: on a grid this sparse the sigmoid
    channels drift toward all-negative and stall, and the dropout jitter is
    what lets individual cells escape upward while the best weights so far
    are kept by dev-based restoring.
    """
    torch.manual_seed(seed)
    encoder = EncoderConfig(
        vocab_size=len(token_vocab),
        dim=48,
        num_layers=2,
        num_heads=4,
        ffn_dim=96,
        max_len=16,
        dropout=dropout,
    )
    head = HeadConfig(
        projection_dim=24, biaffine_dim=24, biaffine_heads=2, attention_heads=4, window=window
    )
    if vocab is None:
        vocab = LabelVocabulary(TOY_TARGET_LABELS, TOY_EXTENSION_LABELS)
    return SpanModel(encoder, head, vocab, token_vocab, tokenizer="whitespace")


def toy_train_config(epochs: int, seed: int = 0, **overrides) -> TrainConfig:
    """Training settings for a from-scratch encoder; both rates sit at 1e-3.

    Batches of two suit the corpus shape: most sentences hold a single
    entity, and tiny batches keep the positive-cell share of each step high
    enough that no label channel gets buried by the negative majority.
    """
    base = dict(
        lr_encoder=1e-3,
        lr_head=1e-3,
        weight_decay=1e-3,
        epochs=epochs,
        batch_size=2,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def record_toy_fixtures(
    corpus: ToyCorpus,
    fixture_dir: str | Path,
    model: SpanModel | None = None,
) -> tuple[Pipeline1Result, Pipeline2Result]:
    """Run both pipelines against the scripted annotator, recording fixtures.

    The prompts sent (and therefore the fixture set) depend only on the corpus
    and the scripted responses, not on the model, which is only consulted for
    target spans on the synthesized texts.
    """
    store = FixtureStore(fixture_dir)
    client = LlmClient(
        mode="live",
        fixtures=store,
        transport=ScriptedAnnotator(),
        max_concurrency=1,
        record=True,
    )
    result1 = run_pipeline1(corpus.train, client, HashEmbedder())
    if model is None:
        model = toy_model(toy_token_vocab(corpus.train))
    result2 = run_pipeline2(corpus.train, model, client, result1.mapping)
    return result1, result2


def write_toy_dataset(out_dir: str | Path, n_train: int = 30, n_test: int = 10, seed: int = 0) -> ToyCorpus:
    """Materialize the bundled dataset: train/test JSONL plus replay fixtures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = make_toy_corpus(n_train=n_train, n_test=n_test, seed=seed)
    save_jsonl(corpus.train, out / "train.jsonl")
    save_jsonl(corpus.test, out / "test.jsonl")
    record_toy_fixtures(corpus, out / "fixtures")
    return corpus
