"""Prompt templates for the annotation workflow.

Six templates: ent/seg/pos extract extension tags, merge standardizes label
synonyms, exp/ext synthesize explanation texts. Extraction responses are
requested as "surface<TAB>label" lines; synthesis responses are free text.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

TEMPLATE_NAMES = ("ent", "seg", "pos", "merge", "exp", "ext")


class PromptError(ValueError):
    """Unknown template name or unbound placeholder."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    def __post_init__(self) -> None:
        if self.name not in TEMPLATE_NAMES:
            raise PromptError(f"unknown template name {self.name!r}")

    @property
    def placeholders(self) -> frozenset[str]:
        fields = {
            field
            for _, field, _, _ in string.Formatter().parse(self.text)
            if field is not None and field != ""
        }
        return frozenset(fields)

    def render(self, **values: str) -> str:
        missing = self.placeholders - set(values)
        if missing:
            raise PromptError(f"template {self.name!r} missing placeholders: {sorted(missing)}")
        return self.text.format(**{k: values[k] for k in self.placeholders})


_ENT = """\
You annotate text for an information extraction dataset.
Read the sentence and list every entity mention it contains, covering any \
entity type you can identify rather than a fixed inventory.
Reply with one mention per line in the exact format: surface<TAB>label, \
where <TAB> is a single tab character and the label is a concise lowercase \
type name. Output nothing else.

Sentence: {sentence}"""

_SEG = """\
Segment the sentence into words.
Reply with one word per line in the exact format: word<TAB>WORD, keeping \
the original order. Output nothing else.

Sentence: {sentence}"""

_POS = """\
Assign a part-of-speech tag to every word in the list below, using the \
sentence for context. Do not omit any word.
Reply with one word per line in the exact format: word<TAB>tag. Output \
nothing else.

Sentence: {sentence}
Words:
{words}"""

_MERGE = """\
Some of the entity type labels below may be synonyms that denote the same \
underlying type. Group synonymous labels and choose one standard label per \
group.
Reply with one line per label in the exact format: label<TAB>standard_label. \
A label without synonyms maps to itself. Output nothing else.

Labels with example mentions:
{labels}"""

_EXP = """\
Act the role of a domain expert who gives accessible and detailed \
explanations to a general audience.
Explain the meaning of the entity "{entity}" (type: {label}) in the context \
of the sentence below. Write one short, self-contained passage that mentions \
the entity by name.

Sentence: {sentence}"""

_EXT = """\
Act the role of a domain expert who gives accessible and detailed \
explanations to a general audience.
Identify the key phrases of the sentence below and explain what they mean in \
this context. Write one short, self-contained passage that mentions each key \
phrase by name.

Sentence: {sentence}"""

TEMPLATES: dict[str, PromptTemplate] = {
    "ent": PromptTemplate("ent", _ENT),
    "seg": PromptTemplate("seg", _SEG),
    "pos": PromptTemplate("pos", _POS),
    "merge": PromptTemplate("merge", _MERGE),
    "exp": PromptTemplate("exp", _EXP),
    "ext": PromptTemplate("ext", _EXT),
}
