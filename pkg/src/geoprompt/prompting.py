"""Prompt rendering and tokenization for all five prompting strategies.

Rendered strings are an external contract: anyone ingesting real text
features keyed by prompt string must reproduce them byte-for-byte, so the
templates, the article rule, and the connective rule are all fixed here and
nowhere else. Every consumer (zero-shot scoring, knowledge building) goes
through :func:`embed_prompt`, which is the single render -> tokenize ->
encode pathway.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .encoder import HardToken, ToyTextEncoder, encode_text
from .errors import EmptyFieldError, EmptyInputError, SpecInvariantViolatedError

VOWELS = set("aeiou")

# Descriptors that already start with a predicate read naturally after
# "which"; everything else gets "has " prepended.
CONNECTIVE_FIRST_WORDS = {
    "is", "has", "are", "have", "made", "used", "often", "typically",
    "usually", "can", "may", "comes", "with",
}

UNK_TOKEN = "<unk>"

# Punctuation stripped from word pieces; hyphens survive ("open-fire").
_STRIP_CHARS = "".join(c for c in string.punctuation if c != "-")
_STRIP_TABLE = str.maketrans("", "", _STRIP_CHARS)


class PromptStrategy(str, Enum):
    DEFAULT = "default"
    GENERAL_LLM = "general_llm"
    COUNTRY_IN_PROMPT = "country_in_prompt"
    COUNTRY_LLM = "country_llm"
    COUNTRY_IN_PROMPT_LLM = "country_in_prompt_llm"

    @property
    def uses_descriptors(self) -> bool:
        return self in (PromptStrategy.GENERAL_LLM, PromptStrategy.COUNTRY_LLM,
                        PromptStrategy.COUNTRY_IN_PROMPT_LLM)

    @property
    def uses_country_in_string(self) -> bool:
        return self in (PromptStrategy.COUNTRY_IN_PROMPT,
                        PromptStrategy.COUNTRY_IN_PROMPT_LLM)

    @property
    def geography_conditioned(self) -> bool:
        """True when scoring needs the sample's geography (string or descriptor set)."""
        return self in (PromptStrategy.COUNTRY_IN_PROMPT, PromptStrategy.COUNTRY_LLM,
                        PromptStrategy.COUNTRY_IN_PROMPT_LLM)


@dataclass(frozen=True)
class PromptSpec:
    """One concrete prompt to render: strategy + class + optional country/descriptor.

    For COUNTRY_LLM the country selects the descriptor set but does not
    appear in the rendered string.
    """

    strategy: PromptStrategy
    class_name: str
    country: str | None = None
    descriptor: str | None = None
    plural: bool = False

    def validate(self) -> None:
        if not self.class_name:
            raise SpecInvariantViolatedError("class_name must be nonempty")
        if self.strategy.uses_country_in_string and not self.country:
            raise SpecInvariantViolatedError(
                f"{self.strategy.value} requires a country"
            )
        if self.strategy.uses_descriptors and not self.descriptor:
            raise SpecInvariantViolatedError(
                f"{self.strategy.value} requires a descriptor"
            )
        if not self.strategy.uses_descriptors and self.descriptor is not None:
            raise SpecInvariantViolatedError(
                f"{self.strategy.value} must not carry a descriptor"
            )


def article_for(class_name: str, plural: bool) -> str:
    """'a'/'an' by first letter, '' for plural or uncountable classes."""
    if not class_name:
        raise EmptyFieldError("class name must be nonempty")
    if plural:
        return ""
    return "an" if class_name[0].lower() in VOWELS else "a"


def _connective(descriptor: str) -> str:
    first = descriptor.split()[0].lower() if descriptor.split() else ""
    return "" if first in CONNECTIVE_FIRST_WORDS else "has "


def render_prompt(spec: PromptSpec) -> str:
    """Deterministic prompt string for a valid spec; single-spaced, no trailing space."""
    spec.validate()
    art = article_for(spec.class_name, spec.plural)
    subject = f"{art} {spec.class_name}" if art else spec.class_name
    s = spec.strategy
    if s is PromptStrategy.DEFAULT:
        return f"a photo of {subject}"
    if s is PromptStrategy.COUNTRY_IN_PROMPT:
        return f"a photo of {subject} in {spec.country}"
    if s is PromptStrategy.GENERAL_LLM or s is PromptStrategy.COUNTRY_LLM:
        return f"a photo of {subject}, which {_connective(spec.descriptor)}{spec.descriptor}"
    if s is PromptStrategy.COUNTRY_IN_PROMPT_LLM:
        return (f"a photo of {subject} in {spec.country}, "
                f"which {_connective(spec.descriptor)}{spec.descriptor}")
    raise SpecInvariantViolatedError(f"unknown strategy {s!r}")


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace and '/', strip punctuation except hyphens."""
    if not text.strip():
        raise EmptyInputError("cannot tokenize an empty string")
    pieces: list[str] = []
    for chunk in text.lower().replace("/", " ").split():
        word = chunk.translate(_STRIP_TABLE)
        if word:
            pieces.append(word)
    # Pure-punctuation input still yields one token (the unknown word).
    return pieces or [UNK_TOKEN]


@dataclass
class Vocab:
    """Word -> id table with a reserved unknown id at 0."""

    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise ValueError("vocab must start with the reserved unknown token")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    def id_of(self, word: str) -> int:
        return self.index.get(word, self.unk_id)


def build_vocab(texts: Iterable[str]) -> Vocab:
    """Vocabulary over a corpus; order-independent (sorted unique words)."""
    words: set[str] = set()
    for text in texts:
        if text.strip():
            words.update(split_words(text))
    words.discard(UNK_TOKEN)
    return Vocab(tokens=[UNK_TOKEN] + sorted(words))


def tokenize(text: str, vocab: Vocab) -> list[HardToken]:
    """Hard-token sequence; unknown words map to the reserved UNK id."""
    return [HardToken(vocab.id_of(w)) for w in split_words(text)]


def embed_prompt(spec: PromptSpec, enc: ToyTextEncoder, vocab: Vocab) -> np.ndarray:
    """The one render -> tokenize -> encode pathway shared by all modules."""
    return encode_text(enc, tokenize(render_prompt(spec), vocab))


@dataclass
class ClassConfig:
    """Class roster with plural flags and alias resolution.

    File format: JSON array of {"name", "plural": bool, "aliases": [...]}.
    """

    names: list[str]
    plural_flags: dict[str, bool]
    alias_map: dict[str, str]

    @classmethod
    def from_entries(cls, entries: Sequence[dict]) -> "ClassConfig":
        names, plural_flags, alias_map = [], {}, {}
        for e in entries:
            name = e["name"]
            names.append(name)
            plural_flags[name] = bool(e.get("plural", False))
            for alias in e.get("aliases", []):
                alias_map[alias] = name
        return cls(names=names, plural_flags=plural_flags, alias_map=alias_map)

    @classmethod
    def load(cls, path) -> "ClassConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_entries(json.load(fh))

    @classmethod
    def uniform(cls, names: Sequence[str], plural: bool = False) -> "ClassConfig":
        return cls.from_entries([{"name": n, "plural": plural} for n in names])

    def save(self, path) -> None:
        entries = [
            {"name": n, "plural": self.plural_flags[n],
             "aliases": sorted(a for a, c in self.alias_map.items() if c == n)}
            for n in self.names
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(entries, fh, indent=2)
            fh.write("\n")

    def is_plural(self, name: str) -> bool:
        return self.plural_flags.get(name, False)

    def canonical(self, label: str) -> str:
        if label in self.plural_flags:
            return label
        return self.alias_map.get(label, label)
