"""LLM descriptor acquisition and knowledge-vector construction.

A probe prompt asks a completion model for the visual features of a class as
it appears in one country, using a fixed one-shot exemplar (a Japanese
bathtub). Parsed bullet lists are stored verbatim per (class, country) in a
JSON-lines cache; a geography-agnostic variant of the same probe feeds the
general-descriptor baseline.

From a descriptor set, the per-geography class knowledge vector is the mean
of the descriptor prompt embeddings, and the regularization target for a
class is the mean of its knowledge vectors over a target geography set. Both
means are left un-normalized: every downstream comparison is a cosine, which
absorbs scale, but a mean that cancels to (near) zero fails loudly rather
than silently skewing the target.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .embedcore import mean_vectors
from .encoder import ToyTextEncoder
from .errors import (
    EmptyFieldError,
    MissingDescriptorsError,
    NearZeroNormError,
    NetworkError,
    NoDescriptorsFoundError,
)
from .prompting import ClassConfig, PromptSpec, PromptStrategy, Vocab, article_for, embed_prompt

log = logging.getLogger(__name__)

ENDPOINT_ENV = "GEOPROMPT_LLM_ENDPOINT"
KEY_ENV = "GEOPROMPT_LLM_KEY"

EXEMPLAR_BLOCK = """\
Q: What are useful features for distinguishing a bathtub in a photo that I took in Japan?
A: There are several useful visual features to tell there is a bathtub in a photo that I took in Japan:
- short in length and deep
- square shape
- wooden, plastic, or steel material
- white or brown color
- benches on side
- next to shower"""

COUNTRY_QUESTION = ("Q: What are useful features for distinguishing {subject} "
                    "in a photo that I took in {country}?")
COUNTRY_ANSWER_STEM = ("A: There are several useful visual features to tell there "
                       "is/are {class_name} in a photo that I took in {country}:")

# Geography-agnostic variant: same probe with the country clause removed.
GENERAL_QUESTION = ("Q: What are useful features for distinguishing {subject} "
                    "in a photo?")
GENERAL_ANSWER_STEM = ("A: There are several useful visual features to tell there "
                       "is/are {class_name} in a photo:")


def _subject(class_name: str, plural: bool) -> str:
    art = article_for(class_name, plural)
    return f"{art} {class_name}" if art else class_name


def build_probe_prompt(class_name: str, country: str, plural: bool = False) -> str:
    """One-shot probe prompt for a (class, country) pair."""
    if not class_name:
        raise EmptyFieldError("probe prompt requires a class name")
    if not country:
        raise EmptyFieldError("probe prompt requires a country")
    question = COUNTRY_QUESTION.format(subject=_subject(class_name, plural),
                                       country=country)
    stem = COUNTRY_ANSWER_STEM.format(class_name=class_name, country=country)
    return f"{EXEMPLAR_BLOCK}\n{question}\n{stem}"


def build_general_probe_prompt(class_name: str, plural: bool = False) -> str:
    """Country-free probe for the general-descriptor baseline."""
    if not class_name:
        raise EmptyFieldError("probe prompt requires a class name")
    question = GENERAL_QUESTION.format(subject=_subject(class_name, plural))
    stem = GENERAL_ANSWER_STEM.format(class_name=class_name)
    return f"{EXEMPLAR_BLOCK}\n{question}\n{stem}"


def template_hash(general: bool = False) -> str:
    """Hash of the un-substituted template; part of cache provenance."""
    if general:
        text = "\n".join([EXEMPLAR_BLOCK, GENERAL_QUESTION, GENERAL_ANSWER_STEM])
    else:
        text = "\n".join([EXEMPLAR_BLOCK, COUNTRY_QUESTION, COUNTRY_ANSWER_STEM])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def parse_descriptors(llm_text: str) -> list[str]:
    """Extract the bullet list from a raw completion.

    Keeps lines that start with '-' after left-trim, strips the bullet and
    surrounding whitespace, drops empties, and deduplicates preserving first
    occurrence. Descriptors are stored verbatim beyond that: no lower-casing,
    no grammar repair.
    """
    seen: set[str] = set()
    out: list[str] = []
    for line in llm_text.splitlines():
        stripped = line.lstrip()
        if not stripped.startswith("-"):
            continue
        descriptor = stripped[1:].strip()
        if descriptor and descriptor not in seen:
            seen.add(descriptor)
            out.append(descriptor)
    if not out:
        raise NoDescriptorsFoundError("completion contained no descriptor bullets")
    return out


@dataclass
class LlmClientConfig:
    endpoint: str | None = None
    model: str = "davinci-003"
    max_tokens: int = 100
    temperature: float = 0.7
    max_attempts: int = 3
    backoff_seconds: float = 0.5
    # Path into the response JSON where the completion text lives.
    response_path: tuple = ("choices", 0, "text")

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class GeographySet:
    """A named, ordered set of geographies with a role tag."""

    ids: tuple[str, ...]
    role: str = "target"  # source | target | all

    def __post_init__(self) -> None:
        if not self.ids:
            raise ValueError("geography set must be nonempty")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("geography names must be unique")
        if self.role not in ("source", "target", "all"):
            raise ValueError(f"unknown geography role {self.role!r}")

    def digest(self) -> str:
        return hashlib.sha256("\x1f".join(self.ids).encode("utf-8")).hexdigest()[:12]


class HttpTransport:
    """POSTs the wire-protocol payload to a completion endpoint.

    Body: {"model", "prompt", "max_tokens", "temperature"}; bearer token from
    the GEOPROMPT_LLM_KEY environment variable when set.
    """

    def __init__(self, config: LlmClientConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()
        self.endpoint = config.endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise NetworkError(
                f"no LLM endpoint configured (set {ENDPOINT_ENV} or config.endpoint)"
            )

    def complete(self, prompt: str, class_name: str, country: str | None) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
        }
        last_error: Exception | None = None
        for attempt in range(self.config.max_attempts):
            try:
                resp = self.session.post(self.endpoint, json=payload,
                                         headers=headers, timeout=30)
                resp.raise_for_status()
                body = resp.json()
                text = body
                for step in self.config.response_path:
                    text = text[step]
                return str(text)
            except Exception as exc:  # noqa: BLE001 - every failure is retryable here
                last_error = exc
                if attempt + 1 < self.config.max_attempts:
                    time.sleep(self.config.backoff_seconds * (2 ** attempt))
        raise NetworkError(f"completion failed after {self.config.max_attempts} "
                           f"attempts: {last_error}")


GENERAL_FIXTURE_COUNTRY = "general"


class MockTransport:
    """Serves completions from fixture files <class>__<country>.txt.

    Slashes in class names are replaced with '_' in filenames. The
    geography-agnostic probe reads <class>__general.txt. Used by all offline
    tests and by `--mock-fixtures` runs.
    """

    def __init__(self, fixture_dir):
        self.fixture_dir = Path(fixture_dir)
        self.calls = 0

    def complete(self, prompt: str, class_name: str, country: str | None) -> str:
        self.calls += 1
        fname = f"{class_name.replace('/', '_')}__{country or GENERAL_FIXTURE_COUNTRY}.txt"
        path = self.fixture_dir / fname
        if not path.exists():
            raise NetworkError(f"no fixture {fname} in {self.fixture_dir}")
        return path.read_text(encoding="utf-8")



@dataclass
class DescriptorEntry:
    descriptors: list[str]
    model: str
    template_hash: str
    acquired_at: str


@dataclass
class DescriptorSet:
    """Descriptor lists per (class, geography) plus a geography-agnostic table."""

    geo: dict[tuple[str, str], DescriptorEntry] = field(default_factory=dict)
    general: dict[str, DescriptorEntry] = field(default_factory=dict)

    @staticmethod
    def _clean(descriptors: Sequence[str]) -> list[str]:
        seen: set[str] = set()
        out = []
        for d in descriptors:
            d = d.strip()
            if d and d not in seen:
                seen.add(d)
                out.append(d)
        if not out:
            raise NoDescriptorsFoundError("descriptor list empty after trimming")
        return out

    def add_geo(self, class_name: str, country: str, entry: DescriptorEntry) -> None:
        entry.descriptors = self._clean(entry.descriptors)
        self.geo[(class_name, country)] = entry

    def add_general(self, class_name: str, entry: DescriptorEntry) -> None:
        entry.descriptors = self._clean(entry.descriptors)
        self.general[class_name] = entry

    def has(self, class_name: str, country: str) -> bool:
        return (class_name, country) in self.geo

    def get(self, class_name: str, country: str) -> list[str]:
        try:
            return self.geo[(class_name, country)].descriptors
        except KeyError:
            raise MissingDescriptorsError(
                f"no descriptors for class {class_name!r} in {country!r}"
            )

    def get_general(self, class_name: str) -> list[str]:
        try:
            return self.general[class_name].descriptors
        except KeyError:
            raise MissingDescriptorsError(f"no general descriptors for {class_name!r}")

    def countries(self) -> list[str]:
        return sorted({g for _, g in self.geo})

    def classes(self) -> list[str]:
        names = {c for c, _ in self.geo} | set(self.general)
        return sorted(names)

    def content_digest(self) -> str:
        """Hash of the descriptor content (provenance excluded)."""
        h = hashlib.sha256()
        for c, g in sorted(self.geo):
            h.update(repr((c, g, tuple(self.geo[(c, g)].descriptors))).encode())
        for c in sorted(self.general):
            h.update(repr((c, None, tuple(self.general[c].descriptors))).encode())
        return h.hexdigest()[:12]

    def to_lines(self) -> list[dict]:
        lines = []
        for (c, g), e in self.geo.items():
            lines.append({"class": c, "country": g, "strategy": "country_llm",
                          "descriptors": e.descriptors, "model": e.model,
                          "template_hash": e.template_hash, "acquired_at": e.acquired_at})
        for c, e in self.general.items():
            lines.append({"class": c, "country": None, "strategy": "general_llm",
                          "descriptors": e.descriptors, "model": e.model,
                          "template_hash": e.template_hash, "acquired_at": e.acquired_at})
        return lines

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.to_lines():
                fh.write(json.dumps(line) + "\n")

    @classmethod
    def load(cls, path) -> "DescriptorSet":
        dset = cls()
        path = Path(path)
        if not path.exists():
            return dset
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if not raw:
                    continue
                rec = json.loads(raw)
                entry = DescriptorEntry(
                    descriptors=list(rec["descriptors"]), model=rec.get("model", ""),
                    template_hash=rec.get("template_hash", ""),
                    acquired_at=rec.get("acquired_at", ""),
                )
                if rec.get("country"):
                    key = (rec["class"], rec["country"])
                    if key in dset.geo:
                        log.warning("duplicate cache entry for %s; keeping first", key)
                        continue
                    dset.add_geo(rec["class"], rec["country"], entry)
                else:
                    if rec["class"] in dset.general:
                        log.warning("duplicate general cache entry for %r; keeping first",
                                    rec["class"])
                        continue
                    dset.add_general(rec["class"], entry)
        return dset


@dataclass
class AcquisitionFailure:
    class_name: str
    country: str | None
    error: str


@dataclass
class AcquisitionResult:
    descriptor_set: DescriptorSet
    failures: list[AcquisitionFailure]
    transport_calls: int = 0


def acquire(classes: Sequence[str], geographies: GeographySet, transport,
            cache_path, model: str = "davinci-003",
            class_config: ClassConfig | None = None,
            include_general: bool = False) -> AcquisitionResult:
    """Fill the descriptor cache for every (class, geography) pair.

    Cached pairs are served without touching the transport. Failures
    (network exhaustion, unparseable completions) are collected per pair and
    never abort the batch; successes acquired before a failure are kept and
    persisted. Each new entry is appended to the cache file as soon as it
    parses.
    """
    dset = DescriptorSet.load(cache_path)
    failures: list[AcquisitionFailure] = []
    calls = 0
    cache_path = Path(cache_path)
    cache_path.parent.mkdir(parents=True, exist_ok=True)

    def persist(record: dict) -> None:
        with open(cache_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def plural(c: str) -> bool:
        return class_config.is_plural(c) if class_config else False

    for class_name in classes:
        for country in geographies.ids:
            if dset.has(class_name, country):
                continue
            prompt = build_probe_prompt(class_name, country, plural(class_name))
            try:
                calls += 1
                raw = transport.complete(prompt, class_name, country)
                descriptors = parse_descriptors(raw)
            except (NetworkError, NoDescriptorsFoundError) as exc:
                failures.append(AcquisitionFailure(class_name, country, str(exc)))
                log.warning("probe failed for (%s, %s): %s", class_name, country, exc)
                continue
            entry = DescriptorEntry(descriptors=descriptors, model=model,
                                    template_hash=template_hash(),
                                    acquired_at=_timestamp())
            dset.add_geo(class_name, country, entry)
            persist({"class": class_name, "country": country, "strategy": "country_llm",
                     "descriptors": entry.descriptors, "model": model,
                     "template_hash": entry.template_hash,
                     "acquired_at": entry.acquired_at})
        if include_general and class_name not in dset.general:
            prompt = build_general_probe_prompt(class_name, plural(class_name))
            try:
                calls += 1
                raw = transport.complete(prompt, class_name, None)
                descriptors = parse_descriptors(raw)
            except (NetworkError, NoDescriptorsFoundError) as exc:
                failures.append(AcquisitionFailure(class_name, None, str(exc)))
                continue
            entry = DescriptorEntry(descriptors=descriptors, model=model,
                                    template_hash=template_hash(general=True),
                                    acquired_at=_timestamp())
            dset.add_general(class_name, entry)
            persist({"class": class_name, "country": None, "strategy": "general_llm",
                     "descriptors": entry.descriptors, "model": model,
                     "template_hash": entry.template_hash,
                     "acquired_at": entry.acquired_at})
    return AcquisitionResult(descriptor_set=dset, failures=failures, transport_calls=calls)


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


KNOWLEDGE_NORM_EPS = 1e-9


def _descriptor_specs(class_name: str, geography: str | None,
                      strategy: PromptStrategy, dset: DescriptorSet,
                      plural: bool) -> list[PromptSpec]:
    """The prompt specs whose embeddings average into one knowledge vector."""
    if strategy is PromptStrategy.COUNTRY_IN_PROMPT:
        return [PromptSpec(strategy, class_name, country=geography, plural=plural)]
    if strategy is PromptStrategy.DEFAULT:
        return [PromptSpec(strategy, class_name, plural=plural)]
    if strategy is PromptStrategy.GENERAL_LLM:
        descriptors = dset.get_general(class_name)
        return [PromptSpec(strategy, class_name, descriptor=d, plural=plural)
                for d in descriptors]
    descriptors = dset.get(class_name, geography)
    country = geography if strategy is PromptStrategy.COUNTRY_IN_PROMPT_LLM else None
    return [PromptSpec(strategy, class_name, country=country, descriptor=d, plural=plural)
            for d in descriptors]


def class_knowledge(class_name: str, geography: str, strategy: PromptStrategy,
                    dset: DescriptorSet, enc: ToyTextEncoder, vocab: Vocab,
                    plural: bool = False) -> np.ndarray:
    """Per-geography class knowledge: mean descriptor prompt embedding.

    CountryInPrompt is the mean over its one-element set (the bare country
    prompt). The mean is not re-normalized, but collapse below 1e-9 is an
    error.
    """
    specs = _descriptor_specs(class_name, geography, strategy, dset, plural)
    vec = mean_vectors([embed_prompt(s, enc, vocab) for s in specs])
    if float(np.linalg.norm(vec)) <= KNOWLEDGE_NORM_EPS:
        raise NearZeroNormError(
            f"knowledge vector collapsed for ({class_name!r}, {geography!r})"
        )
    return vec


def target_knowledge(class_name: str, target_set: GeographySet,
                     strategy: PromptStrategy, dset: DescriptorSet,
                     enc: ToyTextEncoder, vocab: Vocab,
                     plural: bool = False) -> np.ndarray:
    """Ensembled knowledge over a geography set: mean of per-geography vectors.

    Every geography in the set must resolve; a missing descriptor list is a
    hard error because silently dropping a geography would bias the ensemble.
    """
    vec = mean_vectors([
        class_knowledge(class_name, g, strategy, dset, enc, vocab, plural)
        for g in target_set.ids
    ])
    if float(np.linalg.norm(vec)) <= KNOWLEDGE_NORM_EPS:
        raise NearZeroNormError(
            f"target knowledge collapsed for class {class_name!r}"
        )
    return vec


# Knowledge vectors are constant during training (no gradient path into
# them), so rebuilds are memoized per (class, strategy, geography-set,
# descriptor content, encoder) within a process.
_knowledge_memo: dict[tuple, np.ndarray] = {}


def build_target_knowledge(classes: Sequence[str], target_set: GeographySet,
                           strategy: PromptStrategy, dset: DescriptorSet,
                           enc: ToyTextEncoder, vocab: Vocab,
                           class_config: ClassConfig | None = None
                           ) -> dict[str, np.ndarray]:
    """Target knowledge vectors for every class, memoized across calls."""
    fingerprint = enc.fingerprint()
    gt_digest = target_set.digest()
    content = dset.content_digest()
    out: dict[str, np.ndarray] = {}
    for c in classes:
        key = (c, strategy.value, gt_digest, content, fingerprint)
        if key not in _knowledge_memo:
            plural = class_config.is_plural(c) if class_config else False
            _knowledge_memo[key] = target_knowledge(
                c, target_set, strategy, dset, enc, vocab, plural
            )
        out[c] = _knowledge_memo[key].copy()
    return out
