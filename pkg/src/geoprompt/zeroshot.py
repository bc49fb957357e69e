"""Descriptor-averaged zero-shot classification and top-k prediction.

A class's score for an image is the mean, over the class's descriptor
prompts, of cosine(image, prompt embedding) / tau. The geography-agnostic
strategies average over the general descriptor list; geography-conditioned
strategies use the set belonging to the image's own country (the evaluation
protocol assumes the country is known at test time), falling back per the
configured order when a country has no entry. Default and CountryInPrompt
are the degenerate one-descriptor case of the same formula.

Because every positive temperature is a strictly increasing transform of the
scores, tau never changes the ranking; it defaults to 1 (pure cosine) and
exists only so externally computed logits can be matched numerically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embedcore import cosine_sim
from .encoder import EmbeddingStore, ToyTextEncoder
from .errors import MissingDescriptorsError, MissingGeographyError
from .evalmetrics import EvalReport, SampleMeta, build_report, group_report
from .knowledge import DescriptorSet
from .prompting import ClassConfig, PromptSpec, PromptStrategy, Vocab, embed_prompt

log = logging.getLogger(__name__)

DEFAULT_FALLBACK = ("country", "continent")


@dataclass
class Prediction:
    """Classes ranked by descending score; ties break on ascending class name."""

    ranked: list[str]
    scores: dict[str, float]

    def top(self, k: int) -> list[str]:
        return self.ranked[:k]


def descriptor_logit(img: np.ndarray, prompt_emb: np.ndarray, tau_zs: float = 1.0) -> float:
    """One prompt's logit for one image: cosine similarity over temperature."""
    if tau_zs <= 0:
        raise ValueError("tau_zs must be positive")
    return cosine_sim(img, prompt_emb) / tau_zs


def _prompt_specs(class_name: str, strategy: PromptStrategy,
                  geography: str | None, dset: DescriptorSet | None,
                  plural: bool) -> list[PromptSpec]:
    if strategy is PromptStrategy.DEFAULT:
        return [PromptSpec(strategy, class_name, plural=plural)]
    if strategy is PromptStrategy.GENERAL_LLM:
        if dset is None:
            raise MissingDescriptorsError("general_llm scoring needs a descriptor set")
        return [PromptSpec(strategy, class_name, descriptor=d, plural=plural)
                for d in dset.get_general(class_name)]
    if geography is None:
        raise MissingGeographyError(
            f"{strategy.value} scoring requires the image's geography"
        )
    if strategy is PromptStrategy.COUNTRY_IN_PROMPT:
        return [PromptSpec(strategy, class_name, country=geography, plural=plural)]
    if dset is None:
        raise MissingDescriptorsError(f"{strategy.value} scoring needs a descriptor set")
    descriptors = dset.get(class_name, geography)
    country = geography if strategy is PromptStrategy.COUNTRY_IN_PROMPT_LLM else None
    return [PromptSpec(strategy, class_name, country=country, descriptor=d,
                       plural=plural) for d in descriptors]


def class_score(img: np.ndarray, class_name: str, strategy: PromptStrategy,
                geography: str | None, dset: DescriptorSet | None,
                enc: ToyTextEncoder, vocab: Vocab, tau_zs: float = 1.0,
                plural: bool = False) -> float:
    """Mean descriptor logit for one (image, class) pair."""
    specs = _prompt_specs(class_name, strategy, geography, dset, plural)
    logits = [descriptor_logit(img, embed_prompt(s, enc, vocab), tau_zs)
              for s in specs]
    return float(np.mean(logits))


def predict(img: np.ndarray, classes: list[str], strategy: PromptStrategy,
            geography: str | None, dset: DescriptorSet | None,
            enc: ToyTextEncoder, vocab: Vocab, tau_zs: float = 1.0, k: int = 1,
            class_config: ClassConfig | None = None) -> Prediction:
    """Full ranking over classes for one image."""
    if not classes:
        raise ValueError("predict requires a nonempty class list")
    if k > len(classes):
        raise ValueError(f"k={k} exceeds the {len(classes)} classes")
    scores = {}
    for c in classes:
        plural = class_config.is_plural(c) if class_config else False
        scores[c] = class_score(img, c, strategy, geography, dset, enc, vocab,
                                tau_zs, plural)
    ranked = sorted(classes, key=lambda c: (-scores[c], c))
    return Prediction(ranked=ranked, scores=scores)


@dataclass
class PromptEmbeddingCache:
    """Read-mostly memo of prompt embeddings, built before a scoring pass.

    One matrix of descriptor-prompt embeddings per (strategy, class,
    geography) key; `None` geography keys the geography-agnostic strategies.
    """

    enc: ToyTextEncoder
    vocab: Vocab
    dset: DescriptorSet | None
    class_config: ClassConfig | None = None
    _mats: dict[tuple, np.ndarray] = field(default_factory=dict)

    def matrix(self, class_name: str, strategy: PromptStrategy,
               geography: str | None) -> np.ndarray:
        key = (strategy.value, class_name, geography)
        if key not in self._mats:
            plural = (self.class_config.is_plural(class_name)
                      if self.class_config else False)
            specs = _prompt_specs(class_name, strategy, geography, self.dset, plural)
            self._mats[key] = np.stack(
                [embed_prompt(s, self.enc, self.vocab) for s in specs]
            )
        return self._mats[key]


def resolve_geography(meta: SampleMeta, class_name: str, strategy: PromptStrategy,
                      dset: DescriptorSet | None,
                      fallback: tuple[str, ...] = DEFAULT_FALLBACK) -> str | None:
    """Geography used for one (sample, class) score.

    Descriptor strategies walk the fallback order (country first, then
    continent by default) until a geography with a descriptor entry for this
    class is found. CountryInPrompt needs no descriptors, so the first
    fallback level is used directly.
    """
    if not strategy.geography_conditioned:
        return None
    candidates = [getattr(meta, level) for level in fallback]
    if strategy is PromptStrategy.COUNTRY_IN_PROMPT:
        return candidates[0]
    for geography in candidates:
        if dset is not None and dset.has(class_name, geography):
            return geography
    raise MissingDescriptorsError(
        f"no descriptor entry for class {class_name!r} under any of {candidates}"
    )


def predict_dataset(samples: list[SampleMeta], store: EmbeddingStore,
                    classes: list[str], strategy: PromptStrategy,
                    dset: DescriptorSet | None, enc: ToyTextEncoder, vocab: Vocab,
                    tau_zs: float = 1.0,
                    class_config: ClassConfig | None = None,
                    fallback: tuple[str, ...] = DEFAULT_FALLBACK
                    ) -> list[Prediction]:
    """Rank every sample. Scores are computed via matrix products against the
    per-class prompt matrices; this equals the per-descriptor mean of cosines
    because all embeddings are unit-norm."""
    cache = PromptEmbeddingCache(enc=enc, vocab=vocab, dset=dset,
                                 class_config=class_config)
    predictions: list[Prediction] = []
    for meta in samples:
        img = store.get(meta.id)
        scores: dict[str, float] = {}
        for c in classes:
            g = resolve_geography(meta, c, strategy, dset, fallback)
            mat = cache.matrix(c, strategy, g)
            scores[c] = float(np.mean(mat @ img)) / tau_zs
        ranked = sorted(classes, key=lambda c: (-scores[c], c))
        predictions.append(Prediction(ranked=ranked, scores=scores))
    return predictions


def zeroshot_report(samples: list[SampleMeta], predictions: list[Prediction],
                    strategy: PromptStrategy, ks: tuple[int, ...] = (1, 3),
                    group_keys: tuple[str, ...] = ("continent",)) -> dict:
    """Report JSON shape: strategy, per-class recall, balanced top-1/-3, groups."""
    ranked = [p.ranked for p in predictions]
    labels = [s.label for s in samples]
    report: EvalReport = build_report(ranked, labels, ks=ks)
    groups = {
        key: {g: rep.to_json_dict() for g, rep in
              group_report(ranked, samples, key, ks=ks).items()}
        for key in group_keys
    }
    return {
        "strategy": strategy.value,
        "n_samples": report.n_samples,
        "per_class_recall": dict(sorted(report.per_class_recall[ks[0]].items())),
        "balanced_top1": report.balanced_acc.get(1),
        "balanced_top3": report.balanced_acc.get(3),
        "groups": groups,
    }
