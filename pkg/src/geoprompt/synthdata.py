"""Synthetic geo-shift datasets in embedding space.

Each class c owns a unit direction u_c; each (geography g, class c) pair owns
a unit shift direction v_gc orthogonal to u_c. A sample drawn for (c, g) is

    normalize(u_c + delta_g * v_gc + noise),  noise ~ N(0, sigma^2 I).

For every geography with a shift we pick one "attractor" class a_g and point
the shifts of all other classes partly toward u_{a_g}: shifted images of any
class then resemble the attractor under default prompts, which is what makes
plain prompting degrade as delta grows while leaving classes separable for a
geography-aware prompt. The attractor's own shift is a fresh orthogonal
direction.

The world also carries a vocabulary for the toy encoder (identity projection,
zero bias): filler words embed to zero, each class name token embeds to u_c,
and each synthetic descriptor token embeds to a scaled copy of its pair's
shift axis (slightly overweighting the attractor component, since the useful
descriptor knowledge is precisely what separates the geography from the
default concept). Descriptors of an unshifted geography embed to zero, so
descriptor prompts degenerate exactly to default prompts when delta_g = 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedcore import Rng, l2_normalize
from .encoder import EmbeddingStore, ToyTextEncoder, save_embedding_store
from .errors import DimensionTooSmallError, InsufficientSamplesError
from .evalmetrics import INCOME_BUCKETS, SampleMeta
from .knowledge import DescriptorEntry, DescriptorSet, class_knowledge
from .prompting import (
    ClassConfig,
    PromptSpec,
    PromptStrategy,
    Vocab,
    build_vocab,
    render_prompt,
    split_words,
)

log = logging.getLogger(__name__)

CONTINENT_CYCLE = ("Africa", "Americas", "Asia", "Europe")

MANIFEST_FILE = "manifest.jsonl"
STORE_FILE = "store.tsv"
VOCAB_FILE = "vocab.tsv"
DESCRIPTOR_FILE = "descriptors.jsonl"
CLASSES_FILE = "classes.json"

RNG_STREAM_FRAME = 1
RNG_STREAM_NOISE = 2
RNG_STREAM_SPLIT = 3

SYNTH_TIMESTAMP = "1970-01-01T00:00:00Z"


@dataclass
class SynthConfig:
    n_classes: int = 5
    n_geographies: int = 4
    n_source_geographies: int = 1
    samples_per_class_geo: int = 40
    sigma: float = 0.3
    delta_source: float = 0.0
    delta_target: float = 2.0
    deltas: list[float] | None = None  # explicit per-geography override
    dim: int = 32
    descriptors_per_pair: int = 3
    confusion_mix: float = 0.6        # attractor weight inside the image shift
    descriptor_emphasis: float = 0.9  # attractor weight inside descriptor tokens
    descriptor_gain: float = 2.5      # descriptor token magnitude per unit delta
    shots: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2 or self.n_geographies < 2:
            raise ValueError("need at least 2 classes and 2 geographies")
        if not 1 <= self.n_source_geographies < self.n_geographies:
            raise ValueError("source geographies must leave at least one target")
        if self.samples_per_class_geo < 1:
            raise ValueError("samples_per_class_geo must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.deltas is not None and len(self.deltas) != self.n_geographies:
            raise ValueError("deltas must list one value per geography")
        if not 0.0 <= self.confusion_mix < 1.0:
            raise ValueError("confusion_mix must be in [0, 1)")
        if not 0.0 <= self.descriptor_emphasis <= 1.0:
            raise ValueError("descriptor_emphasis must be in [0, 1]")

    def geography_deltas(self) -> list[float]:
        if self.deltas is not None:
            return [float(d) for d in self.deltas]
        return [self.delta_source if g < self.n_source_geographies
                else self.delta_target for g in range(self.n_geographies)]


@dataclass
class SynthWorld:
    config: SynthConfig
    class_names: list[str]
    geo_names: list[str]
    deltas: list[float]
    attractors: list[int]
    continents: dict[str, str]
    class_axes: np.ndarray         # (n_classes, dim) unit rows
    shift_axes: np.ndarray         # (n_geo, n_classes, dim) unit, each ⊥ own class axis
    samples: list[SampleMeta]
    embeddings: dict[str, np.ndarray]
    descriptor_set: DescriptorSet
    vocab: Vocab
    encoder: ToyTextEncoder
    class_config: ClassConfig
    shot_ids: list[str] = field(default_factory=list)

    @property
    def source_geographies(self) -> list[str]:
        return self.geo_names[: self.config.n_source_geographies]

    @property
    def target_geographies(self) -> list[str]:
        return self.geo_names[self.config.n_source_geographies:]

    def store(self) -> EmbeddingStore:
        store = EmbeddingStore(dim=self.config.dim)
        for id_, vec in self.embeddings.items():
            store.add(id_, vec)
        return store


def _descriptor_string(geo: str, cls: str, index: int) -> str:
    return f"{geo}_{cls}_feat_{index}"


def _jitter_scales(n: int) -> list[float]:
    """Evenly spaced multipliers around 1 so descriptor lists are not all
    parallel; mean stays ~1."""
    if n == 1:
        return [1.0]
    return [0.8 + 0.4 * i / (n - 1) for i in range(n)]


def split_source_samples(ids_by_class: dict[str, list[str]], rng: Rng,
                         shots: int) -> tuple[dict[str, str], list[str]]:
    """64/16/20 stratified split of source ids, plus a seeded shots-per-class
    marking inside source-train."""
    assignment: dict[str, str] = {}
    shot_ids: list[str] = []
    for cls in sorted(ids_by_class):
        ids = list(ids_by_class[cls])
        if len(ids) < 3:
            raise InsufficientSamplesError(
                f"class {cls!r} has only {len(ids)} source samples"
            )
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(shuffled)
        cut_train = round(0.64 * n)
        cut_val = round(0.80 * n)
        train_ids = shuffled[:cut_train]
        for sid in train_ids:
            assignment[sid] = "source-train"
        for sid in shuffled[cut_train:cut_val]:
            assignment[sid] = "source-val"
        for sid in shuffled[cut_val:]:
            assignment[sid] = "source-test"
        if len(train_ids) < shots:
            log.warning("class %r: %d < %d shots in source-train; marking all",
                        cls, len(train_ids), shots)
            shot_ids.extend(train_ids)
        else:
            pick = rng.choice(np.arange(len(train_ids)), size=shots, replace=False)
            shot_ids.extend(train_ids[i] for i in sorted(int(i) for i in pick))
    return assignment, shot_ids


def generate(config: SynthConfig) -> SynthWorld:
    """Build a fully reproducible world from the config seed."""
    needed = config.n_classes + config.n_classes * config.n_geographies
    if config.dim < needed:
        raise DimensionTooSmallError(
            f"dim={config.dim} < {needed} required for the orthogonal frame"
        )
    rng = Rng(config.seed)
    frame_rng = rng.derive(RNG_STREAM_FRAME)
    gauss = frame_rng.normal(size=(config.dim, config.dim))
    q, _ = np.linalg.qr(gauss)

    n_cls, n_geo = config.n_classes, config.n_geographies
    class_names = [f"cls_{c}" for c in range(n_cls)]
    geo_names = [f"geo_{g}" for g in range(n_geo)]
    deltas = config.geography_deltas()
    attractors = [g % n_cls for g in range(n_geo)]
    continents = {geo_names[g]: CONTINENT_CYCLE[g % len(CONTINENT_CYCLE)]
                  for g in range(n_geo)}

    u = q[:, :n_cls].T.copy()
    fresh = q[:, n_cls:n_cls + n_geo * n_cls].T.reshape(n_geo, n_cls, config.dim).copy()
    mix = config.confusion_mix
    residual = float(np.sqrt(1.0 - mix * mix))
    v = np.empty_like(fresh)
    emphasis = config.descriptor_emphasis
    desc_residual = float(np.sqrt(1.0 - emphasis * emphasis))
    desc_axes = np.empty_like(fresh)
    for g in range(n_geo):
        a = attractors[g]
        for c in range(n_cls):
            if c == a:
                v[g, c] = fresh[g, c]
                desc_axes[g, c] = fresh[g, c]
            else:
                v[g, c] = mix * u[a] + residual * fresh[g, c]
                desc_axes[g, c] = emphasis * u[a] + desc_residual * fresh[g, c]

    # samples
    noise_rng = rng.derive(RNG_STREAM_NOISE)
    samples: list[SampleMeta] = []
    embeddings: dict[str, np.ndarray] = {}
    income_cursor = 0
    for g, geo in enumerate(geo_names):
        for c, cls in enumerate(class_names):
            mean = u[c] + deltas[g] * v[g, c]
            noise = noise_rng.normal(scale=config.sigma,
                                     size=(config.samples_per_class_geo, config.dim))
            for j in range(config.samples_per_class_geo):
                sid = f"{cls}__{geo}__{j:03d}"
                embeddings[sid] = l2_normalize(mean + noise[j])
                samples.append(SampleMeta(
                    id=sid, label=cls, country=geo, continent=continents[geo],
                    income_bucket=INCOME_BUCKETS[income_cursor % len(INCOME_BUCKETS)],
                    split="",  # filled below
                ))
                income_cursor += 1

    # splits: stratified 64/16/20 on source geographies, everything else target
    source_set = set(geo_names[: config.n_source_geographies])
    ids_by_class: dict[str, list[str]] = {c: [] for c in class_names}
    for s in samples:
        if s.country in source_set:
            ids_by_class[s.label].append(s.id)
    assignment, shot_ids = split_source_samples(
        ids_by_class, rng.derive(RNG_STREAM_SPLIT), config.shots
    )
    final_samples = []
    for s in samples:
        split = assignment.get(s.id, "target")
        final_samples.append(SampleMeta(id=s.id, label=s.label, country=s.country,
                                        continent=s.continent,
                                        income_bucket=s.income_bucket, split=split))

    # descriptors: per (class, geography) lists plus a general table
    scales = _jitter_scales(config.descriptors_per_pair)
    dset = DescriptorSet()
    for g, geo in enumerate(geo_names):
        for c, cls in enumerate(class_names):
            names = [_descriptor_string(geo, cls, i)
                     for i in range(config.descriptors_per_pair)]
            dset.add_geo(cls, geo, DescriptorEntry(
                descriptors=names, model="synthetic", template_hash="synthetic",
                acquired_at=SYNTH_TIMESTAMP))
    for c, cls in enumerate(class_names):
        dset.add_general(cls, DescriptorEntry(
            descriptors=[f"{cls}_common_feat"], model="synthetic",
            template_hash="synthetic", acquired_at=SYNTH_TIMESTAMP))

    class_config = ClassConfig.uniform(class_names)
    vocab = _build_world_vocab(class_names, geo_names, dset, class_config)
    table = np.zeros((len(vocab), config.dim))
    for c, cls in enumerate(class_names):
        table[_single_token_id(vocab, cls)] = u[c]
        table[_single_token_id(vocab, f"{cls}_common_feat")] = 0.5 * u[c]
        for g, geo in enumerate(geo_names):
            for i in range(config.descriptors_per_pair):
                token_id = _single_token_id(vocab, _descriptor_string(geo, cls, i))
                table[token_id] = (config.descriptor_gain * deltas[g] * scales[i]
                                   * desc_axes[g, c])
    encoder = ToyTextEncoder.from_table(table)

    world = SynthWorld(
        config=config, class_names=class_names, geo_names=geo_names,
        deltas=deltas, attractors=attractors, continents=continents,
        class_axes=u, shift_axes=v, samples=final_samples,
        embeddings=embeddings, descriptor_set=dset, vocab=vocab,
        encoder=encoder, class_config=class_config, shot_ids=shot_ids,
    )
    _assert_orthogonality(world)
    _assert_knowledge_fidelity(world)
    return world


def _build_world_vocab(class_names: Sequence[str], geo_names: Sequence[str],
                       dset: DescriptorSet, class_config: ClassConfig) -> Vocab:
    """Vocabulary over every prompt the world can render, via the standard
    render/tokenize pipeline so token forms always match lookups."""
    corpus: list[str] = list(class_names)
    for cls in class_names:
        corpus.append(render_prompt(PromptSpec(PromptStrategy.DEFAULT, cls)))
        for d in dset.get_general(cls):
            corpus.append(render_prompt(
                PromptSpec(PromptStrategy.GENERAL_LLM, cls, descriptor=d)))
        for geo in geo_names:
            corpus.append(render_prompt(
                PromptSpec(PromptStrategy.COUNTRY_IN_PROMPT, cls, country=geo)))
            for d in dset.get(cls, geo):
                corpus.append(render_prompt(
                    PromptSpec(PromptStrategy.COUNTRY_IN_PROMPT_LLM, cls,
                               country=geo, descriptor=d)))
    return build_vocab(corpus)


def _single_token_id(vocab: Vocab, text: str) -> int:
    words = split_words(text)
    if len(words) != 1:
        raise ValueError(f"expected a single token for {text!r}, got {words}")
    token_id = vocab.id_of(words[0])
    if token_id == vocab.unk_id:
        raise ValueError(f"token for {text!r} missing from world vocabulary")
    return token_id


ORTHO_TOL = 1e-9
FIDELITY_MIN = 0.7


def _assert_orthogonality(world: SynthWorld) -> None:
    u, v = world.class_axes, world.shift_axes
    for g in range(len(world.geo_names)):
        dots = np.abs(np.sum(v[g] * u, axis=1))
        worst = float(dots.max())
        if worst > ORTHO_TOL:
            raise AssertionError(f"shift axis not orthogonal to class axis: {worst}")


def knowledge_fidelity(world: SynthWorld, geo: str) -> float:
    """Worst-case cosine between the descriptor-built knowledge vector and
    the true shifted class direction for one geography."""
    g = world.geo_names.index(geo)
    delta = world.deltas[g]
    worst = 1.0
    for c, cls in enumerate(world.class_names):
        k = class_knowledge(cls, geo, PromptStrategy.COUNTRY_LLM,
                            world.descriptor_set, world.encoder, world.vocab)
        truth = l2_normalize(world.class_axes[c] + delta * world.shift_axes[g, c])
        cos = float(l2_normalize(k) @ truth)
        worst = min(worst, cos)
    return worst


def _assert_knowledge_fidelity(world: SynthWorld) -> None:
    # The fidelity floor is pinned at unit shift; check any geography there.
    for g, geo in enumerate(world.geo_names):
        if abs(world.deltas[g] - 1.0) < 1e-12:
            worst = knowledge_fidelity(world, geo)
            if worst < FIDELITY_MIN:
                raise AssertionError(
                    f"knowledge fidelity {worst:.3f} < {FIDELITY_MIN} for {geo}"
                )


def write_world(world: SynthWorld, out_dir) -> dict[str, Path]:
    """Write manifest, embedding store, descriptor cache, vocab table, and
    class config; returns the path of each artifact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": out / MANIFEST_FILE,
        "store": out / STORE_FILE,
        "vocab": out / VOCAB_FILE,
        "descriptors": out / DESCRIPTOR_FILE,
        "classes": out / CLASSES_FILE,
    }
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        for s in world.samples:
            fh.write(json.dumps({
                "id": s.id, "class": s.label, "country": s.country,
                "continent": s.continent, "income_bucket": s.income_bucket,
                "split": s.split,
            }) + "\n")
    save_embedding_store(world.embeddings, paths["store"], dim=world.config.dim)
    vocab_vectors = {tok: world.encoder.embedding[i]
                     for i, tok in enumerate(world.vocab.tokens)}
    save_embedding_store(vocab_vectors, paths["vocab"], dim=world.config.dim)
    world.descriptor_set.save(paths["descriptors"])
    world.class_config.save(paths["classes"])
    return paths


def load_vocab_table(path) -> tuple[Vocab, np.ndarray]:
    """Read a vocab TSV back into a Vocab plus its embedding table.

    Vocab rows are not unit vectors (filler words embed to zero), so this
    parses directly instead of going through the normalizing store loader.
    """
    raw: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    dim = None
    for line in lines:
        if line.startswith("#") or not line.strip():
            continue
        if dim is None:
            dim = int(line.strip()[len("dim="):])
            continue
        parts = line.split("\t")
        raw[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
    tokens = list(raw)
    if tokens and tokens[0] != "<unk>":
        tokens = ["<unk>"] + [t for t in tokens if t != "<unk>"]
    vocab = Vocab(tokens=tokens)
    table = np.zeros((len(tokens), dim))
    for i, tok in enumerate(tokens):
        table[i] = raw.get(tok, np.zeros(dim))
    return vocab, table
