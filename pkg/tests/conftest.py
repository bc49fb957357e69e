import numpy as np
import pytest

from geoprompt.embedcore import Rng
from geoprompt.encoder import ToyTextEncoder
from geoprompt.prompting import ClassConfig, PromptSpec, PromptStrategy, build_vocab, render_prompt

FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"
LLM_FIXTURES = FIXTURES + "/llm"

PAPER_BATHTUB_DESCRIPTORS = [
    "short in length and deep",
    "square shape",
    "wooden, plastic, or steel material",
    "white or brown color",
    "benches on side",
    "next to shower",
]


@pytest.fixture
def rng():
    return Rng(20240)


@pytest.fixture
def small_vocab():
    """Vocabulary covering the stove/bathtub fixture prompts."""
    classes = ["stove", "bathtub", "mystery"]
    countries = ["Japan", "Burundi", "Burkina Faso"]
    descriptors = PAPER_BATHTUB_DESCRIPTORS + [
        "made of clay or mud", "open fire beneath", "compact gas burner",
        "large plastic basin",
    ]
    corpus = list(classes)
    for c in classes:
        corpus.append(render_prompt(PromptSpec(PromptStrategy.DEFAULT, c)))
        for g in countries:
            corpus.append(render_prompt(
                PromptSpec(PromptStrategy.COUNTRY_IN_PROMPT, c, country=g)))
            for d in descriptors:
                corpus.append(render_prompt(
                    PromptSpec(PromptStrategy.COUNTRY_IN_PROMPT_LLM, c,
                               country=g, descriptor=d)))
    return build_vocab(corpus)


@pytest.fixture
def random_encoder(small_vocab, rng):
    return ToyTextEncoder.random(len(small_vocab), d_in=6, d_out=5,
                                 rng=rng.derive(1))


@pytest.fixture
def identity_encoder(small_vocab, rng):
    """Square encoder (identity projection) over a random token table."""
    table = rng.derive(2).normal(scale=0.5, size=(len(small_vocab), 6))
    return ToyTextEncoder.from_table(table)


@pytest.fixture
def class_config():
    return ClassConfig.from_entries([
        {"name": "stove", "plural": False, "aliases": ["cooker"]},
        {"name": "bathtub", "plural": False},
        {"name": "tools", "plural": True},
    ])


def reference_encode(enc, rows_resolved):
    """Independent mean -> affine -> normalize, written with explicit loops."""
    d_in = enc.d_in
    pooled = [0.0] * d_in
    for row in rows_resolved:
        for j in range(d_in):
            pooled[j] += float(row[j])
    pooled = [x / len(rows_resolved) for x in pooled]
    z = []
    for i in range(enc.d_out):
        acc = float(enc.bias[i])
        for j in range(d_in):
            acc += float(enc.projection[i][j]) * pooled[j]
        z.append(acc)
    norm = sum(x * x for x in z) ** 0.5
    return np.array([x / norm for x in z])
