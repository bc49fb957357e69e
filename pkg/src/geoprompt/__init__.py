"""Geography-aware prompting for dual-encoder classifiers.

Probes an LLM for per-country visual descriptors, assembles
geography-conditioned prompts for zero-shot scoring, and trains soft prompts
regularized toward ensembled geography knowledge, with evaluation, analysis,
and synthetic-dataset harnesses.
"""

__version__ = "0.1.0"

from .embedcore import Rng, cosine_sim, l2_normalize, mean_vectors
from .encoder import (
    EmbeddingStore,
    HardToken,
    SoftToken,
    ToyTextEncoder,
    encode_text,
    encode_text_vjp,
    load_embedding_store,
    save_embedding_store,
)
from .knowledge import (
    DescriptorSet,
    GeographySet,
    acquire,
    build_probe_prompt,
    class_knowledge,
    parse_descriptors,
    target_knowledge,
)
from .prompting import (
    ClassConfig,
    PromptSpec,
    PromptStrategy,
    Vocab,
    article_for,
    build_vocab,
    embed_prompt,
    render_prompt,
    tokenize,
)
from .softprompt import (
    KnowledgeTargets,
    SoftPromptState,
    TrainConfig,
    build_class_prompt,
    ce_loss,
    class_embeddings,
    gkr_loss,
    grad_step,
    kgcoop_targets,
    total_loss,
    train,
)
from .synthdata import SynthConfig, SynthWorld, generate
from .zeroshot import Prediction, class_score, descriptor_logit, predict

__all__ = [name for name in dir() if not name.startswith("_")]
