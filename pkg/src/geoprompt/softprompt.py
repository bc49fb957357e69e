"""Learnable context vectors with geography-knowledge regularization.

Each class prompt is M shared context vectors followed by the class-name
hard tokens. Training minimizes cross-entropy over cosine logits on source
images plus a weighted cosine-distance pull of every class embedding toward
its frozen knowledge target:

    loss = ce + lambda * (1 - mean_c cos(w_c, k_c))

Gradients reach the context vectors analytically through the softmax, the
cosine, and the encoder's vector-Jacobian product; knowledge targets are
constants. With lambda = 0 the regularizer contributes nothing and the
trainer is the plain context-optimization baseline; pointing the targets at
default-prompt embeddings instead of geography knowledge gives the
KgCoOp-style variant. Training is single-threaded and bit-deterministic
given the config seed.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedcore import Rng
from .encoder import SoftToken, TokenRow, ToyTextEncoder, encode_text, encode_text_vjp
from .errors import (
    EmptyClassError,
    EmptyClassTokensError,
    MissingTargetError,
    NearZeroNormError,
    NonFiniteLossError,
)
from .evalmetrics import SampleMeta
from .prompting import ClassConfig, PromptSpec, PromptStrategy, Vocab, embed_prompt, tokenize

log = logging.getLogger(__name__)

RNG_STREAM_INIT = 11
RNG_STREAM_SHOTS = 12
RNG_STREAM_EPOCHS = 13


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Defaults follow the published few-shot prompt-tuning recipe: 16 shots,
    context length 4, 100 epochs, batch size 128, temperature 0.01 (fixed,
    not learned), SGD with momentum 0.9 under a cosine-annealed learning
    rate. reg_weight 4.0 suits the household-object setting; 8.0 suits the
    larger web-imagery setting.
    """

    shots: int = 16
    epochs: int = 100
    batch_size: int = 128
    context_length: int = 4
    reg_weight: float = 4.0
    tau: float = 0.01
    learning_rate: float = 0.002
    momentum: float = 0.9
    schedule: str = "cosine"
    init_std: float = 0.02
    seed: int = 0
    knowledge_source: str = "target"  # target | all | source

    def __post_init__(self) -> None:
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("shots", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.knowledge_source not in ("target", "all", "source"):
            raise ValueError(f"unknown knowledge_source {self.knowledge_source!r}")


@dataclass
class KnowledgeTargets:
    """Frozen per-class regularization anchors with unit-direction cache."""

    vectors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self._unit = {}
        for c, v in self.vectors.items():
            n = float(np.linalg.norm(v))
            if n <= 1e-9:
                raise NearZeroNormError(f"knowledge target for {c!r} has norm {n!r}")
            self._unit[c] = np.asarray(v, dtype=np.float64) / n

    def unit_rows(self, classes: list[str]) -> np.ndarray:
        missing = [c for c in classes if c not in self.vectors]
        if missing:
            raise MissingTargetError(f"no knowledge target for classes {missing}")
        return np.stack([self._unit[c] for c in classes])

    def digest(self) -> bytes:
        """Byte snapshot used to assert targets stay frozen across training."""
        parts = []
        for c in sorted(self.vectors):
            parts.append(c.encode("utf-8"))
            parts.append(np.ascontiguousarray(self.vectors[c]).tobytes())
        return b"".join(parts)


@dataclass
class SoftPromptState:
    """Learnable context plus optimizer state and training history."""

    context: np.ndarray  # (M, d_in)
    velocity: np.ndarray
    epoch: int
    config: TrainConfig
    rng_state: dict
    history: list[dict] = field(default_factory=list)


@dataclass
class LossRecord:
    ce: float
    gkr: float
    total: float
    lr: float


def build_class_prompt(context: np.ndarray, class_name: str,
                       vocab: Vocab) -> list[TokenRow]:
    """M soft tokens followed by the class-name hard tokens."""
    if not class_name.strip():
        raise EmptyClassTokensError("class name is empty")
    hard = tokenize(class_name, vocab)
    if not hard:
        raise EmptyClassTokensError(f"class {class_name!r} produced no tokens")
    return [SoftToken(context[m]) for m in range(context.shape[0])] + list(hard)


def class_embeddings(context: np.ndarray, classes: list[str],
                     enc: ToyTextEncoder, vocab: Vocab) -> np.ndarray:
    """Unit-norm class embedding matrix, one row per class; recomputed every
    step because the context changes."""
    return np.stack([
        encode_text(enc, build_class_prompt(context, c, vocab)) for c in classes
    ])


def ce_loss(class_embs: np.ndarray, img: np.ndarray, label_index: int,
            tau: float) -> float:
    """Cross-entropy of the cosine-logit softmax at the true class."""
    logits = (class_embs @ img) / tau
    shift = logits - logits.max()
    return float(np.log(np.exp(shift).sum()) - shift[label_index])


def gkr_loss(class_embs: np.ndarray, targets: KnowledgeTargets,
             classes: list[str]) -> float:
    """1 - mean cosine between class embeddings and their knowledge anchors.

    Bounded in [0, 2]: 0 when every embedding aligns with its anchor, 2 when
    every embedding opposes it.
    """
    k_unit = targets.unit_rows(classes)
    cos = np.sum(class_embs * k_unit, axis=1)
    return float(1.0 - np.mean(np.clip(cos, -1.0, 1.0)))


def total_loss(ce: float, gkr: float, reg_weight: float) -> float:
    """ce + lambda * gkr; reduces to the unregularized baseline at lambda=0."""
    if reg_weight < 0:
        raise ValueError("reg_weight must be >= 0")
    return ce + reg_weight * gkr


def batch_loss_and_context_grad(context: np.ndarray, classes: list[str],
                                feats: np.ndarray, label_indices: np.ndarray,
                                targets: KnowledgeTargets | None,
                                reg_weight: float, tau: float,
                                enc: ToyTextEncoder, vocab: Vocab
                                ) -> tuple[LossRecord, np.ndarray]:
    """Mean total loss over a batch and its exact gradient w.r.t. the context.

    The cross-entropy upstream for class c is sum_k (p_kc - y_kc) f_k / (B tau);
    the regularizer adds -lambda * unit(k_c) / N_c when active. Both flow to
    the context through the encoder VJP (the normalize Jacobian discards
    radial components, so unit-vector cosines may be differentiated as dot
    products). The gradient is identical for every context position because
    pooling is a mean.
    """
    n_classes = len(classes)
    batch = feats.shape[0]
    rows_per_class = [build_class_prompt(context, c, vocab) for c in classes]
    class_embs = np.stack([encode_text(enc, rows) for rows in rows_per_class])

    logits = (class_embs @ feats.T) / tau            # (N_c, B)
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=0, keepdims=True)
    picked = shifted[label_indices, np.arange(batch)]
    ce = float(np.mean(np.log(expd.sum(axis=0)) - picked))

    onehot = np.zeros_like(probs)
    onehot[label_indices, np.arange(batch)] = 1.0
    upstream = (probs - onehot) @ feats / (batch * tau)   # (N_c, D)

    gkr = 0.0
    if targets is not None:
        gkr = gkr_loss(class_embs, targets, classes)
        if reg_weight != 0.0:
            upstream = upstream - reg_weight * targets.unit_rows(classes) / n_classes
    if not (np.isfinite(ce) and np.isfinite(gkr) and np.all(np.isfinite(upstream))):
        raise NonFiniteLossError(
            f"non-finite batch loss: ce={ce!r} gkr={gkr!r} "
            f"|context|max={float(np.abs(context).max())!r}"
        )

    grad = np.zeros_like(context)
    for c_idx in range(n_classes):
        soft_grads = encode_text_vjp(enc, rows_per_class[c_idx], upstream[c_idx])
        for m, g in enumerate(soft_grads):
            grad[m] += g
    return LossRecord(ce=ce, gkr=gkr, total=total_loss(ce, gkr, reg_weight),
                      lr=0.0), grad


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "constant":
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))


def grad_step(state: SoftPromptState, classes: list[str], feats: np.ndarray,
              label_indices: np.ndarray, targets: KnowledgeTargets | None,
              enc: ToyTextEncoder, vocab: Vocab, lr: float) -> LossRecord:
    """One SGD-with-momentum update on a batch; deterministic given state."""
    if feats.shape[0] == 0:
        raise ValueError("grad_step requires a nonempty batch")
    record, grad = batch_loss_and_context_grad(
        state.context, classes, feats, label_indices, targets,
        state.config.reg_weight, state.config.tau, enc, vocab,
    )
    if not np.isfinite(record.total) or not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(
            f"non-finite loss at epoch {state.epoch}: ce={record.ce!r} "
            f"gkr={record.gkr!r} |grad|={float(np.abs(grad).max())!r}"
        )
    state.velocity = state.config.momentum * state.velocity + grad
    state.context = state.context - lr * state.velocity
    record.lr = lr
    return record


def subsample_shots(samples: list[SampleMeta], classes: list[str], shots: int,
                    rng: Rng) -> list[SampleMeta]:
    """Stratified per-class sampling without replacement; classes short of
    ``shots`` keep everything they have, with a warning."""
    by_class: dict[str, list[SampleMeta]] = {c: [] for c in classes}
    for s in samples:
        if s.label in by_class:
            by_class[s.label].append(s)
    chosen: list[SampleMeta] = []
    for c in classes:
        pool = by_class[c]
        if not pool:
            raise EmptyClassError(f"class {c!r} has no samples in the source split")
        if len(pool) < shots:
            log.warning("class %r has %d < %d shots; using all", c, len(pool), shots)
            chosen.extend(pool)
        else:
            idx = rng.choice(np.arange(len(pool)), size=shots, replace=False)
            chosen.extend(pool[i] for i in sorted(int(i) for i in idx))
    return chosen


def train(config: TrainConfig, source_samples: list[SampleMeta],
          store, classes: list[str], targets: KnowledgeTargets | None,
          enc: ToyTextEncoder, vocab: Vocab) -> SoftPromptState:
    """Full training loop: seeded shot subsampling, seeded per-epoch
    shuffling, fixed epoch count, per-epoch loss history."""
    if targets is not None:
        frozen = targets.digest()
    rng = Rng(config.seed)
    context = rng.derive(RNG_STREAM_INIT).normal(
        scale=config.init_std, size=(config.context_length, enc.d_in)
    )
    state = SoftPromptState(
        context=context, velocity=np.zeros_like(context), epoch=0,
        config=config, rng_state={},
    )
    shots = subsample_shots(source_samples, classes, config.shots,
                            rng.derive(RNG_STREAM_SHOTS))
    feats = np.stack([store.get(s.id) for s in shots])
    class_index = {c: i for i, c in enumerate(classes)}
    labels = np.array([class_index[s.label] for s in shots], dtype=np.int64)

    epoch_rng = rng.derive(RNG_STREAM_EPOCHS)
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = learning_rate_at(config, epoch)
        perm = epoch_rng.permutation(len(shots))
        ce_sum = gkr_sum = total_sum = 0.0
        n_batches = 0
        for start in range(0, len(shots), config.batch_size):
            batch_idx = perm[start:start + config.batch_size]
            record = grad_step(state, classes, feats[batch_idx],
                               labels[batch_idx], targets, enc, vocab, lr)
            ce_sum += record.ce
            gkr_sum += record.gkr
            total_sum += record.total
            n_batches += 1
        state.history.append({
            "epoch": epoch,
            "ce": ce_sum / n_batches,
            "gkr": gkr_sum / n_batches,
            "total": total_sum / n_batches,
            "lr": lr,
        })
    state.epoch = config.epochs
    state.rng_state = epoch_rng.state_dict()
    if targets is not None and targets.digest() != frozen:
        raise MissingTargetError("knowledge targets changed during training")
    return state


def kgcoop_targets(classes: list[str], enc: ToyTextEncoder, vocab: Vocab,
                   class_config: ClassConfig | None = None) -> KnowledgeTargets:
    """Default-prompt embeddings as anchors: pulls learned class embeddings
    back toward the manual-prompt representation."""
    vectors = {}
    for c in classes:
        plural = class_config.is_plural(c) if class_config else False
        spec = PromptSpec(PromptStrategy.DEFAULT, c, plural=plural)
        vectors[c] = embed_prompt(spec, enc, vocab)
    return KnowledgeTargets(vectors=vectors)


def save_checkpoint(state: SoftPromptState, path) -> None:
    """JSON checkpoint: config echo, context, epoch, rng state, history."""
    payload = {
        "config": asdict(state.config),
        "context": [[float(x) for x in row] for row in state.context],
        "velocity": [[float(x) for x in row] for row in state.velocity],
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "history": state.history,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> SoftPromptState:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SoftPromptState(
        context=np.array(payload["context"], dtype=np.float64),
        velocity=np.array(payload["velocity"], dtype=np.float64),
        epoch=int(payload["epoch"]),
        config=TrainConfig(**payload["config"]),
        rng_state=payload["rng_state"],
        history=payload["history"],
    )


def write_training_log(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "ce", "gkr", "total", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["ce"]), repr(row["gkr"]),
                             repr(row["total"]), repr(row["lr"])])
