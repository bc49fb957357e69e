"""Dual-encoder contract: a toy differentiable text encoder and an embedding store.

The text encoder maps a sequence of token rows (learned soft tokens or
vocabulary hard tokens) to a unit-norm embedding via mean pooling, an affine
projection, and L2 normalization. It is deliberately order-invariant and
attention-free so its vector-Jacobian product can be written exactly by hand;
anything satisfying the (encode, vjp) pair can be slotted in its place.

Image features never pass through an encoder here: precomputed embeddings are
ingested via :class:`EmbeddingStore` and re-normalized on load, since every
downstream similarity is cosine and therefore norm-invariant.

During training only soft tokens receive gradients; the hard-token table is
frozen, matching the frozen-backbone premise of soft prompting.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .embedcore import NORM_EPS, Rng, as_vector
from .errors import (
    BadTokenIdError,
    DimensionMismatchError,
    DuplicateIdError,
    EmptyListError,
    NearZeroNormError,
    ParseError,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardToken:
    """A frozen vocabulary index, resolved through the embedding table."""

    id: int


@dataclass(frozen=True)
class SoftToken:
    """A learnable input-space vector used as-is (no table lookup)."""

    vector: np.ndarray


TokenRow = Union[HardToken, SoftToken]


@dataclass
class ToyTextEncoder:
    """Mean-pool -> affine -> L2-normalize text encoder.

    embedding:  (vocab_size, d_in) frozen token table
    projection: (d_out, d_in)
    bias:       (d_out,)
    """

    embedding: np.ndarray
    projection: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.projection.shape[1] != self.embedding.shape[1]:
            raise DimensionMismatchError(
                "projection input width must match token embedding width"
            )
        if self.bias.shape[0] != self.projection.shape[0]:
            raise DimensionMismatchError("bias length must match projection rows")
        for name, arr in (("embedding", self.embedding),
                          ("projection", self.projection),
                          ("bias", self.bias)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"encoder parameter {name} contains NaN/Inf")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_in(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_out(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def random(cls, vocab_size: int, d_in: int, d_out: int, rng: Rng,
               scale: float = 0.5) -> "ToyTextEncoder":
        """Random dense parameters, for tests and ad-hoc experiments."""
        return cls(
            embedding=rng.normal(scale=scale, size=(vocab_size, d_in)),
            projection=rng.normal(scale=scale, size=(d_out, d_in)),
            bias=rng.normal(scale=scale, size=d_out),
        )

    @classmethod
    def from_table(cls, embedding: np.ndarray) -> "ToyTextEncoder":
        """Identity projection, zero bias: output dim equals token width."""
        embedding = np.asarray(embedding, dtype=np.float64)
        d = embedding.shape[1]
        return cls(embedding=embedding, projection=np.eye(d), bias=np.zeros(d))

    def fingerprint(self) -> str:
        """Stable hash of all parameters; keys knowledge-vector caches."""
        h = hashlib.sha256()
        for arr in (self.embedding, self.projection, self.bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _resolve_rows(enc: ToyTextEncoder, rows: Sequence[TokenRow]) -> np.ndarray:
    if len(rows) == 0:
        raise EmptyListError("encode_text requires at least one token row")
    out = np.empty((len(rows), enc.d_in), dtype=np.float64)
    for i, row in enumerate(rows):
        if isinstance(row, HardToken):
            if not 0 <= row.id < enc.vocab_size:
                raise BadTokenIdError(
                    f"token id {row.id} outside vocabulary of size {enc.vocab_size}"
                )
            out[i] = enc.embedding[row.id]
        elif isinstance(row, SoftToken):
            v = as_vector(row.vector)
            if v.shape[0] != enc.d_in:
                raise DimensionMismatchError(
                    f"soft token width {v.shape[0]} != encoder d_in {enc.d_in}"
                )
            out[i] = v
        else:
            raise TypeError(f"unsupported token row {row!r}")
    return out


def encode_text(enc: ToyTextEncoder, rows: Sequence[TokenRow]) -> np.ndarray:
    """Unit-norm embedding of a token sequence (mean -> affine -> normalize)."""
    resolved = _resolve_rows(enc, rows)
    pooled = resolved.mean(axis=0)
    z = enc.projection @ pooled + enc.bias
    n = float(np.linalg.norm(z))
    if n <= NORM_EPS:
        raise NearZeroNormError("encoded text collapsed to (near) zero norm")
    return z / n


def encode_text_vjp(enc: ToyTextEncoder, rows: Sequence[TokenRow],
                    upstream: np.ndarray) -> list[np.ndarray]:
    """Exact vector-Jacobian product of encode_text w.r.t. each soft token.

    Returns one (d_in,) gradient per SoftToken in row order. Hard tokens are
    frozen and receive nothing. The normalize Jacobian projects out the
    component of ``upstream`` parallel to the output, so radial components of
    the upstream signal never reach the parameters.
    """
    upstream = as_vector(upstream)
    if upstream.shape[0] != enc.d_out:
        raise DimensionMismatchError("upstream width must match encoder output dim")
    resolved = _resolve_rows(enc, rows)
    pooled = resolved.mean(axis=0)
    z = enc.projection @ pooled + enc.bias
    n = float(np.linalg.norm(z))
    if n <= NORM_EPS:
        raise NearZeroNormError("encoded text collapsed to (near) zero norm")
    z_hat = z / n
    g_z = (upstream - float(upstream @ z_hat) * z_hat) / n
    g_pooled = enc.projection.T @ g_z
    per_row = g_pooled / len(rows)
    return [per_row.copy() for row in rows if isinstance(row, SoftToken)]


@dataclass
class EmbeddingStore:
    """Precomputed embeddings keyed by id; the stand-in image encoder ``f``.

    Entries are unit-normalized on load.
    """

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, id_: str, vec: np.ndarray) -> None:
        if id_ in self.entries:
            raise DuplicateIdError(f"duplicate embedding id {id_!r}")
        v = as_vector(vec)
        if v.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"entry {id_!r} has dim {v.shape[0]}, store dim {self.dim}"
            )
        n = float(np.linalg.norm(v))
        if n <= NORM_EPS:
            raise NearZeroNormError(f"entry {id_!r} has near-zero norm")
        self.entries[id_] = v / n

    def get(self, id_: str) -> np.ndarray:
        return self.entries[id_]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, id_: str) -> bool:
        return id_ in self.entries

    def ids(self) -> list[str]:
        return list(self.entries)

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        """Rows stacked in the order of ``ids``."""
        return np.stack([self.entries[i] for i in ids])


def load_embedding_store(path) -> EmbeddingStore:
    """Read the TSV store format.

    Line 1 is ``dim=<D>``; every further non-comment line is
    ``<id>\\t<v1>\\t...\\t<vD>``. Lines starting with ``#`` are skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header_idx = None
    for i, line in enumerate(lines):
        if line.startswith("#") or not line.strip():
            continue
        header_idx = i
        break
    if header_idx is None:
        raise ParseError("embedding store file has no header", line=1)
    header = lines[header_idx].strip()
    if not header.startswith("dim="):
        raise ParseError(f"expected 'dim=<D>' header, got {header!r}",
                         line=header_idx + 1)
    try:
        dim = int(header[len("dim="):])
    except ValueError:
        raise ParseError(f"bad dimension in header {header!r}", line=header_idx + 1)
    if dim <= 0:
        raise ParseError("dimension must be positive", line=header_idx + 1)
    store = EmbeddingStore(dim=dim)
    for lineno, line in enumerate(lines[header_idx + 1:], start=header_idx + 2):
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != dim + 1:
            raise ParseError(
                f"expected id + {dim} values, got {len(parts)} fields", line=lineno
            )
        id_ = parts[0]
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError:
            raise ParseError("non-numeric embedding value", line=lineno)
        if id_ in store:
            raise DuplicateIdError(f"duplicate embedding id {id_!r} at line {lineno}")
        store.add(id_, vec)
    log.info("loaded %d embeddings of dim %d from %s", len(store), dim, path)
    return store


def save_embedding_store(vectors: dict[str, np.ndarray], path, dim: int | None = None) -> None:
    """Write vectors in the TSV store format with full-precision floats."""
    items = list(vectors.items())
    if dim is None:
        if not items:
            raise EmptyListError("cannot infer dim of an empty store")
        dim = len(items[0][1])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={dim}\n")
        for id_, vec in items:
            v = as_vector(vec)
            if v.shape[0] != dim:
                raise DimensionMismatchError(f"entry {id_!r} has dim {v.shape[0]}")
            fh.write(id_ + "\t" + "\t".join(repr(float(x)) for x in v) + "\n")
