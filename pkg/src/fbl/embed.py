"""Token embedders, the trainable projection, and triplet-margin training.

An encoded sequence becomes a matrix of unit-norm vectors: each non-padding
token id is mapped to a raw vector by a pluggable embedder, pushed through
a linear projection (d_in -> d_out), and L2-normalized per row. Raw vectors
that are exactly zero stay zero after projection and are excluded from
late-interaction maxima.

The projection is trained with a margin loss over triplets
(query, positive doc, negative doc):

    loss = max(0, margin - score(q, pos) + score(q, neg))

with score the late-interaction sum of per-query-row maxima. Training is
plain mini-batch SGD; the analytic gradient (including the row
normalization Jacobian) is exposed separately so it can be checked against
finite differences. Gradient and loss math run in float64; stored
matrices are float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .corpus import Triplet
from .encode import EncodedSequence
from .errors import DimensionMismatch, FormatError, NonFiniteLoss

FBLE_MAGIC = b"FBLE"
FBLE_VERSION = 1


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # (n, d_out) float32; unit rows, or zero rows for dead tokens
    is_query: bool = False

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


class TokenEmbedder(Protocol):
    d_in: int

    def embed_ids(self, ids: Sequence[int]) -> np.ndarray: ...


class ReferenceHashEmbedder:
    """Deterministic pseudo-random unit vector per token id.

    Each id seeds its own generator from (seed, id), so the mapping is
    stable across processes and independent of lookup order.
    """

    def __init__(self, d_in: int = 768, seed: int = 42):
        self.d_in = d_in
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def _vector(self, token_id: int) -> np.ndarray:
        vec = self._cache.get(token_id)
        if vec is None:
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, token_id)))
            vec = rng.standard_normal(self.d_in)
            vec /= np.linalg.norm(vec)
            self._cache[token_id] = vec
        return vec

    def embed_ids(self, ids: Sequence[int]) -> np.ndarray:
        if len(ids) == 0:
            return np.zeros((0, self.d_in), dtype=np.float64)
        return np.stack([self._vector(i) for i in ids])


class FileEmbedder:
    """Static token-id-indexed matrix loaded from an FBLE file."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.d_in = self.matrix.shape[1]

    @classmethod
    def from_file(cls, path: str | Path) -> "FileEmbedder":
        return cls(read_matrix_file(path))

    def embed_ids(self, ids: Sequence[int]) -> np.ndarray:
        arr = np.asarray(ids, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.matrix.shape[0]):
            raise ValueError(
                f"token id out of embedder range [0, {self.matrix.shape[0]})"
            )
        return self.matrix[arr] if arr.size else np.zeros((0, self.d_in))


@dataclass
class LinearProjection:
    weights: np.ndarray  # (d_in, d_out) float64

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("projection weights must be 2-D")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("projection weights must be finite")
        if self.d_out > self.d_in:
            raise ValueError("d_out must not exceed d_in")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def seeded_init(cls, d_in: int, d_out: int, seed: int) -> "LinearProjection":
        bound = 1.0 / np.sqrt(d_in)
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-bound, bound, size=(d_in, d_out)))

    def save(self, path: str | Path) -> None:
        write_matrix_file(path, self.weights)

    @classmethod
    def load(cls, path: str | Path) -> "LinearProjection":
        return cls(read_matrix_file(path))


@dataclass
class TripletTrainConfig:
    margin: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 4
    batch_size: int = 16
    seed: int = 42

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# -- binary matrix file (FBLE) -------------------------------------------------


def write_matrix_file(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("FBLE files hold 2-D matrices")
    with open(path, "wb") as fh:
        fh.write(FBLE_MAGIC)
        fh.write(struct.pack("<III", FBLE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_matrix_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FBLE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FBLE_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"{path}: truncated header")
        version, rows, dim = struct.unpack("<III", header)
        if version != FBLE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read(rows * dim * 4)
        if len(payload) != rows * dim * 4:
            raise FormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()


# -- embedding -----------------------------------------------------------------


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return mat / safe


def embed_sequence(
    seq: EncodedSequence,
    embedder: TokenEmbedder,
    projection: LinearProjection,
    is_query: bool = False,
) -> EmbeddingMatrix:
    """Unit-norm rows for every non-padding token of the sequence."""
    if embedder.d_in != projection.d_in:
        raise DimensionMismatch(
            f"embedder d_in={embedder.d_in} != projection d_in={projection.d_in}"
        )
    raw = embedder.embed_ids(seq.ids[: seq.real_length])
    projected = raw @ projection.weights
    rows = _normalize_rows(projected).astype(np.float32)
    return EmbeddingMatrix(rows=rows, is_query=is_query)


# -- loss and gradient ---------------------------------------------------------


def _maxsim_f64(q_rows: np.ndarray, d_rows: np.ndarray) -> float:
    """Float64 late-interaction score; zero rows excluded from maxima."""
    q = np.asarray(q_rows, dtype=np.float64)
    d = np.asarray(d_rows, dtype=np.float64)
    d = d[np.linalg.norm(d, axis=1) > 0]
    if d.shape[0] == 0:
        return float("-inf")
    sims = q @ d.T
    return float(sims.max(axis=1).sum())


def triplet_loss(
    q: EmbeddingMatrix, pos: EmbeddingMatrix, neg: EmbeddingMatrix, margin: float
) -> float:
    s_pos = _maxsim_f64(q.rows, pos.rows)
    s_neg = _maxsim_f64(q.rows, neg.rows)
    return max(0.0, margin - s_pos + s_neg)


def _pair_score_and_grad(q_raw: np.ndarray, d_raw: np.ndarray, w: np.ndarray):
    """Late-interaction score of a (query, doc) raw-matrix pair and d(score)/dW."""
    yq = q_raw @ w
    yd = d_raw @ w
    nq = np.linalg.norm(yq, axis=1)
    nd = np.linalg.norm(yd, axis=1)
    uq = yq / np.where(nq > 0, nq, 1.0)[:, None]
    ud = yd / np.where(nd > 0, nd, 1.0)[:, None]
    valid_d = nd > 0
    if not valid_d.any():
        # unscorable document: -inf score, flat gradient; training aborts
        # with NonFiniteLoss when this reaches a batch
        return float("-inf"), np.zeros_like(w)
    sims = uq @ ud.T
    sims[:, ~valid_d] = -np.inf
    picks = np.argmax(sims, axis=1)  # ties resolve to the lowest index

    grad = np.zeros_like(w)
    score = 0.0
    qi = np.nonzero(nq > 0)[0]
    if qi.size:
        j = picks[qi]
        s = sims[qi, j]
        score = float(s.sum())
        u = uq[qi]
        v = ud[j]
        gq = (v - s[:, None] * u) / nq[qi, None]
        gd = (u - s[:, None] * v) / nd[j, None]
        grad += q_raw[qi].T @ gq
        grad += d_raw[j].T @ gd
    return score, grad


def gradient_of_loss(
    q_raw: np.ndarray,
    pos_raw: np.ndarray,
    neg_raw: np.ndarray,
    projection: LinearProjection,
    margin: float,
) -> np.ndarray:
    """Analytic d(triplet loss)/dW at the projection's current weights.

    Inputs are raw (pre-projection) matrices. In the flat region of the
    hinge the gradient is exactly zero.
    """
    w = projection.weights
    s_pos, g_pos = _pair_score_and_grad(q_raw, pos_raw, w)
    s_neg, g_neg = _pair_score_and_grad(q_raw, neg_raw, w)
    if margin - s_pos + s_neg <= 0.0:
        return np.zeros_like(w)
    return g_neg - g_pos


def loss_from_raw(
    q_raw: np.ndarray,
    pos_raw: np.ndarray,
    neg_raw: np.ndarray,
    projection: LinearProjection,
    margin: float,
) -> float:
    """Triplet loss computed from raw matrices; the target of gradient_of_loss."""
    w = projection.weights
    s_pos, _ = _pair_score_and_grad(q_raw, pos_raw, w)
    s_neg, _ = _pair_score_and_grad(q_raw, neg_raw, w)
    return max(0.0, margin - s_pos + s_neg)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    projection: LinearProjection
    epoch_losses: list[float]  # mean loss over all triplets: init, then per epoch


def train_projection(
    triplets: Sequence[Triplet],
    query_seqs: Mapping[str, EncodedSequence],
    doc_seqs: Mapping[str, EncodedSequence],
    embedder: TokenEmbedder,
    cfg: TripletTrainConfig,
    d_out: int = 128,
) -> TrainResult:
    """Mini-batch SGD on the mean triplet loss; returns the trained projection."""
    if not triplets:
        raise ValueError("at least one triplet is required")

    d_in = embedder.d_in
    raw_q: dict[str, np.ndarray] = {}
    raw_d: dict[str, np.ndarray] = {}
    for t in triplets:
        if t.bug_id not in raw_q:
            seq = query_seqs[t.bug_id]
            raw_q[t.bug_id] = embedder.embed_ids(seq.ids[: seq.real_length])
        for doc_id in (t.positive_doc, t.negative_doc):
            if doc_id not in raw_d:
                seq = doc_seqs[doc_id]
                raw_d[doc_id] = embedder.embed_ids(seq.ids[: seq.real_length])

    rng = np.random.default_rng(cfg.seed)
    projection = LinearProjection.seeded_init(d_in, d_out, cfg.seed)

    def mean_loss(w: np.ndarray) -> float:
        proj = LinearProjection(w)
        total = 0.0
        for t in triplets:
            total += loss_from_raw(
                raw_q[t.bug_id], raw_d[t.positive_doc], raw_d[t.negative_doc], proj, cfg.margin
            )
        return total / len(triplets)

    w = projection.weights
    losses = [mean_loss(w)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad = np.zeros_like(w)
            batch_loss = 0.0
            proj = LinearProjection(w)
            for idx in batch:
                t = triplets[idx]
                a, p, ng = raw_q[t.bug_id], raw_d[t.positive_doc], raw_d[t.negative_doc]
                batch_loss += loss_from_raw(a, p, ng, proj, cfg.margin)
                grad += gradient_of_loss(a, p, ng, proj, cfg.margin)
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {start}"
                )
            w = w - cfg.learning_rate * (grad / len(batch))
        losses.append(mean_loss(w))
    return TrainResult(projection=LinearProjection(w), epoch_losses=losses)
