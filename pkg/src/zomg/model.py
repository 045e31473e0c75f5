"""Attention pooling of per-frame motion features, plus the contrastive
pretraining loop that produces the (frozen) pooling weights.

The pooling module scores each frame by a learned query against its
key-projected feature, softmax-normalizes the scores into attention
weights, averages the value-projected frames under those weights, and
L2-normalizes the result into a unit motion embedding. Pretraining fits
the two projections and the query on (frames, text-embedding) pairs with
an in-batch contrastive objective: each motion embedding is pulled toward
its own text embedding and pushed away from the other texts in the batch.

All gradients here are analytic and checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegeneratePoolingError,
    OptimizationDivergedError,
    ShapeError,
)
from .numerics import NORM_EPS, Rng, as_matrix, as_vector, l2_normalize, logsumexp, softmax
from .optim import Adam

# Std of the Gaussian jitter added to the identity/zero initialization so
# pretraining does not start at a perfectly symmetric stationary point.
INIT_JITTER = 0.01


@dataclass(frozen=True)
class AttentionPoolParams:
    """Frozen pooling weights: key/value projections and the score query.

    Arrays are copied on construction and marked read-only, so a params
    object can be shared across threads and is guaranteed untouched by any
    downstream per-instance optimization.
    """

    wk: np.ndarray
    wv: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        wk = as_matrix(self.wk, "wk").copy()
        wv = as_matrix(self.wv, "wv").copy()
        q = as_vector(self.q, "q").copy()
        d = q.shape[0]
        if wk.shape != (d, d) or wv.shape != (d, d):
            raise ShapeError(
                f"pooling weights must be ({d},{d}) matrices with a ({d},) query, "
                f"got wk {wk.shape}, wv {wv.shape}"
            )
        for arr in (wk, wv, q):
            arr.flags.writeable = False
        object.__setattr__(self, "wk", wk)
        object.__setattr__(self, "wv", wv)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return self.q.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 0.1
    steps: int = 300
    lr: float = 1e-2
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")


def _pool_forward(wk: np.ndarray, wv: np.ndarray, q: np.ndarray, feats: np.ndarray):
    """One pooling pass; returns the unit embedding plus intermediates."""
    d = feats.shape[1]
    scale = 1.0 / math.sqrt(d)
    keyed = feats @ wk.T                      # rows: key-projected frames
    scores = scale * (keyed @ q)
    attn = softmax(scores)
    fbar = attn @ feats                       # attention-weighted frame mean
    pooled = wv @ fbar
    norm = float(np.linalg.norm(pooled))
    if norm <= NORM_EPS:
        raise DegeneratePoolingError(
            f"pooled vector collapsed to norm {norm:.3e}; features may be all-zero"
        )
    return pooled / norm, keyed, attn, fbar, pooled, norm, scale


def attention_pool(params: AttentionPoolParams, feats) -> np.ndarray:
    """Pool an (L, d) frame-feature matrix into a unit motion embedding.

    With a zero query the attention is uniform and the result is the
    normalized value-projected frame mean; with a single frame it is just
    that frame, value-projected and normalized.
    """
    f = as_matrix(feats, "frame features")
    if f.shape[1] != params.d:
        raise ShapeError(f"feature dim {f.shape[1]} != params dim {params.d}")
    emb, *_ = _pool_forward(params.wk, params.wv, params.q, f)
    return emb


def sequence_contrastive_loss(m, pos, negs: Sequence, tau: float) -> float:
    """Contrastive alignment of one motion embedding against candidate texts.

    -log of the softmax probability (at temperature `tau`) assigned to the
    positive text among {positive} + negatives, using cosine similarity on
    unit embeddings. Zero when there are no negatives.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    mv = as_vector(m, "motion embedding")
    cands = [as_vector(pos, "positive text")] + [as_vector(t, "negative text") for t in negs]
    for c in cands:
        if c.shape != mv.shape:
            raise ShapeError(f"embedding dim mismatch: {c.shape} vs {mv.shape}")
    sims = np.array([float(mv @ c) for c in cands]) / tau
    return logsumexp(sims) - float(sims[0])


def grad_pretrain_params(wk, wv, q, feats_list: Sequence[np.ndarray],
                         texts: np.ndarray, tau: float):
    """Mean contrastive loss over pairs and its gradients w.r.t. (wk, wv, q).

    Pair i uses texts[i] as its positive and every other row of `texts` as
    an in-batch negative. Returns (loss, g_wk, g_wv, g_q).
    """
    n = len(feats_list)
    if texts.shape[0] != n:
        raise ShapeError(f"{n} feature matrices but {texts.shape[0]} texts")
    g_wk = np.zeros_like(wk)
    g_wv = np.zeros_like(wv)
    g_q = np.zeros_like(q)
    total = 0.0
    for i, feats in enumerate(feats_list):
        emb, keyed, attn, fbar, pooled, norm, scale = _pool_forward(wk, wv, q, feats)
        sims = (texts @ emb) / tau
        probs = softmax(sims)
        total += logsumexp(sims) - float(sims[i])

        coef = probs.copy()
        coef[i] -= 1.0
        coef /= tau
        g_emb = coef @ texts
        g_pooled = (g_emb - float(emb @ g_emb) * emb) / norm
        g_wv += np.outer(g_pooled, fbar)
        # back through the attention weights: scores enter via a softmax
        valued = feats @ wv.T
        b = valued @ g_pooled
        ds = attn * (b - float(attn @ b))
        g_q += scale * (keyed.T @ ds)
        g_wk += scale * np.outer(q, ds @ feats)
    return total / n, g_wk / n, g_wv / n, g_q / n


def pretrain_batch_loss(wk, wv, q, feats_list: Sequence[np.ndarray],
                        texts: np.ndarray, tau: float) -> float:
    """Loss-only companion of grad_pretrain_params (finite-difference probes)."""
    total = 0.0
    for i, feats in enumerate(feats_list):
        emb, *_ = _pool_forward(wk, wv, q, feats)
        sims = (texts @ emb) / tau
        total += logsumexp(sims) - float(sims[i])
    return total / len(feats_list)


def pretrain(pairs: Sequence[tuple], cfg: PretrainConfig):
    """Fit pooling weights on (frames, text_embedding) pairs.

    Starts from identity projections and a zero query plus seeded jitter,
    then runs Adam on the in-batch contrastive objective. The input pairs
    are never mutated and the run is fully deterministic per seed.

    Returns (AttentionPoolParams, per-step loss trace).
    """
    if len(pairs) < 2:
        raise ConfigError(f"pretraining needs at least 2 pairs, got {len(pairs)}")
    feats_list = [as_matrix(f, f"pair {i} frames") for i, (f, _) in enumerate(pairs)]
    texts = np.vstack([as_vector(t, f"pair {i} text") for i, (_, t) in enumerate(pairs)])
    d = texts.shape[1]
    for i, f in enumerate(feats_list):
        if f.shape[1] != d:
            raise ShapeError(f"pair {i} has feature dim {f.shape[1]}, expected {d}")

    rng = Rng(cfg.seed)
    wk = np.eye(d) + INIT_JITTER * rng.normal((d, d))
    wv = np.eye(d) + INIT_JITTER * rng.normal((d, d))
    q = INIT_JITTER * rng.normal(d)

    n = len(pairs)
    batch = min(cfg.batch, n)
    adam = Adam([wk.shape, wv.shape, q.shape], lr=cfg.lr)
    trace: list[float] = []
    for step in range(cfg.steps):
        idx = rng.permutation(n)[:batch]
        loss, g_wk, g_wv, g_q = grad_pretrain_params(
            wk, wv, q, [feats_list[j] for j in idx], texts[idx], cfg.tau
        )
        if not math.isfinite(loss):
            raise OptimizationDivergedError(f"non-finite pretraining loss at step {step}")
        trace.append(loss)
        adam.step([wk, wv, q], [g_wk, g_wv, g_q])
    return AttentionPoolParams(wk, wv, q), trace


def retrieval_at_1(params: AttentionPoolParams, feats_list: Sequence[np.ndarray],
                   texts: np.ndarray) -> float:
    """Fraction of motions whose own text is their nearest text by cosine."""
    hits = 0
    for i, feats in enumerate(feats_list):
        emb = attention_pool(params, feats)
        sims = texts @ emb
        hits += int(np.argmax(sims) == i)
    return hits / len(feats_list)


def motion_text_similarity(params: AttentionPoolParams, feats, text_embedding) -> float:
    """Cosine between the pooled embedding of `feats` and a text embedding."""
    emb = attention_pool(params, feats)
    return float(emb @ l2_normalize(text_embedding))
