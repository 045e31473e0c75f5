"""Scikit-learn style wrappers around the pooling pretrainer and the
per-instance mask optimizer, so the pipeline composes with the wider
ecosystem (clone, get_params/set_params, Pipeline).

`AttentionPoolEmbedder` is transform-shaped: fit on (frame-matrix list,
text-embedding array) pairs, transform frame-matrix lists into unit motion
embeddings. `SoftMaskGrounder` is predict-shaped: fit pretrains (or adopts)
pooling weights, predict grounds a list of instances into segments, and
score reports mAP against the instances' ground truth.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EvalInputError, ShapeError
from .formats import Instance
from .metrics import DEFAULT_THRESHOLDS, GtSegment, ScoredSegment, mean_ap
from .model import AttentionPoolParams, PretrainConfig, attention_pool, pretrain
from .numerics import as_matrix, l2_normalize
from .smo import GroundingResult, SmoConfig, optimize_masks


def _feature_list(X) -> list[np.ndarray]:
    feats = [as_matrix(f, f"X[{i}]") for i, f in enumerate(X)]
    dims = {f.shape[1] for f in feats}
    if len(dims) > 1:
        raise ShapeError(f"inconsistent feature dims across sequences: {sorted(dims)}")
    return feats


class AttentionPoolEmbedder(TransformerMixin, BaseEstimator):
    """Learned attention pooling of variable-length frame-feature sequences.

    fit(X, y): X is a list of (L_i, d) arrays, y an (n, d) array of unit
    text embeddings paired row-for-row with X. transform(X) returns an
    (n, d) array of unit motion embeddings.
    """

    def __init__(self, tau: float = 0.1, steps: int = 300, lr: float = 1e-2,
                 batch: int = 32, seed: int = 0):
        self.tau = tau
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.seed = seed

    def fit(self, X, y):
        feats = _feature_list(X)
        texts = as_matrix(y, "y")
        if texts.shape[0] != len(feats):
            raise ShapeError(f"{len(feats)} sequences but {texts.shape[0]} text embeddings")
        cfg = PretrainConfig(tau=self.tau, steps=self.steps, lr=self.lr,
                             batch=self.batch, seed=self.seed)
        self.params_, self.loss_trace_ = pretrain(list(zip(feats, texts)), cfg)
        self.n_features_in_ = feats[0].shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        return np.vstack([attention_pool(self.params_, f) for f in _feature_list(X)])


class SoftMaskGrounder(BaseEstimator):
    """Ground instances by optimizing per-frame soft masks at test time.

    fit(X): pretrains pooling weights on the instances' frames paired with
    the normalized mean of their query embeddings (or pass y as explicit
    text embeddings; or construct with `weights` to skip fitting entirely).
    predict(X) returns one GroundingResult per instance; score(X) is the
    mAP of the predicted primary segments against the instances' GT spans.
    """

    def __init__(self, alpha: float = 1.0, beta: float = 0.005, gamma: float = 100.0,
                 tau: float = 0.1, steps: int = 100, lr: float = 0.1,
                 init_jitter: float = 0.01, seed: int = 0,
                 pretrain_steps: int = 300, pretrain_lr: float = 1e-2,
                 pretrain_batch: int = 32,
                 weights: Optional[AttentionPoolParams] = None):
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tau = tau
        self.steps = steps
        self.lr = lr
        self.init_jitter = init_jitter
        self.seed = seed
        self.pretrain_steps = pretrain_steps
        self.pretrain_lr = pretrain_lr
        self.pretrain_batch = pretrain_batch
        self.weights = weights

    def _smo_config(self) -> SmoConfig:
        return SmoConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                         tau=self.tau, steps=self.steps, lr=self.lr,
                         init_jitter=self.init_jitter, seed=self.seed)

    def fit(self, X: Sequence[Instance], y=None):
        if self.weights is not None:
            self.params_ = self.weights
            return self
        feats = [inst.frames for inst in X]
        if y is not None:
            texts = as_matrix(y, "y")
        else:
            texts = np.vstack([
                l2_normalize(np.mean([q.embedding for q in inst.queries], axis=0))
                for inst in X
            ])
        cfg = PretrainConfig(tau=self.tau, steps=self.pretrain_steps,
                             lr=self.pretrain_lr, batch=self.pretrain_batch,
                             seed=self.seed)
        self.params_, self.pretrain_trace_ = pretrain(list(zip(feats, texts)), cfg)
        return self

    def predict(self, X: Sequence[Instance]) -> list[GroundingResult]:
        check_is_fitted(self)
        cfg = self._smo_config()
        return [
            optimize_masks(self.params_, inst.frames,
                           [q.embedding for q in inst.queries], cfg)
            for inst in X
        ]

    def score(self, X: Sequence[Instance], y=None,
              thresholds=DEFAULT_THRESHOLDS) -> float:
        results = self.predict(X)
        preds, gts = [], []
        for inst, res in zip(X, results):
            if not inst.gt_segments:
                raise EvalInputError(f"instance {inst.id!r} has no ground-truth spans")
            gts.extend(GtSegment(inst.id, s.query_idx, s.start, s.end)
                       for s in inst.gt_segments)
            preds.extend(ScoredSegment(inst.id, s.query_idx, s.start, s.end, s.confidence)
                         for s in res.segments)
        return mean_ap(preds, gts, thresholds).map_mean
