"""Deterministic synthetic instances with planted ground truth, plus the
brute-force and finite-difference oracles the test suite leans on.

An instance plants k near-orthogonal unit prototype directions, assigns
each one a contiguous frame span (lengths sampled uniformly above a
minimum), emits each frame as its span's prototype (linearly cross-faded
near span boundaries) plus Gaussian noise, and uses the prototypes
themselves as the query embeddings. With zero noise and zero transition
width the per-frame nearest prototype recovers the planted labels exactly,
which makes these instances an exact yardstick for any grounding method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations, permutations
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, TooLargeError
from .formats import Instance, Query, Span
from .model import AttentionPoolParams
from .numerics import Rng, l2_normalize
from .smo import SmoConfig, grad_total_loss, total_loss

# Logit magnitude at which the per-frame softmax saturates: leakage is
# ~e^-100 ~ 4e-44, far below any tolerance used here.
HARD_LOGIT = 50.0

_ACTION_VOCAB = (
    "walks forward", "waves", "sits down", "jumps", "turns around",
    "kicks", "bends over", "claps", "stretches", "crouches",
    "spins", "steps sideways",
)


@dataclass(frozen=True)
class SynthSpec:
    d: int = 16
    k: int = 3
    L: int = 60
    noise_sigma: float = 0.05
    transition_width: int = 2
    min_seg_len: int = 8
    prototype_min_angle: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.k, self.L, self.min_seg_len) < 1:
            raise ConfigError("d, k, L and min_seg_len must all be >= 1")
        if self.k * self.min_seg_len > self.L:
            raise ConfigError(
                f"k*min_seg_len = {self.k * self.min_seg_len} exceeds L = {self.L}"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0 <= self.prototype_min_angle < 180):
            raise ConfigError(
                f"prototype_min_angle must be in [0, 180), got {self.prototype_min_angle}"
            )
        if self.transition_width < 0 or self.transition_width > self.min_seg_len:
            raise ConfigError(
                "transition_width must be in [0, min_seg_len] so fades never overlap"
            )


def _sample_prototypes(spec: SynthSpec, rng: Rng) -> np.ndarray:
    max_cos = math.cos(math.radians(spec.prototype_min_angle))
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < spec.k:
        attempts += 1
        if attempts > 200 * spec.k:
            raise ConfigError(
                f"could not sample {spec.k} prototypes with pairwise angle >= "
                f"{spec.prototype_min_angle} deg in dim {spec.d}"
            )
        cand = l2_normalize(rng.normal(spec.d))
        if all(float(cand @ p) <= max_cos for p in protos):
            protos.append(cand)
    return np.vstack(protos)


def _sample_lengths(spec: SynthSpec, rng: Rng) -> list[int]:
    # uniform composition of the slack on top of the per-segment minimum
    extra = spec.L - spec.k * spec.min_seg_len
    cuts = sorted(int(c) for c in rng.integers(0, extra + 1, size=spec.k - 1))
    bounds = [0] + cuts + [extra]
    return [spec.min_seg_len + bounds[i + 1] - bounds[i] for i in range(spec.k)]


def generate_instance(spec: SynthSpec, rng: Rng, instance_id: str = "synth") -> Instance:
    """One planted instance; every random draw flows through `rng`, so the
    output is byte-identical for identical (spec, seed)."""
    protos = _sample_prototypes(spec, rng)
    lengths = _sample_lengths(spec, rng)
    names = []
    perm = rng.permutation(len(_ACTION_VOCAB))
    for j in range(spec.k):
        base = _ACTION_VOCAB[perm[j % len(_ACTION_VOCAB)]]
        names.append(base if j < len(_ACTION_VOCAB) else f"{base} ({j // len(_ACTION_VOCAB) + 1})")

    bounds = np.concatenate([[0], np.cumsum(lengths)])
    labels = np.zeros(spec.L, dtype=np.int64)
    for i in range(spec.k):
        labels[bounds[i]:bounds[i + 1]] = i

    frames = protos[labels].copy()
    w = spec.transition_width
    if w > 0:
        for i in range(spec.k - 1):
            b = int(bounds[i + 1])
            for t in range(max(0, b - w), min(spec.L, b + w)):
                # sample a linear ramp over [b - w/2, b + w/2] at the frame
                # center t + 0.5; never exactly 0.5, so argmax stays planted
                lam = (t + 0.5 - (b - w / 2.0)) / w
                if 0.0 < lam < 1.0:
                    frames[t] = (1.0 - lam) * protos[i] + lam * protos[i + 1]
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.normal((spec.L, spec.d))

    text = "a person " + ", then ".join(names)
    queries = [Query(names[i], protos[i]) for i in range(spec.k)]
    gt = [Span(i, int(bounds[i]), int(bounds[i + 1])) for i in range(spec.k)]
    return Instance(instance_id, text, frames, queries, gt)


def hardened_logits(labels: Sequence[int], k: int, magnitude: float = HARD_LOGIT) -> np.ndarray:
    """Saturated logits whose per-frame softmax is ~one-hot on `labels`."""
    L = len(labels)
    logits = np.full((k, L), -magnitude)
    for t, label in enumerate(labels):
        logits[int(label), t] = magnitude
    return logits


@dataclass(frozen=True)
class BruteForceResult:
    cuts: tuple
    assignment: tuple
    loss: float


def brute_force_best_segmentation(params: AttentionPoolParams, feats, queries,
                                  cfg: SmoConfig, order_free: bool = False) -> BruteForceResult:
    """Exhaustively search contiguous segmentations with non-empty blocks.

    Evaluates the full objective with hardened masks at every cut placement
    (and, if `order_free`, every assignment of queries to blocks) and
    returns the minimum. Guarded to k <= 3, L <= 12.
    """
    k = len(queries)
    feats = np.asarray(feats, dtype=np.float64)
    L = feats.shape[0]
    if k > 3 or L > 12:
        raise TooLargeError(f"brute force guard: k={k} > 3 or L={L} > 12")
    if k < 1 or L < k:
        raise ConfigError(f"need 1 <= k <= L for non-empty blocks, got k={k}, L={L}")
    assignments = list(permutations(range(k))) if order_free else [tuple(range(k))]
    best: Optional[BruteForceResult] = None
    for interior in combinations(range(1, L), k - 1):
        bounds = (0, *interior, L)
        for assign in assignments:
            labels = np.zeros(L, dtype=np.int64)
            for block in range(k):
                labels[bounds[block]:bounds[block + 1]] = assign[block]
            loss = total_loss(params, hardened_logits(labels, k), feats, queries, cfg).total
            if best is None or loss < best.loss:
                best = BruteForceResult(bounds, assign, loss)
    assert best is not None  # k >= 1 always yields the single-block split
    return best


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], M: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences of `loss_fn` at `M`, coordinate by coordinate."""
    if not (1e-7 <= h <= 1e-3):
        raise ConfigError(f"step size h must lie in [1e-7, 1e-3], got {h}")
    grad = np.zeros_like(M, dtype=np.float64)
    probe = np.array(M, dtype=np.float64)
    it = np.nditer(probe, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = probe[idx]
        probe[idx] = orig + h
        hi = loss_fn(probe)
        probe[idx] = orig - h
        lo = loss_fn(probe)
        probe[idx] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericalError(f"non-finite loss at finite-difference probe {idx}")
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_error: float
    trials: int
    worst_trial: int
    worst_coord: tuple
    worst_analytic: float
    worst_numeric: float


# Coordinates whose analytic and numeric values both sit below this floor
# are compared against the floor instead of each other; central-difference
# noise (~1e-10 here) would otherwise dominate a ratio of two near-zeros.
REL_ERROR_FLOOR = 1e-5


def gradcheck(trials: int = 20, seed: int = 0, h: float = 1e-5,
              perturb: float = 0.0) -> GradcheckReport:
    """Compare analytic mask-logit gradients with central finite differences
    on random instances (k in 1..3, L in 4..16, d in 3..8).

    `perturb` adds a constant to the analytic gradient, as a negative
    control for the CLI exit-code contract.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = Rng(seed)
    cfg = SmoConfig()
    worst = (0.0, -1, (0, 0), 0.0, 0.0)
    for trial in range(trials):
        k = int(rng.integers(1, 4))
        L = int(rng.integers(4, 17))
        d = int(rng.integers(3, 9))
        params = AttentionPoolParams(
            np.eye(d) + 0.5 * rng.normal((d, d)),
            np.eye(d) + 0.5 * rng.normal((d, d)),
            0.5 * rng.normal(d),
        )
        feats = rng.normal((L, d))
        queries = [l2_normalize(rng.normal(d)) for _ in range(k)]
        logits = 0.5 * rng.normal((k, L))

        analytic = grad_total_loss(params, logits, feats, queries, cfg) + perturb
        numeric = finite_diff_grad(
            lambda M: total_loss(params, M, feats, queries, cfg).total, logits, h
        )
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERROR_FLOOR)
        rel = np.abs(analytic - numeric) / denom
        coord = np.unravel_index(int(np.argmax(rel)), rel.shape)
        if rel[coord] > worst[0]:
            worst = (float(rel[coord]), trial, tuple(int(c) for c in coord),
                     float(analytic[coord]), float(numeric[coord]))
    return GradcheckReport(worst[0], trials, worst[1], worst[2], worst[3], worst[4])
