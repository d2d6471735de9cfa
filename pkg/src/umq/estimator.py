"""Per-modality quality estimation with rank-guided supervision.

The estimator maps a representation to a score in (0, 1). It is trained
without absolute quality labels: pure noise is anchored near 0, samples
whose auxiliary predictor loss is tiny are anchored near 1, and all
other supervision is relative, through pairwise margins over the
predictor-loss ordering and over clean/corrupted pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng, derive_seed


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * bound


@dataclass
class EstimatorParams:
    """[d -> d/2, ReLU -> 1, sigmoid]"""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor


@dataclass
class UnimodalPredictorParams:
    """Auxiliary per-modality head [d -> d/2, ReLU -> 1]."""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor


def init_estimator(d: int, seed: int, dtype=np.float32) -> EstimatorParams:
    rng = Rng(derive_seed(seed, "estimator"))
    half = max(d // 2, 1)
    return EstimatorParams(
        w1=T.parameter(_glorot(rng, d, half), dtype),
        b1=T.parameter(np.zeros((1, half)), dtype),
        w2=T.parameter(_glorot(rng, half, 1), dtype),
        b2=T.parameter(np.zeros((1, 1)), dtype),
    )


def init_predictor(d: int, seed: int, dtype=np.float32) -> UnimodalPredictorParams:
    rng = Rng(derive_seed(seed, "unimodal-predictor"))
    half = max(d // 2, 1)
    return UnimodalPredictorParams(
        w1=T.parameter(_glorot(rng, d, half), dtype),
        b1=T.parameter(np.zeros((1, half)), dtype),
        w2=T.parameter(_glorot(rng, half, 1), dtype),
        b2=T.parameter(np.zeros((1, 1)), dtype),
    )


def estimate(x: T.Tensor, params: EstimatorParams) -> T.Tensor:
    """Quality scores in (0, 1), shape [n]."""
    hidden = T.relu(x @ params.w1 + params.b1)
    logit = hidden @ params.w2 + params.b2
    return T.reshape(T.sigmoid(logit), (-1,))


def quality_level(alpha: np.ndarray, tau: float) -> np.ndarray:
    """Binary quality levels: 0 iff alpha < tau, else 1 (boundary is
    high-quality). Non-differentiable by construction."""
    levels = (np.asarray(alpha) >= tau).astype(np.int8)
    T.record_branch("quality-level", levels)
    return levels


def loss_noise_anchor(noise: T.Tensor, params: EstimatorParams) -> T.Tensor:
    """Mean squared score on pure-noise inputs; drives those scores to 0."""
    alpha = estimate(noise, params)
    return T.tmean(alpha * alpha)


def loss_high_anchor(alpha: T.Tensor, sample_losses: np.ndarray,
                     score_target: float, loss_threshold: float) -> T.Tensor:
    """Hinge max(0, score_target - alpha) over samples whose predictor
    loss is below `loss_threshold`; 0 when none qualify."""
    qualifies = np.asarray(sample_losses) < loss_threshold
    T.record_branch("high-anchor", np.packbits(qualifies))
    count = int(qualifies.sum())
    if count == 0:
        return T.Tensor(np.zeros((), dtype=alpha.dtype))
    mask = T.Tensor(qualifies.astype(alpha.dtype))
    return T.tsum(T.hinge(score_target - alpha) * mask) * (1.0 / count)


def loss_rank(alpha: T.Tensor, sample_losses: np.ndarray, margin: float,
              pairs_cap: int = 4096, cap_seed: int = 0) -> T.Tensor:
    """Pairwise order hinge: for every ordered pair with L_j < L_i, ask
    alpha_j to exceed alpha_i by `margin`. Mean over active pairs; ties
    are excluded (no defined order). Losses act as detached ordering
    keys only."""
    losses = np.asarray(sample_losses)
    n = losses.shape[0]
    active = losses.reshape(1, -1) < losses.reshape(-1, 1)  # [i, j]: L_j < L_i
    count = int(active.sum())
    if count > pairs_cap:
        keep = Rng(derive_seed(cap_seed, "rank-pairs")).uniform((n, n)) < pairs_cap / count
        active = active & keep
        count = int(active.sum())
    T.record_branch("rank-pairs", np.packbits(active.reshape(-1)))
    if count == 0:
        return T.Tensor(np.zeros((), dtype=alpha.dtype))
    a_i = T.reshape(alpha, (n, 1))
    a_j = T.reshape(alpha, (1, n))
    violations = T.hinge(a_i + margin - a_j)
    mask = T.Tensor(active.astype(alpha.dtype))
    return T.tsum(violations * mask) * (1.0 / count)


def loss_corruption_rank(alpha_clean: T.Tensor, alpha_corrupted: T.Tensor,
                         margin: float) -> T.Tensor:
    """Clean scores should exceed corrupted ones by `margin`, per sample."""
    return T.tmean(T.hinge(alpha_corrupted + margin - alpha_clean))


def predict_unimodal(x: T.Tensor, params: UnimodalPredictorParams) -> T.Tensor:
    hidden = T.relu(x @ params.w1 + params.b1)
    return T.reshape(hidden @ params.w2 + params.b2, (-1,))


def unimodal_predict_loss(x: T.Tensor, labels: np.ndarray,
                          params: UnimodalPredictorParams,
                          task: str) -> tuple[T.Tensor, T.Tensor]:
    """Per-sample predictive loss: squared error for regression, binary
    cross-entropy on the logit otherwise. Returns (prediction, loss [n])."""
    pred = predict_unimodal(x, params)
    y = T.Tensor(np.asarray(labels, dtype=pred.dtype))
    if task == "regression":
        diff = pred - y
        return pred, diff * diff
    # stable BCE with logits: softplus(z) - y*z
    softplus = T.hinge(pred) + T.log(1.0 + T.exp(-T.absolute(pred)))
    return pred, softplus - y * pred


def estimator_total(per_modality: list[dict[str, T.Tensor]]) -> T.Tensor:
    """Unweighted sum over modalities of anchor + corruption-rank +
    pair-rank + mean predictive loss."""
    total = None
    for parts in per_modality:
        for term in parts.values():
            total = term if total is None else total + term
    return total
