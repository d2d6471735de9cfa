"""Per-modality quality enhancement.

A learnable query attends over quality-scaled sample-specific parts from
the other modalities plus the modality baseline; the attended summary is
concatenated with the incoming representation and refined by an MLP.
Enhancement runs unconditionally at inference; the self-supervised loss
trains it to map corrupted representations back to clean ones, on
samples the estimator trusts.
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
class EnhancerParams:
    query: T.Tensor  # [1 x d]
    key_w: T.Tensor  # [d x d], shared across tokens
    value_w: T.Tensor  # [d x d]
    mlp_w1: T.Tensor  # [2d x 2d]
    mlp_b1: T.Tensor
    mlp_w2: T.Tensor  # [2d x d]
    mlp_b2: T.Tensor


def init_enhancer(d: int, seed: int, dtype=np.float32) -> EnhancerParams:
    rng = Rng(derive_seed(seed, "enhancer"))
    return EnhancerParams(
        query=T.parameter((rng.uniform((1, d)) * 2.0 - 1.0) / np.sqrt(d), dtype),
        key_w=T.parameter(_glorot(rng, d, d), dtype),
        value_w=T.parameter(_glorot(rng, d, d), dtype),
        mlp_w1=T.parameter(_glorot(rng, 2 * d, 2 * d), dtype),
        mlp_b1=T.parameter(np.zeros((1, 2 * d)), dtype),
        mlp_w2=T.parameter(_glorot(rng, 2 * d, d), dtype),
        mlp_b2=T.parameter(np.zeros((1, d)), dtype),
    )


def enhance(x: T.Tensor, cross: list[T.Tensor], baseline: T.Tensor | None,
            params: EnhancerParams) -> tuple[T.Tensor, T.Tensor | None]:
    """Enhanced representation for one modality.

    `cross` carries the other modalities' sample-specific parts, already
    scaled by their quality scores; `baseline` is this modality's [1 x d]
    baseline (None when ablated away). Returns (enhanced [n x d],
    attention weights [n x tokens] or None when no tokens exist).
    """
    n, d = x.shape
    tokens = list(cross)
    if baseline is not None:
        tokens.append(T.broadcast_rows(baseline, n))
    if tokens:
        scale = 1.0 / np.sqrt(d)
        logits = []
        for token in tokens:
            if token.shape != (n, d):
                raise T.ShapeError(f"enhance: token shape {token.shape}, expected {(n, d)}")
            keyed = token @ params.key_w
            logits.append(T.reshape(T.tsum(keyed * params.query, axis=-1) * scale, (n, 1)))
        weights = T.softmax(T.concat(logits, axis=-1))
        attended = None
        for idx, token in enumerate(tokens):
            contribution = T.narrow(weights, idx, 1) * (token @ params.value_w)
            attended = contribution if attended is None else attended + contribution
    else:
        weights = None
        attended = T.Tensor(np.zeros((n, d), dtype=x.data.dtype))
    joined = T.concat([attended, x], axis=-1)
    hidden = T.relu(joined @ params.mlp_w1 + params.mlp_b1)
    return hidden @ params.mlp_w2 + params.mlp_b2, weights


def enhancer_training_loss(clean: T.Tensor, enhanced_corrupted: T.Tensor,
                           alpha: np.ndarray, tau: float) -> T.Tensor:
    """Mean squared distance between the enhanced corrupted representation
    and the (detached) clean one, over samples with alpha > tau; 0 when
    none qualify."""
    qualifies = np.asarray(alpha) > tau
    T.record_branch("enhancer-select", np.packbits(qualifies))
    count = int(qualifies.sum())
    if count == 0:
        return T.Tensor(np.zeros((), dtype=clean.dtype))
    target = T.detach(clean)
    per_sample = T.sq_dist_rows(enhanced_corrupted, target)
    mask = T.Tensor(qualifies.astype(per_sample.dtype))
    return T.tsum(per_sample * mask) * (1.0 / count)
