"""Splitting each modality representation into a sample-specific part and
a sample-shared (modality-specific) part, the four losses that shape the
split, and the running modality baseline (EMA + trainable bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng, derive_seed


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform((fan_in, fan_out)) * 2.0 - 1.0) * bound


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return x @ w + b


@dataclass
class DecoupleParams:
    """Shared hidden layer [d -> 2d, ReLU], then one head per part."""

    hidden_w: T.Tensor
    hidden_b: T.Tensor
    sample_w: T.Tensor
    sample_b: T.Tensor
    shared_w: T.Tensor
    shared_b: T.Tensor


@dataclass
class CoupleParams:
    """Reassembly net: concat [2d] -> hidden [2d, ReLU] -> d."""

    hidden_w: T.Tensor
    hidden_b: T.Tensor
    out_w: T.Tensor
    out_b: T.Tensor


@dataclass
class ModalityState:
    """Per-modality baseline buffer and its trainable bias.

    `baseline` never carries gradient; `bias` does. The EMA update runs
    once per training batch and never at evaluation.
    """

    baseline: np.ndarray  # [1 x d], non-differentiable buffer
    bias: T.Tensor  # [1 x d] trainable
    ema_coeff: float = 0.9


def init_decouple(d: int, seed: int, dtype=np.float32) -> DecoupleParams:
    rng = Rng(derive_seed(seed, "decouple"))
    return DecoupleParams(
        hidden_w=T.parameter(_glorot(rng, d, 2 * d), dtype),
        hidden_b=T.parameter(np.zeros((1, 2 * d)), dtype),
        sample_w=T.parameter(_glorot(rng, 2 * d, d), dtype),
        sample_b=T.parameter(np.zeros((1, d)), dtype),
        shared_w=T.parameter(_glorot(rng, 2 * d, d), dtype),
        shared_b=T.parameter(np.zeros((1, d)), dtype),
    )


def init_couple(d: int, seed: int, dtype=np.float32) -> CoupleParams:
    rng = Rng(derive_seed(seed, "couple"))
    return CoupleParams(
        hidden_w=T.parameter(_glorot(rng, 2 * d, 2 * d), dtype),
        hidden_b=T.parameter(np.zeros((1, 2 * d)), dtype),
        out_w=T.parameter(_glorot(rng, 2 * d, d), dtype),
        out_b=T.parameter(np.zeros((1, d)), dtype),
    )


def init_state(d: int, seed: int, ema_coeff: float, dtype=np.float32) -> ModalityState:
    rng = Rng(derive_seed(seed, "baseline-bias"))
    bias = (rng.uniform((1, d)) * 0.2 - 0.1)
    return ModalityState(baseline=np.zeros((1, d), dtype=dtype),
                         bias=T.parameter(bias, dtype), ema_coeff=ema_coeff)


def decouple(x: T.Tensor, params: DecoupleParams) -> tuple[T.Tensor, T.Tensor]:
    """[n x d] -> sample-specific and sample-shared parts, each [n x d]."""
    hidden = T.relu(_linear(x, params.hidden_w, params.hidden_b))
    x_s = _linear(hidden, params.sample_w, params.sample_b)
    x_c = _linear(hidden, params.shared_w, params.shared_b)
    return x_s, x_c


def couple(x_s: T.Tensor, x_c: T.Tensor, params: CoupleParams) -> T.Tensor:
    joined = T.concat([x_s, x_c], axis=-1)
    hidden = T.relu(_linear(joined, params.hidden_w, params.hidden_b))
    return _linear(hidden, params.out_w, params.out_b)


def loss_orthogonality(x_s: T.Tensor, x_c: T.Tensor) -> T.Tensor:
    """Batch mean of |<x_s, x_c>| after row L2-normalization; in [0, 1]."""
    ns = T.normalize_rows(x_s)
    nc = T.normalize_rows(x_c)
    dots = T.tsum(ns * nc, axis=-1)
    return T.tmean(T.absolute(dots))


def loss_mutual_info(x: T.Tensor, x_s: T.Tensor, x_c: T.Tensor, slack: float) -> T.Tensor:
    """Hinged squared distances keep both parts within `slack` of x."""
    to_shared = T.hinge(T.sq_dist_rows(x, x_c) - slack)
    to_sample = T.hinge(T.sq_dist_rows(x, x_s) - slack)
    return T.tmean(to_shared + to_sample)


def loss_center(x_c: T.Tensor) -> T.Tensor:
    """Mean squared distance of shared parts to their batch mean."""
    center = T.tmean(x_c, axis=0, keepdims=True)
    return T.tmean(T.sq_dist_rows(x_c, T.broadcast_rows(center, x_c.shape[0])))


def loss_reconstruction(x: T.Tensor, x_recon: T.Tensor, squared: bool = False) -> T.Tensor:
    """Batch mean of per-sample L2 reconstruction error (unsquared by
    default, matching the norm notation; `squared` is a config switch)."""
    if squared:
        return T.tmean(T.sq_dist_rows(x, x_recon))
    return T.tmean(T.l2norm_rows(x - x_recon))


def decouple_total(per_modality: list[T.Tensor]) -> T.Tensor:
    """Unweighted sum of the per-modality 4-term sums."""
    total = per_modality[0]
    for term in per_modality[1:]:
        total = total + term
    return total


def baseline_update(state: ModalityState, x_c: T.Tensor) -> tuple[T.Tensor, np.ndarray]:
    """One EMA step of the modality baseline.

    Returns the baseline tensor the enhancer consumes this step (gradient
    flows only through the 0.5 * bias term; the EMA half uses detached
    shared parts) and the numpy value to commit to the buffer afterward.
    """
    lam = state.ema_coeff
    batch_mean = T.tmean(T.detach(x_c), axis=0, keepdims=True)
    ema_half = 0.5 * (lam * T.Tensor(state.baseline.astype(batch_mean.dtype)) +
                      (1.0 - lam) * batch_mean)
    x_b = ema_half + 0.5 * state.bias
    new_buffer = x_b.data.copy()
    return x_b, new_buffer


def baseline_read(state: ModalityState, dtype=None) -> T.Tensor:
    """The stored baseline, as a constant (evaluation path)."""
    data = state.baseline if dtype is None else state.baseline.astype(dtype)
    return T.Tensor(data.copy())
