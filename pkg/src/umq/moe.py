"""Quality-aware mixture of experts.

A scaled linear gate scores every expert per sample; the top-k experts
are mixed with a softmax over the selected logits only. Three routing
losses shape the gate: batch-level balance, per-sample logit variance,
and agreement between samples that share a modality-quality
configuration.
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
class ExpertParams:
    """[d -> d, ReLU -> d]"""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor


@dataclass
class MoEParams:
    gate_w: T.Tensor  # [h x d]
    experts: list[ExpertParams]
    k: int

    @property
    def h(self) -> int:
        return len(self.experts)


@dataclass
class GateRecord:
    """Per-sample routing audit entry."""

    logits: np.ndarray  # [h]
    indices: list[int]  # k selected, descending logit, ties by index
    weights: np.ndarray  # [k] softmax over the selected logits


def init_expert(d: int, seed: int, dtype=np.float32) -> ExpertParams:
    rng = Rng(seed)
    return ExpertParams(
        w1=T.parameter(_glorot(rng, d, d), dtype),
        b1=T.parameter(np.zeros((1, d)), dtype),
        w2=T.parameter(_glorot(rng, d, d), dtype),
        b2=T.parameter(np.zeros((1, d)), dtype),
    )


def init_moe(d: int, h: int, k: int, seed: int, dtype=np.float32) -> MoEParams:
    if not (h >= 2 and 1 <= k <= h):
        raise T.ContractError(f"need h >= 2 and 1 <= k <= h, got h={h} k={k}")
    rng = Rng(derive_seed(seed, "gate"))
    experts = [init_expert(d, derive_seed(seed, "expert", j), dtype) for j in range(h)]
    return MoEParams(gate_w=T.parameter(_glorot(rng, h, d), dtype), experts=experts, k=k)


def gate(x: T.Tensor, gate_w: T.Tensor) -> T.Tensor:
    """Expert logits [n x h], scaled by 1/sqrt(d)."""
    d = x.shape[-1]
    return (x @ T.transpose(gate_w)) * (1.0 / np.sqrt(d))


def top_k_select(logits_row: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k largest logits and their indices, descending; ties broken by
    ascending index."""
    row = np.asarray(logits_row)
    if k > row.shape[0]:
        raise T.ContractError(f"k={k} exceeds expert count {row.shape[0]}")
    order = np.lexsort((np.arange(row.shape[0]), -row))
    idx = order[:k]
    return row[idx], idx


def selection_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean [n x h] top-k mask, recorded as a routing branch."""
    n, h = logits.shape
    mask = np.zeros((n, h), dtype=bool)
    for i in range(n):
        _, idx = top_k_select(logits[i], k)
        mask[i, idx] = True
    T.record_branch("top-k", np.packbits(mask.reshape(-1)))
    return mask


def expert_forward(x: T.Tensor, params: ExpertParams) -> T.Tensor:
    hidden = T.relu(x @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def mix_experts(x: T.Tensor, logits: T.Tensor, mask: np.ndarray,
                params: MoEParams) -> tuple[T.Tensor, T.Tensor]:
    """Convex combination of the selected experts' outputs.

    The mixing weights are a softmax over the selected logits only;
    unselected experts receive exactly zero weight and zero gradient.
    Returns (mixed [n x d], dense weights [n x h]).
    """
    shift = np.where(mask, logits.data, -np.inf).max(axis=-1, keepdims=True)
    mask_t = T.Tensor(mask.astype(logits.dtype))
    unnorm = mask_t * T.exp(logits - T.Tensor(shift.astype(logits.dtype)))
    weights = unnorm / T.tsum(unnorm, axis=-1, keepdims=True)
    mixed = None
    for j, expert in enumerate(params.experts):
        if not mask[:, j].any():
            continue
        contribution = T.narrow(weights, j, 1) * expert_forward(x, expert)
        mixed = contribution if mixed is None else mixed + contribution
    return mixed, weights


def route(x: T.Tensor, params: MoEParams) -> tuple[T.Tensor, T.Tensor, np.ndarray]:
    """gate -> top-k -> mix; returns (mixed, logits, mask)."""
    logits = gate(x, params.gate_w)
    mask = selection_mask(logits.data, params.k)
    mixed, _ = mix_experts(x, logits, mask, params)
    return mixed, logits, mask


def gate_records(logits: np.ndarray, k: int) -> list[GateRecord]:
    records = []
    for row in np.asarray(logits):
        values, idx = top_k_select(row, k)
        shifted = np.exp(values - values.max())
        records.append(GateRecord(logits=row.copy(), indices=idx.tolist(),
                                  weights=shifted / shifted.sum()))
    return records


def loss_balance(logits: T.Tensor) -> T.Tensor:
    """Variance across experts of the batch-mean logit vector."""
    mean_logits = T.tmean(logits, axis=0)
    return T.variance(mean_logits, axis=-1)


def loss_sample_variance(logits: T.Tensor, margin: float) -> T.Tensor:
    """Hinge pushing each sample's logit variance to at least `margin`."""
    per_sample = T.variance(logits, axis=-1)
    return T.tmean(T.hinge(margin - per_sample))


def loss_same_config(logits: T.Tensor, levels: np.ndarray,
                     normalize: bool = True, pairs: str = "unordered") -> T.Tensor:
    """Squared gate-vector distance between samples sharing a full
    modality-quality configuration, summed over matched pairs; divided by
    the pair count when `normalize` (0 when no two samples match)."""
    levels = np.asarray(levels)
    n = logits.shape[0]
    same = (levels[:, None, :] == levels[None, :, :]).all(axis=-1)
    if pairs == "unordered":
        pair_mask = np.triu(same, k=1)
    elif pairs == "ordered":
        pair_mask = same & ~np.eye(n, dtype=bool)
    else:
        raise T.ContractError(f"pairs must be 'unordered' or 'ordered', got '{pairs}'")
    T.record_branch("same-config", np.packbits(pair_mask.reshape(-1)))
    count = int(pair_mask.sum())
    if count == 0:
        return T.Tensor(np.zeros((), dtype=logits.dtype))
    h = logits.shape[-1]
    a = T.reshape(logits, (n, 1, h))
    b = T.reshape(logits, (1, n, h))
    diff = a - b
    sq = T.tsum(diff * diff, axis=-1)
    total = T.tsum(sq * T.Tensor(pair_mask.astype(logits.dtype)))
    return total * (1.0 / count) if normalize else total
