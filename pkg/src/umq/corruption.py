"""Data degradation: noise mixing, the AddNoise training augmentation,
missing-modality masking, and out-of-distribution noise presets.

Every operation is a pure function of (input, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .dataio import FeatureBatch
from .rng import Rng, derive_seed
from .tensor import ContractError


class NoiseKind(Enum):
    GAUSSIAN = "gaussian"  # mean 0, var 1
    LAPLACE = "laplace"  # loc 0, scale 1
    RANDOM_ERASE = "erase"  # zero out a fraction of entries


NOISE_PRESETS = ("gaussian", "laplace", "erase", "ood-mix", "slot-replace")


@dataclass
class CorruptionPlan:
    """Dataset-level degradation settings for a run."""

    missing_rate: float = 0.0
    noise_rate: float = 0.0
    noise_preset: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ContractError(f"missing_rate must be in [0, 1], got {self.missing_rate}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ContractError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if self.noise_preset not in NOISE_PRESETS:
            raise ContractError(
                f"noise_preset must be one of {NOISE_PRESETS}, got '{self.noise_preset}'")

    @property
    def active(self) -> bool:
        return self.missing_rate > 0.0 or self.noise_rate > 0.0


@lru_cache(maxsize=128)
def _noise_draw_cached(shape: tuple[int, ...], kind: NoiseKind, seed: int) -> np.ndarray:
    rng = Rng(seed)
    out = rng.normal(shape) if kind is NoiseKind.GAUSSIAN else rng.laplace(shape)
    out.setflags(write=False)
    return out


def noise_draw(shape: tuple[int, ...], kind: NoiseKind, seed: int) -> np.ndarray:
    """The exact noise sample `mix_noise` consumes for this seed."""
    if kind is NoiseKind.RANDOM_ERASE:
        raise ContractError(f"no dense noise draw for kind {kind}")
    return _noise_draw_cached(tuple(shape), kind, seed).copy()


def mix_noise(x: np.ndarray, nr: float, kind: NoiseKind, seed: int) -> np.ndarray:
    """Blend `x` with unit noise at rate `nr`, or zero a fraction `nr` of
    entries for the erase kind."""
    if not 0.0 <= nr <= 1.0:
        raise ContractError(f"noise rate must be in [0, 1], got {nr}")
    x = np.asarray(x)
    if kind is NoiseKind.RANDOM_ERASE:
        keep = ~Rng(seed).bernoulli(nr, x.shape)
        return (x * keep).astype(x.dtype)
    noise = noise_draw(x.shape, kind, seed)
    return ((1.0 - nr) * x + nr * noise).astype(x.dtype)


def ood_mix(x: np.ndarray, nr: float, seed: int) -> np.ndarray:
    """Per sample, 50/50: blend with Laplace noise or randomly erase."""
    x = np.asarray(x)
    use_laplace = Rng(derive_seed(seed, "choice")).bernoulli(0.5, x.shape[0])
    laplace = mix_noise(x, nr, NoiseKind.LAPLACE, derive_seed(seed, "laplace"))
    erased = mix_noise(x, nr, NoiseKind.RANDOM_ERASE, derive_seed(seed, "erase"))
    pick = use_laplace.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(pick, laplace, erased).astype(x.dtype)


def slot_replace(x: np.ndarray, rate: float, seed: int) -> np.ndarray:
    """With probability `rate`, replace a whole row by unit Gaussian noise
    (the severest corruption: the representation carries no signal)."""
    x = np.asarray(x)
    replaced = Rng(derive_seed(seed, "choice")).bernoulli(rate, x.shape[0])
    noise = noise_draw(x.shape, NoiseKind.GAUSSIAN, derive_seed(seed, "fill"))
    pick = replaced.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(pick, noise, x).astype(x.dtype)


def apply_noise_preset(x: np.ndarray, nr: float, preset: str, seed: int) -> np.ndarray:
    if preset == "gaussian":
        return mix_noise(x, nr, NoiseKind.GAUSSIAN, seed)
    if preset == "laplace":
        return mix_noise(x, nr, NoiseKind.LAPLACE, seed)
    if preset == "erase":
        return mix_noise(x, nr, NoiseKind.RANDOM_ERASE, seed)
    if preset == "ood-mix":
        return ood_mix(x, nr, seed)
    if preset == "slot-replace":
        return slot_replace(x, nr, seed)
    raise ContractError(f"unknown noise preset '{preset}'")


@dataclass
class AddNoiseResult:
    corrupted: np.ndarray
    nr_rows: np.ndarray  # realized per-row mixing rate (1.0 = replaced)
    noise_seed: int  # seed of the Gaussian draw actually mixed in


def add_noise_augment(x: np.ndarray, seed: int, replace_prob: float = 0.1,
                      nr_low: float = 0.1, nr_high: float = 0.7) -> AddNoiseResult:
    """Training augmentation: each row is mixed with Gaussian noise at a
    uniformly drawn rate, or fully replaced by noise with probability
    `replace_prob` (the severest case)."""
    x = np.asarray(x)
    n = x.shape[0]
    replace = Rng(derive_seed(seed, "replace")).bernoulli(replace_prob, n)
    nr_rows = nr_low + (nr_high - nr_low) * Rng(derive_seed(seed, "rate")).uniform(n)
    nr_rows[replace] = 1.0
    noise_seed = derive_seed(seed, "noise")
    noise = noise_draw(x.shape, NoiseKind.GAUSSIAN, noise_seed)
    nr_col = nr_rows.reshape((-1,) + (1,) * (x.ndim - 1))
    corrupted = ((1.0 - nr_col) * x + nr_col * noise).astype(x.dtype)
    return AddNoiseResult(corrupted, nr_rows, noise_seed)


def missing_rate(mask: np.ndarray) -> float:
    """1 - sum(M_i) / (N * |M|) for a boolean availability mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ContractError("missing_rate of an empty mask is undefined")
    return 1.0 - mask.sum() / mask.size


def expected_realized_missing_rate(mr: float, n_modalities: int) -> float:
    """Nominal rate corrected for the keep-one repair step's bias."""
    return mr - mr ** n_modalities / n_modalities


def apply_missing(batch: FeatureBatch, mr: float, seed: int) -> FeatureBatch:
    """Mask each (sample, modality) off with probability `mr`, re-enable one
    uniformly chosen modality for fully masked samples, and substitute
    masked features with standard Gaussian draws."""
    if not 0.0 <= mr <= 1.0:
        raise ContractError(f"missing rate must be in [0, 1], got {mr}")
    out = batch.copy()
    if mr == 0.0:
        return out
    n = batch.size
    names = batch.modality_names
    n_mod = len(names)
    dropped = Rng(derive_seed(seed, "mask")).bernoulli(mr, (n, n_mod))
    repair = Rng(derive_seed(seed, "repair")).integers_below(n_mod, n)
    mask = ~dropped
    empty = ~mask.any(axis=1)
    mask[np.nonzero(empty)[0], repair[empty]] = True
    out.mask = mask
    for col, name in enumerate(names):
        feats = out.features[name]
        fill = Rng(derive_seed(seed, "fill", name)).normal(feats.shape).astype(feats.dtype)
        gone = ~mask[:, col]
        feats[gone] = fill[gone]
    return out
