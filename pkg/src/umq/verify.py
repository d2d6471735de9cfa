"""Composite-loss gradient verification on a tiny internal batch.

Builds the full model in float64 on a small synthetic batch, evaluates
every named loss component, and compares analytic gradients over all
parameters against central finite differences (one shared sweep).
Coordinates whose branch signature flips under perturbation sit on a
kink and are skipped, not failed.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import UMQConfig
from .dataio import SyntheticSpec, generate_synthetic
from .gradcheck import GradCheckReport, grad_check_components
from .model import UMQModel
from . import tensor as T

# group-level names exposed to the CLI; each maps to a prefix of the
# model's named loss tensors
COMPONENT_GROUPS = {
    "loss_task": ("task",),
    "loss_orthogonality": ("de_orth.",),
    "loss_mutual_info": ("de_mi.",),
    "loss_center": ("de_center.",),
    "loss_reconstruction": ("de_recon.",),
    "loss_anchor": ("est_anchor.",),
    "loss_unimodal": ("est_task.",),
    "loss_corruption_rank": ("est_corrupt.",),
    "loss_rank": ("est_rank.",),
    "loss_enhancer": ("eh.",),
    "loss_balance": ("moe_balance",),
    "loss_sample_variance": ("moe_sample",),
    "loss_same_config": ("moe_same",),
}


def build_check_setup(d: int = 16, h: int = 4, k: int = 2, n_samples: int = 4,
                      seed: int = 0, config: UMQConfig | None = None):
    """(component function, named params, model, batch) in float64."""
    cfg = config or UMQConfig()
    cfg = dataclasses.replace(cfg, shared_dim=d, num_experts=h, selected_experts=k,
                              batch_size=n_samples, seed=seed)
    dims = {"a": 6, "b": 5}
    spec = SyntheticSpec(n_samples=n_samples, modality_dims=dims, latent_dim=3,
                         noise_floor=0.05)
    dataset, _ = generate_synthetic(spec, seed=seed)
    batch = dataset.batch(np.arange(n_samples))
    model = UMQModel(cfg, dims, dataset.manifest.task, dtype=np.float64)
    step_seed = seed + 101

    def components() -> dict[str, T.Tensor]:
        fwd = model.forward(batch, training=True, step_seed=step_seed)
        total, named = model.loss_tensors(fwd, batch)
        grouped: dict[str, T.Tensor] = {}
        for group, prefixes in COMPONENT_GROUPS.items():
            acc = None
            for key, tensor_ in named.items():
                if any(key == p or key.startswith(p) for p in prefixes):
                    acc = tensor_ if acc is None else acc + tensor_
            if acc is not None:
                grouped[group] = acc
        grouped["total"] = total
        return grouped

    return components, model.named_params(), model, batch


def run_composite_gradcheck(d: int = 16, h: int = 4, k: int = 2, n_samples: int = 4,
                            seed: int = 0, step: float = 1e-6,
                            component: str | None = None,
                            config: UMQConfig | None = None
                            ) -> dict[str, GradCheckReport]:
    """Per-component gradient check reports; filter with `component`."""
    components, params, _, _ = build_check_setup(d, h, k, n_samples, seed, config)
    valid = set(COMPONENT_GROUPS) | {"total"}
    if component is not None and component not in valid:
        raise ValueError(f"unknown component '{component}'; valid: {sorted(valid)}")
    reports = grad_check_components(components, params, h=step)
    if component is not None:
        reports = {component: reports[component]}
    return reports
