"""Central finite-difference gradient checking with kink exclusion.

The checked function is re-evaluated with stop-gradient sites frozen to
their base-point values (see `tensor.detach_replay`), so finite
differences probe exactly the function the analytic gradient
differentiates. A perturbed evaluation whose branch signature (ReLU
masks, hinge/selection sets, top-k choices, pair orderings) differs
from the base run straddles a kink; that coordinate is skipped and
reported instead of failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import (Tensor, ReplayMismatch, branch_recording, detach_recording,
                     detach_replay, no_grad)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    skipped: list[tuple[str, int]] = field(default_factory=list)
    checked_coords: int = 0
    total_coords: int = 0

    def worst_param(self) -> str | None:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)


def grad_check(f: Callable[[], Tensor], params: list[tuple[str, Tensor]],
               h: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of the scalar `f()` against central
    differences over every coordinate of `params`.

    `f` must rebuild its graph from the current parameter values on each
    call and be deterministic (seeded) given those values. Relative
    error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ('{name}' is {p.data.dtype})")
        p.grad = None

    base_branches: list[bytes] = []
    with detach_recording() as detach_store:
        with branch_recording(base_branches):
            loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite at the base point")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    def eval_at() -> tuple[float, list[bytes]]:
        branches: list[bytes] = []
        with no_grad(), detach_replay(detach_store), branch_recording(branches):
            value = f()
        return float(value.data), branches

    report = GradCheckReport(max_rel_error=0.0, per_param={})
    for name, p in params:
        flat = p.data.reshape(-1)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            try:
                flat[i] = original + h
                f_plus, br_plus = eval_at()
                flat[i] = original - h
                f_minus, br_minus = eval_at()
            except ReplayMismatch:
                report.skipped.append((name, i))
                continue
            finally:
                flat[i] = original
            if br_plus != base_branches or br_minus != base_branches:
                report.skipped.append((name, i))
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(a_flat[i] - fd) / max(1.0, abs(a_flat[i]))
            worst = max(worst, rel)
            report.checked_coords += 1
        report.per_param[name] = worst
        report.total_coords += flat.size
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def grad_check_components(f: Callable[[], dict[str, Tensor]],
                          params: list[tuple[str, Tensor]],
                          h: float = 1e-6) -> dict[str, GradCheckReport]:
    """Like `grad_check` but for a function returning several named scalar
    components; one finite-difference sweep checks all of them.

    Each component's analytic gradient comes from its own backward pass
    over the shared base graph; each perturbed evaluation yields all
    component values at once.
    """
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ('{name}' is {p.data.dtype})")

    base_branches: list[bytes] = []
    with detach_recording() as detach_store:
        with branch_recording(base_branches):
            base_comps = f()
    analytic: dict[str, dict[str, np.ndarray]] = {}
    for comp_name, comp in base_comps.items():
        for _, p in params:
            p.grad = None
        comp.backward()
        analytic[comp_name] = {
            name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params}

    def eval_at() -> tuple[dict[str, float], list[bytes]]:
        branches: list[bytes] = []
        with no_grad(), detach_replay(detach_store), branch_recording(branches):
            comps = f()
        return {k: float(v.data) for k, v in comps.items()}, branches

    reports = {comp: GradCheckReport(max_rel_error=0.0, per_param={name: 0.0 for name, _ in params})
               for comp in base_comps}
    for name, p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            try:
                flat[i] = original + h
                vals_plus, br_plus = eval_at()
                flat[i] = original - h
                vals_minus, br_minus = eval_at()
            except ReplayMismatch:
                for report in reports.values():
                    report.skipped.append((name, i))
                continue
            finally:
                flat[i] = original
            if br_plus != base_branches or br_minus != base_branches:
                for report in reports.values():
                    report.skipped.append((name, i))
                continue
            for comp_name, report in reports.items():
                a = analytic[comp_name][name].reshape(-1)[i]
                fd = (vals_plus[comp_name] - vals_minus[comp_name]) / (2.0 * h)
                rel = abs(a - fd) / max(1.0, abs(a))
                report.per_param[name] = max(report.per_param[name], rel)
                report.max_rel_error = max(report.max_rel_error, rel)
                report.checked_coords += 1
        for report in reports.values():
            report.total_coords += flat.size
    return reports
