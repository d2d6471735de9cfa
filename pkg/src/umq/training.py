"""Training loop, corrupted evaluation, history logging, and checkpoints.

Dataset-level corruption follows the evaluation protocols: missing
modalities are substituted at the raw-feature level before encoding;
noise mixes into the encoded representations as a constant affine map,
so gradient flow stays intact when training under corruption.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corruption as C
from . import tensor as T
from .config import UMQConfig
from .corruption import CorruptionPlan
from .dataio import Dataset, FeatureBatch
from .metrics import task_metrics
from .model import LossReport, UMQModel, PipelineNumericError
from .optim import AdamW, OptimizerError
from .rng import Rng, derive_seed


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_report: LossReport | None):
        super().__init__(message)
        self.last_report = last_report


def noise_affine(shape: tuple[int, int], nr: float, preset: str, seed: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Constant (scale, offset) so that scale*x + offset equals the noise
    protocol applied to x."""
    n, d = shape
    if preset == "gaussian":
        return (np.full(shape, 1.0 - nr),
                nr * C.noise_draw(shape, C.NoiseKind.GAUSSIAN, seed))
    if preset == "laplace":
        return (np.full(shape, 1.0 - nr),
                nr * C.noise_draw(shape, C.NoiseKind.LAPLACE, seed))
    if preset == "erase":
        keep = ~Rng(seed).bernoulli(nr, shape)
        return keep.astype(np.float64), np.zeros(shape)
    if preset == "ood-mix":
        use_laplace = Rng(derive_seed(seed, "choice")).bernoulli(0.5, n).reshape(-1, 1)
        ls, lo = noise_affine(shape, nr, "laplace", derive_seed(seed, "laplace"))
        es, eo = noise_affine(shape, nr, "erase", derive_seed(seed, "erase"))
        return np.where(use_laplace, ls, es), np.where(use_laplace, lo, eo)
    if preset == "slot-replace":
        replaced = Rng(derive_seed(seed, "choice")).bernoulli(nr, n).reshape(-1, 1)
        noise = C.noise_draw(shape, C.NoiseKind.GAUSSIAN, derive_seed(seed, "fill"))
        scale = np.where(replaced, 0.0, 1.0)
        return scale, np.where(replaced, noise, 0.0)
    raise T.ContractError(f"unknown noise preset '{preset}'")


def corrupt_for_step(batch: FeatureBatch, plan: CorruptionPlan, model: UMQModel,
                     step_seed: int) -> tuple[FeatureBatch, dict | None]:
    """Raw-level missing substitution plus encoded-level noise affines."""
    if plan.missing_rate > 0.0:
        batch = C.apply_missing(batch, plan.missing_rate,
                                derive_seed(plan.seed, "missing", step_seed))
    rep_affine = None
    if plan.noise_rate > 0.0:
        d = model.cfg.shared_dim
        rep_affine = {
            name: noise_affine((batch.size, d), plan.noise_rate, plan.noise_preset,
                               derive_seed(plan.seed, "noise", step_seed, name))
            for name in model.modalities
        }
    return batch, rep_affine


@dataclass
class EvalResult:
    metrics: dict[str, float | None]
    task_loss: float
    predictions: np.ndarray
    labels: np.ndarray


def evaluate(model: UMQModel, dataset: Dataset, split: str = "test",
             plan: CorruptionPlan | None = None, eval_seed: int = 0,
             batch_size: int | None = None) -> EvalResult:
    """Metrics on one split under an optional corruption plan."""
    plan = plan or CorruptionPlan()
    indices = dataset.splits[split] if isinstance(split, str) else np.asarray(split)
    bs = batch_size or model.cfg.batch_size
    preds, labels = [], []
    with T.no_grad():
        for start in range(0, indices.size, bs):
            chunk = indices[start:start + bs]
            batch = dataset.batch(chunk)
            batch, rep_affine = corrupt_for_step(
                batch, plan, model, derive_seed(eval_seed, "eval", int(start)))
            out = model.forward(batch, training=False, rep_affine=rep_affine)
            preds.append(out.prediction.data.copy())
            labels.append(batch.labels)
    predictions = np.concatenate(preds) if preds else np.zeros(0)
    labels = np.concatenate(labels) if labels else np.zeros(0)
    if model.task == "regression":
        loss = float(np.mean((predictions - labels) ** 2)) if labels.size else float("nan")
    else:
        z = predictions.astype(np.float64)
        loss = float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z))))) \
            if labels.size else float("nan")
    return EvalResult(metrics=task_metrics(predictions, labels, model.task),
                      task_loss=loss, predictions=predictions, labels=labels)


@dataclass
class TrainResult:
    model: UMQModel
    history: list[dict[str, float]]
    best_epoch: int
    best_val_loss: float
    final_val: EvalResult


def train(dataset: Dataset, cfg: UMQConfig) -> TrainResult:
    """Seeded training with per-epoch validation; the returned model is
    restored to the best-validation-loss epoch."""
    model = UMQModel(cfg, {m.name: m.dim for m in dataset.manifest.modalities},
                     dataset.manifest.task)
    optimizer = AdamW(model.named_params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.eps, weight_decay=cfg.weight_decay)
    plan = cfg.corruption_plan()
    train_idx = dataset.splits["train"]
    history: list[dict[str, float]] = []
    best_epoch, best_val_loss, best_arrays = -1, float("inf"), None
    last_report: LossReport | None = None
    # lr == 0 means fully frozen: no parameter movement, no baseline EMA
    # drift, and epoch-0 streams replayed, so every epoch is bit-identical
    frozen = cfg.lr == 0.0

    for epoch in range(cfg.epochs):
        seed_epoch = 0 if frozen else epoch
        order = Rng(derive_seed(cfg.seed, "shuffle", seed_epoch)).permutation(train_idx.size)
        shuffled = train_idx[order]
        sums: dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, shuffled.size, cfg.batch_size)):
            batch = dataset.batch(shuffled[start:start + cfg.batch_size])
            step_seed = derive_seed(cfg.seed, "step", seed_epoch, b)
            batch, rep_affine = corrupt_for_step(batch, plan, model, step_seed)
            try:
                fwd = model.forward(batch, training=True, step_seed=step_seed,
                                    rep_affine=rep_affine)
                loss, report = model.composite_loss(fwd, batch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except (PipelineNumericError, OptimizerError) as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch} batch {b}: {exc}",
                    last_report) from exc
            if not frozen:
                model.commit_baselines(fwd.new_buffers)
            last_report = report
            for key, value in report.components.items():
                sums[key] = sums.get(key, 0.0) + value
            sums["total"] = sums.get("total", 0.0) + report.total
            n_batches += 1

        val = evaluate(model, dataset, "val", plan,
                       eval_seed=derive_seed(cfg.seed, "val", seed_epoch))
        row: dict[str, float] = {"epoch": float(epoch)}
        for key in sorted(sums):
            row[key] = sums[key] / max(n_batches, 1)
        for key, value in val.metrics.items():
            row[f"val_{key}"] = float("nan") if value is None else value
        row["val_loss"] = val.task_loss
        history.append(row)

        if val.task_loss < best_val_loss:
            best_val_loss = val.task_loss
            best_epoch = epoch
            best_arrays = ([(name, p.data.copy()) for name, p in model.named_params()],
                           {k: v.copy() for k, v in model.buffers().items()})

    if best_arrays is not None:
        for (name, p), (saved_name, arr) in zip(model.named_params(), best_arrays[0]):
            assert name == saved_name
            p.data = arr
        for key, arr in best_arrays[1].items():
            model.states[key.split(".", 1)[1]].baseline = arr
    final_val = evaluate(model, dataset, "val", plan,
                         eval_seed=derive_seed(cfg.seed, "val", cfg.epochs))
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_loss=best_val_loss, final_val=final_val)


def history_csv(history: list[dict[str, float]]) -> str:
    """Deterministic CSV: one row per epoch, repr-formatted floats."""
    if not history:
        return ""
    columns = list(history[0].keys())
    lines = [",".join(columns)]
    for row in history:
        rendered = []
        for col in columns:
            value = row.get(col, float("nan"))
            rendered.append(str(int(value)) if col == "epoch" else repr(float(value)))
        lines.append(",".join(rendered))
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- checkpoint

def save_checkpoint(out_dir: str | Path, model: UMQModel, optimizer: AdamW | None = None,
                    extra: dict | None = None) -> Path:
    """Directory with a JSON manifest plus one raw little-endian float32
    blob holding parameters, baseline buffers, and optimizer moments."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_params()]
    arrays += sorted(model.buffers().items())
    if optimizer is not None:
        arrays += sorted(optimizer.state_arrays().items())
    blob = np.concatenate([a.astype("<f4").reshape(-1) for _, a in arrays]) \
        if arrays else np.zeros(0, dtype="<f4")
    blob.tofile(out / "arrays.f32")
    doc = {
        "format": 1,
        "task": model.task,
        "modality_dims": model.modality_dims,
        "config": {f: getattr(model.cfg, f) for f in model.cfg.__dataclass_fields__},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "optimizer_step_count": optimizer.step_count if optimizer else 0,
        "rng": {"base_seed": model.cfg.seed},
    }
    doc.update(extra or {})
    with open(out / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_checkpoint(ckpt_dir: str | Path) -> tuple[UMQModel, AdamW, dict]:
    ckpt = Path(ckpt_dir)
    with open(ckpt / "checkpoint.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = UMQConfig(**doc["config"])
    model = UMQModel(cfg, {k: int(v) for k, v in doc["modality_dims"].items()}, doc["task"])
    optimizer = AdamW(model.named_params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.eps, weight_decay=cfg.weight_decay)
    blob = np.fromfile(ckpt / "arrays.f32", dtype="<f4")
    target_arrays: dict[str, np.ndarray] = {n: p.data for n, p in model.named_params()}
    target_arrays.update(model.buffers())
    target_arrays.update(optimizer.state_arrays())
    cursor = 0
    for entry in doc["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = blob[cursor:cursor + count].reshape(shape)
        cursor += count
        name = entry["name"]
        if name not in target_arrays:
            raise ValueError(f"checkpoint array '{name}' does not match the rebuilt model")
        target_arrays[name][...] = chunk
    if cursor != blob.size:
        raise ValueError(f"checkpoint blob has {blob.size} floats, consumed {cursor}")
    optimizer.step_count = int(doc.get("optimizer_step_count", 0))
    return model, optimizer, doc
