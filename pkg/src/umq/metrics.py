"""Evaluation metrics for sentiment-style regression and binary tasks.

Regression: 7-class accuracy (round half away from zero, clamp to
[-3, 3]), binary accuracy and positive-class F1 with neutral (label 0)
samples excluded, MAE, and Pearson correlation. Undefined metrics are
reported as None, never as 0.
"""

from __future__ import annotations

import numpy as np

REGRESSION_METRICS = ("acc2", "acc7", "f1", "mae", "corr")
BINARY_METRICS = ("acc",)


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def seven_class(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), -3.0, 3.0)


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.std() == 0.0 or b.std() == 0.0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def regression_metrics(preds: np.ndarray, labels: np.ndarray) -> dict[str, float | None]:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    out: dict[str, float | None] = {}

    non_neutral = labels != 0.0
    if non_neutral.any():
        pred_pos = preds[non_neutral] > 0.0
        label_pos = labels[non_neutral] > 0.0
        out["acc2"] = float((pred_pos == label_pos).mean())
        tp = int((pred_pos & label_pos).sum())
        fp = int((pred_pos & ~label_pos).sum())
        fn = int((~pred_pos & label_pos).sum())
        out["f1"] = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else None
    else:
        out["acc2"] = None
        out["f1"] = None

    out["acc7"] = float((seven_class(preds) == seven_class(labels)).mean())
    out["mae"] = float(np.abs(preds - labels).mean())
    out["corr"] = pearson(preds, labels)
    return {key: out[key] for key in REGRESSION_METRICS}


def binary_metrics(logits: np.ndarray, labels: np.ndarray) -> dict[str, float | None]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return {"acc": float(((logits > 0.0) == (labels > 0.5)).mean())}


def task_metrics(preds: np.ndarray, labels: np.ndarray, task: str) -> dict[str, float | None]:
    if task == "regression":
        return regression_metrics(preds, labels)
    return binary_metrics(preds, labels)
