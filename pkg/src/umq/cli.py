"""Command-line entry point.

Subcommands: synth, train, eval, corrupt-eval, gradcheck, route-audit.
stdout carries exactly one machine-readable JSON line per run (raw TOML
for `train --dump-config`); human-readable logs go to stderr. Exit codes:
0 success, 1 check/numeric failure, 2 usage or configuration error.
UMQ_SEED provides the seed when neither config file nor overrides set one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corruption as C
from .config import ConfigError, UMQConfig, dump_config, load_config_tracked
from .corruption import CorruptionPlan
from .dataio import (IngestionError, SyntheticSpec, dataset_sha256, generate_synthetic,
                     load_dataset, save_dataset)
from .metrics import BINARY_METRICS, REGRESSION_METRICS
from .model import PipelineNumericError
from .rng import derive_seed
from .tensor import ContractError
from .training import (TrainingDiverged, evaluate, history_csv, load_checkpoint,
                       save_checkpoint, train)
from .verify import COMPONENT_GROUPS, run_composite_gradcheck

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def log(message: str) -> None:
    print(message, file=sys.stderr)


def emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _render(value):
    return None if value is None else float(value)


def _load_run_config(args) -> UMQConfig:
    cfg, assigned = load_config_tracked(getattr(args, "config", None),
                                        getattr(args, "set", None) or [])
    if "seed" not in assigned and "UMQ_SEED" in os.environ:
        cfg.seed = int(os.environ["UMQ_SEED"])
    if getattr(args, "data", None):
        cfg.manifest = args.data
    return cfg


def _plan_from_args(args, cfg: UMQConfig) -> CorruptionPlan:
    return CorruptionPlan(
        missing_rate=args.missing_rate if args.missing_rate is not None else cfg.missing_rate,
        noise_rate=args.noise_rate if args.noise_rate is not None else cfg.noise_rate,
        noise_preset=args.kind or cfg.noise_preset,
        seed=cfg.corruption_seed,
    )


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    dims = [int(part) for part in args.dims.split(",") if part]
    if len(dims) < 2:
        log(f"synth: need at least 2 modalities, got dims={dims}")
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else int(os.environ.get("UMQ_SEED", "0"))
    spec = SyntheticSpec(
        n_samples=args.n,
        modality_dims={f"m{i}": dm for i, dm in enumerate(dims)},
        latent_dim=args.latent,
        noise_floor=args.noise_floor,
        task=args.task,
    )
    dataset, _ = generate_synthetic(spec, seed=seed)
    out = Path(args.out)
    manifest_path = save_dataset(dataset, out)
    sha = dataset_sha256(dataset)
    total_bytes = sum((out / f"m{i}.f32").stat().st_size for i in range(len(dims)))
    total_bytes += (out / "labels.f32").stat().st_size
    log(f"synth: wrote {args.n} samples x {len(dims)} modalities to {out}")
    emit({"manifest": str(manifest_path), "sha256": sha, "feature_bytes": total_bytes,
          "seed": seed})
    return EXIT_OK


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if not cfg.manifest:
        raise ConfigError("no dataset: set data.manifest in the config or pass --data")
    dataset = load_dataset(cfg.manifest)
    log(f"train: {dataset.n} samples, task={dataset.manifest.task}, "
        f"epochs={cfg.epochs}, seed={cfg.seed}")
    result = train(dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.csv").write_text(history_csv(result.history), encoding="utf-8")
    ckpt_dir = save_checkpoint(out / "checkpoint", result.model,
                               extra={"best_epoch": result.best_epoch})
    log(f"train: best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f})")
    emit({"val": {k: _render(v) for k, v in result.final_val.metrics.items()},
          "val_loss": result.final_val.task_loss, "best_epoch": result.best_epoch,
          "checkpoint": str(ckpt_dir), "history": str(out / "history.csv")})
    return EXIT_OK


# ------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data) if args.data else load_dataset(model.cfg.manifest)
    plan = _plan_from_args(args, model.cfg)
    result = evaluate(model, dataset, args.split, plan,
                      eval_seed=derive_seed(model.cfg.corruption_seed, "eval-cli"))
    emit({"split": args.split, "metrics": {k: _render(v) for k, v in result.metrics.items()},
          "task_loss": result.task_loss, "n": int(result.labels.size)})
    return EXIT_OK


# ----------------------------------------------------------- corrupt-eval

def _parse_rates(spec: str) -> list[float]:
    if ":" in spec:
        parts = [float(x) for x in spec.split(":")]
        if len(parts) != 3:
            raise ConfigError(f"rate range must be start:stop:step, got '{spec}'")
        start, stop, step = parts
        count = int(round((stop - start) / step)) + 1 if step > 0 else 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in spec.split(",") if x]


def cmd_corrupt_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data) if args.data else load_dataset(model.cfg.manifest)
    metric_names = REGRESSION_METRICS if model.task == "regression" else BINARY_METRICS
    rates = _parse_rates(args.rates)
    rows = []
    for index, rate in enumerate(rates):
        if args.protocol == "noise":
            plan = CorruptionPlan(noise_rate=rate, noise_preset=args.kind or "gaussian",
                                  seed=model.cfg.corruption_seed)
        else:
            plan = CorruptionPlan(missing_rate=rate, seed=model.cfg.corruption_seed)
        result = evaluate(model, dataset, args.split, plan,
                          eval_seed=derive_seed(model.cfg.corruption_seed,
                                                "corrupt-eval", args.protocol, index))
        rows.append((rate, result.metrics))
        log(f"corrupt-eval: {args.protocol} rate={rate} "
            + " ".join(f"{k}={_render(v)}" for k, v in result.metrics.items()))

    lines = ["protocol,rate," + ",".join(metric_names)]
    for rate, metrics in rows:
        rendered = [repr(float(metrics[k])) if metrics[k] is not None else "" for k in metric_names]
        lines.append(f"{args.protocol},{repr(float(rate))}," + ",".join(rendered))
    avg = []
    for key in metric_names:
        values = [m[key] for _, m in rows if m[key] is not None]
        avg.append(repr(float(np.mean(values))) if values else "")
    lines.append(f"{args.protocol},avg," + ",".join(avg))
    csv_text = "\n".join(lines) + "\n"
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(csv_text, encoding="utf-8")
    emit({"csv": str(out_path), "rows": len(rows), "protocol": args.protocol})
    return EXIT_OK


# -------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    reports = run_composite_gradcheck(d=args.dim, h=args.experts, k=args.selected,
                                      n_samples=args.batch, seed=args.seed,
                                      step=args.step, component=args.component)
    worst = {name: report.max_rel_error for name, report in reports.items()}
    skipped = {name: len(report.skipped) for name, report in reports.items()}
    ok = all(err < args.tolerance for err in worst.values())
    for name in sorted(worst):
        log(f"gradcheck: {name:22s} max_rel={worst[name]:.3e} skipped={skipped[name]}")
    emit({"components": worst, "skipped": skipped, "tolerance": args.tolerance, "pass": ok})
    if not ok:
        failing = max(worst, key=worst.get)
        log(f"gradcheck: FAILED on '{failing}' ({worst[failing]:.3e} >= {args.tolerance})")
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ------------------------------------------------------------ route-audit

def cmd_route_audit(args) -> int:
    from . import moe as M
    from . import tensor as T
    from .estimator import quality_level
    from .training import corrupt_for_step

    model, _, _ = load_checkpoint(args.checkpoint)
    if model.moe is None or not model.flags.quality_estimation:
        log("route-audit: checkpoint has routing or estimation ablated away")
        return EXIT_USAGE
    dataset = load_dataset(args.data) if args.data else load_dataset(model.cfg.manifest)
    plan = _plan_from_args(args, model.cfg)
    indices = (dataset.splits[args.split] if args.split != "all"
               else np.arange(dataset.n, dtype=np.int64))
    lines = ["sample_id,levels,experts,weights"]
    count = 0
    with T.no_grad():
        bs = model.cfg.batch_size
        for start in range(0, indices.size, bs):
            chunk = indices[start:start + bs]
            batch = dataset.batch(chunk)
            batch, rep_affine = corrupt_for_step(
                batch, plan, model, derive_seed(model.cfg.corruption_seed, "audit", int(start)))
            fwd = model.forward(batch, training=False, rep_affine=rep_affine)
            records = M.gate_records(fwd.gate_logits.data, model.moe.k)
            for sample_id, levels, record in zip(batch.sample_ids, fwd.levels, records):
                lines.append(",".join([
                    str(int(sample_id)),
                    ";".join(str(int(v)) for v in levels),
                    ";".join(str(i) for i in record.indices),
                    ";".join(repr(float(w)) for w in record.weights),
                ]))
                count += 1
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    emit({"csv": str(out_path), "rows": count})
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--dims", type=str, required=True, help="per-modality dims, e.g. 20,12,16")
    p.add_argument("--latent", type=int, default=6)
    p.add_argument("--noise-floor", type=float, default=0.1)
    p.add_argument("--task", choices=("regression", "binary"), default="regression")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", type=str, default=None, help="dataset manifest path")
    p.add_argument("--out", type=str, default="runs/latest")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective config as TOML and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--missing-rate", type=float, default=None)
    p.add_argument("--noise-rate", type=float, default=None)
    p.add_argument("--kind", choices=C.NOISE_PRESETS, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt-eval", help="sweep a corruption grid")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--protocol", choices=("noise", "missing"), required=True)
    p.add_argument("--rates", type=str, required=True, help="start:stop:step or comma list")
    p.add_argument("--kind", choices=C.NOISE_PRESETS, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_corrupt_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composite loss")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--selected", type=int, default=2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--component", choices=sorted(set(COMPONENT_GROUPS) | {"total"}),
                   default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("route-audit", help="per-sample routing audit CSV")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--split", type=str, default="all")
    p.add_argument("--missing-rate", type=float, default=None)
    p.add_argument("--noise-rate", type=float, default=None)
    p.add_argument("--kind", choices=C.NOISE_PRESETS, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_route_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, ContractError, FileNotFoundError, ValueError) as exc:
        log(f"error: {exc}")
        return EXIT_USAGE
    except (TrainingDiverged, PipelineNumericError, OSError) as exc:
        log(f"failure: {exc}")
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
