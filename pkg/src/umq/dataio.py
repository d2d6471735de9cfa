"""Dataset manifests, raw binary feature ingestion, the pooled projection
encoder, and the seeded synthetic multimodal generator.

On-disk format: a JSON manifest plus one raw little-endian float32 file
per modality (row-major, no header) and one for labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import Rng, derive_seed


class IngestionError(ValueError):
    pass


DEFAULT_SPLIT_RATIOS = (0.7, 0.15, 0.15)


@dataclass
class ModalitySpec:
    name: str
    dim: int
    seq_len: int | None = None
    file: str | None = None


@dataclass
class DatasetManifest:
    modalities: list[ModalitySpec]
    n: int
    task: str  # "regression" | "binary"
    labels_file: str | None = None
    label_range: tuple[float, float] = (-3.0, 3.0)
    splits: dict[str, list[int]] | None = None
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    endianness: str = "little"

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(names) < 2:
            raise IngestionError(f"need at least 2 modalities, got {len(names)}")
        if len(set(names)) != len(names):
            raise IngestionError(f"modality names must be unique: {names}")
        if self.task not in ("regression", "binary"):
            raise IngestionError(f"unknown task kind '{self.task}'")
        if self.endianness != "little":
            raise IngestionError("only little-endian feature files are supported")

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]


@dataclass
class FeatureBatch:
    """Per-modality raw feature matrices for one batch of samples."""

    features: dict[str, np.ndarray]  # [n x d_m] (or [n x T_m x d_m])
    labels: np.ndarray  # [n]
    mask: np.ndarray  # [n x |M|] bool, column order = manifest order
    sample_ids: np.ndarray  # [n]
    modality_names: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def copy(self) -> "FeatureBatch":
        return FeatureBatch({k: v.copy() for k, v in self.features.items()},
                            self.labels.copy(), self.mask.copy(),
                            self.sample_ids.copy(), list(self.modality_names))


@dataclass
class Dataset:
    manifest: DatasetManifest
    features: dict[str, np.ndarray]
    labels: np.ndarray
    splits: dict[str, np.ndarray]

    @property
    def n(self) -> int:
        return self.manifest.n

    def batch(self, indices: np.ndarray) -> FeatureBatch:
        indices = np.asarray(indices)
        names = self.manifest.modality_names
        return FeatureBatch(
            features={name: self.features[name][indices].copy() for name in names},
            labels=self.labels[indices].copy(),
            mask=np.ones((indices.size, len(names)), dtype=bool),
            sample_ids=indices.copy(),
            modality_names=list(names),
        )


def _derive_splits(n: int, ratios, seed: int) -> dict[str, np.ndarray]:
    perm = Rng(derive_seed(seed, "splits")).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _read_f32(path: Path, expected_count: int, what: str) -> np.ndarray:
    expected_bytes = expected_count * 4
    actual_bytes = path.stat().st_size
    if actual_bytes != expected_bytes:
        raise IngestionError(
            f"{what}: file '{path}' has {actual_bytes} bytes, expected {expected_bytes}")
    data = np.fromfile(path, dtype="<f4")
    return data


def _validate_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        raise IngestionError(f"{what}: non-finite value at row {row}")


def parse_manifest(manifest_path: str | Path) -> tuple[DatasetManifest, Path]:
    path = Path(manifest_path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    modalities = [ModalitySpec(m["name"], int(m["dim"]),
                               m.get("seq_len"), m.get("file"))
                  for m in raw["modalities"]]
    manifest = DatasetManifest(
        modalities=modalities,
        n=int(raw["n"]),
        task=raw["task"],
        labels_file=raw.get("labels_file"),
        label_range=tuple(raw.get("label_range", (-3.0, 3.0))),
        splits=raw.get("splits"),
        split_seed=int(raw.get("split_seed", 0)),
        split_ratios=tuple(raw.get("split_ratios", DEFAULT_SPLIT_RATIOS)),
        endianness=raw.get("endianness", "little"),
    )
    return manifest, path.parent


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a manifest plus its raw feature/label files; deterministic row
    order and split derivation."""
    manifest, root = parse_manifest(manifest_path)
    features: dict[str, np.ndarray] = {}
    for spec in manifest.modalities:
        count = manifest.n * spec.dim * (spec.seq_len or 1)
        flat = _read_f32(root / spec.file, count, f"modality '{spec.name}'")
        shape = ((manifest.n, spec.seq_len, spec.dim) if spec.seq_len
                 else (manifest.n, spec.dim))
        arr = flat.reshape(shape)
        _validate_finite(arr, f"modality '{spec.name}'")
        features[spec.name] = arr
    labels = _read_f32(root / manifest.labels_file, manifest.n, "labels")
    _validate_finite(labels.reshape(-1, 1), "labels")
    _check_label_range(labels, manifest)
    if manifest.splits is not None:
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest.splits.items()}
    else:
        splits = _derive_splits(manifest.n, manifest.split_ratios, manifest.split_seed)
    return Dataset(manifest, features, labels, splits)


def _check_label_range(labels: np.ndarray, manifest: DatasetManifest) -> None:
    if manifest.task == "binary":
        if not np.isin(labels, (0.0, 1.0)).all():
            raise IngestionError("binary labels must be in {0, 1}")
    else:
        lo, hi = manifest.label_range
        if labels.min() < lo or labels.max() > hi:
            raise IngestionError(
                f"regression labels outside declared range [{lo}, {hi}]")


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write manifest + raw files; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    mod_entries = []
    for spec in manifest.modalities:
        fname = spec.file or f"{spec.name}.f32"
        dataset.features[spec.name].astype("<f4").tofile(out / fname)
        entry = {"name": spec.name, "dim": spec.dim, "file": fname}
        if spec.seq_len:
            entry["seq_len"] = spec.seq_len
        mod_entries.append(entry)
    labels_file = manifest.labels_file or "labels.f32"
    dataset.labels.astype("<f4").tofile(out / labels_file)
    doc = {
        "modalities": mod_entries,
        "n": manifest.n,
        "task": manifest.task,
        "labels_file": labels_file,
        "label_range": list(manifest.label_range),
        "split_seed": manifest.split_seed,
        "split_ratios": list(manifest.split_ratios),
        "endianness": "little",
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def dataset_sha256(dataset: Dataset) -> str:
    """Content hash over structure + feature bytes + label bytes."""
    h = hashlib.sha256()
    header = {
        "n": dataset.manifest.n,
        "task": dataset.manifest.task,
        "modalities": [[m.name, m.dim, m.seq_len or 0] for m in dataset.manifest.modalities],
    }
    h.update(json.dumps(header, sort_keys=True).encode())
    for spec in dataset.manifest.modalities:
        h.update(dataset.features[spec.name].astype("<f4").tobytes())
    h.update(dataset.labels.astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- encoder

@dataclass
class ModalityEncoderParams:
    weight: T.Tensor  # [d_m x d]
    bias: T.Tensor  # [1 x d]
    ln_scale: T.Tensor  # [d]
    ln_shift: T.Tensor  # [d]


def init_encoder(modality_dims: dict[str, int], d: int, seed: int,
                 dtype=np.float32) -> dict[str, ModalityEncoderParams]:
    params = {}
    for name, dm in modality_dims.items():
        rng = Rng(derive_seed(seed, "encoder", name))
        bound = np.sqrt(6.0 / (dm + d))
        w = (rng.uniform((dm, d)) * 2.0 - 1.0) * bound
        params[name] = ModalityEncoderParams(
            weight=T.parameter(w, dtype=dtype),
            bias=T.parameter(np.zeros((1, d)), dtype=dtype),
            ln_scale=T.parameter(np.ones(d), dtype=dtype),
            ln_shift=T.parameter(np.zeros(d), dtype=dtype),
        )
    return params


def encoder_param_list(params: dict[str, ModalityEncoderParams]) -> list[tuple[str, T.Tensor]]:
    out = []
    for name, p in params.items():
        out += [(f"encoder.{name}.weight", p.weight), (f"encoder.{name}.bias", p.bias),
                (f"encoder.{name}.ln_scale", p.ln_scale), (f"encoder.{name}.ln_shift", p.ln_shift)]
    return out


def encode(raw: np.ndarray | T.Tensor, params: ModalityEncoderParams) -> T.Tensor:
    """Project raw features to the shared width, layer-normalize, then
    mean-pool any temporal axis: [n x d_m] or [n x T x d_m] -> [n x d]."""
    x = raw if isinstance(raw, T.Tensor) else T.Tensor(np.asarray(raw, params.weight.dtype))
    if x.data.ndim == 2:
        projected = x @ params.weight + params.bias
        return T.layer_norm(projected, params.ln_scale, params.ln_shift)
    if x.data.ndim != 3:
        raise T.ShapeError(f"encode: expected 2-D or 3-D input, got {x.shape}")
    n, t, dm = x.shape
    if dm != params.weight.shape[0]:
        raise T.ShapeError(
            f"encode: input dim {dm} does not match projection {params.weight.shape}")
    flat = T.reshape(x, (n * t, dm)) @ params.weight + params.bias
    normed = T.layer_norm(flat, params.ln_scale, params.ln_shift)
    return T.tmean(T.reshape(normed, (n, t, params.weight.shape[1])), axis=1)


# ------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    n_samples: int
    modality_dims: dict[str, int]
    latent_dim: int
    noise_floor: float = 0.1
    task: str = "regression"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if len(self.modality_dims) < 2:
            raise ValueError("need at least 2 modalities")


@dataclass
class GeneratorParams:
    """Ground-truth generator internals, exposed for analytic checks."""

    latents: np.ndarray  # [n x latent]
    maps: dict[str, np.ndarray]  # latent -> d_m
    offsets: dict[str, np.ndarray]  # modality-constant [d_m]
    label_weights: np.ndarray  # [latent]


def synthetic_features_from_latent(z: np.ndarray, name: str, params: GeneratorParams,
                                   noise: np.ndarray | None = None) -> np.ndarray:
    """The generator's pure per-modality map (noise optional)."""
    feats = z @ params.maps[name] + params.offsets[name]
    if noise is not None:
        feats = feats + noise
    return feats.astype(np.float32)


def synthetic_labels_from_latent(z: np.ndarray, params: GeneratorParams,
                                 task: str) -> np.ndarray:
    raw = z @ params.label_weights
    if task == "binary":
        return (raw > 0).astype(np.float32)
    return np.clip(raw, -3.0, 3.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, GeneratorParams]:
    """Latent-linear multimodal generator: per-modality linear map of a
    shared latent plus a modality-constant offset plus Gaussian noise.

    The offset is the recoverable modality-specific signal; the latent is
    the sample-specific one. Bit-identical for identical seeds.
    """
    z = Rng(derive_seed(seed, "latent")).normal((spec.n_samples, spec.latent_dim))
    maps, offsets, features = {}, {}, {}
    modalities = []
    for name, dm in spec.modality_dims.items():
        maps[name] = Rng(derive_seed(seed, "map", name)).normal(
            (spec.latent_dim, dm)) / np.sqrt(spec.latent_dim)
        offsets[name] = Rng(derive_seed(seed, "offset", name)).normal(dm)
        modalities.append(ModalitySpec(name=name, dim=dm, file=f"{name}.f32"))
    w = Rng(derive_seed(seed, "labels")).normal(spec.latent_dim)
    w *= 1.5 / np.sqrt(spec.latent_dim)
    params = GeneratorParams(latents=z, maps=maps, offsets=offsets, label_weights=w)
    for name, dm in spec.modality_dims.items():
        noise = None
        if spec.noise_floor > 0:
            noise = spec.noise_floor * Rng(derive_seed(seed, "noise", name)).normal(
                (spec.n_samples, dm))
        features[name] = synthetic_features_from_latent(z, name, params, noise)
    labels = synthetic_labels_from_latent(z, params, spec.task)
    manifest = DatasetManifest(modalities=modalities, n=spec.n_samples, task=spec.task,
                               labels_file="labels.f32",
                               split_seed=derive_seed(seed, "split-base") & 0x7FFFFFFF)
    splits = _derive_splits(spec.n_samples, manifest.split_ratios, manifest.split_seed)
    return Dataset(manifest, features, labels, splits), params
