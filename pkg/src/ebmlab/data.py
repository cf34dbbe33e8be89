"""Dataset ingestion, the class-removal OOD protocol, and the synthetic
generators (noise, constant, out-of-domain, smoothness ladder, two moons)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, classifier_embed
from .rng import stream


class DataError(Exception):
    pass


@dataclass
class LabeledTable:
    features: np.ndarray
    labels: np.ndarray | None = None
    class_names: list[str] | None = None
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if np.isnan(self.features).any():
            raise DataError("NaN features after ingestion")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.features):
                raise DataError("label / feature length mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "LabeledTable":
        return LabeledTable(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.class_names,
            self.source,
        )


@dataclass
class SplitBundle:
    id_train: LabeledTable
    id_val: LabeledTable
    id_test: LabeledTable
    ood_val: LabeledTable
    ood_test: LabeledTable
    mean: np.ndarray | None = None  # id_train statistics once standardized
    std: np.ndarray | None = None
    removed_classes: list[int] = field(default_factory=list)

    def parts(self) -> dict[str, LabeledTable]:
        return {
            "id_train": self.id_train,
            "id_val": self.id_val,
            "id_test": self.id_test,
            "ood_val": self.ood_val,
            "ood_test": self.ood_test,
        }


def load_csv(path: str, label_column: str | None = None) -> LabeledTable:
    """CSV with header row; the label column (if named) may be integer or
    categorical. Rows with unparseable cells abort with their line numbers."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if label_column is not None and label_column not in header:
        raise DataError(f"{path}: missing label column {label_column!r}")
    label_idx = header.index(label_column) if label_column is not None else None
    features, raw_labels, bad_lines = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            bad_lines.append(lineno)
            continue
        try:
            feat = [float(c) for i, c in enumerate(row) if i != label_idx]
        except ValueError:
            bad_lines.append(lineno)
            continue
        features.append(feat)
        if label_idx is not None:
            raw_labels.append(row[label_idx])
    if bad_lines:
        raise DataError(f"{path}: unparseable rows at lines {bad_lines}")
    if not features:
        raise DataError(f"{path}: no data rows")
    labels = class_names = None
    if label_idx is not None:
        try:
            labels = np.array([int(v) for v in raw_labels])
            class_names = [str(c) for c in sorted(set(labels.tolist()))]
            remap = {c: i for i, c in enumerate(sorted(set(labels.tolist())))}
            labels = np.array([remap[v] for v in labels])
        except ValueError:
            class_names = sorted(set(raw_labels))
            remap = {c: i for i, c in enumerate(class_names)}
            labels = np.array([remap[v] for v in raw_labels])
    return LabeledTable(np.asarray(features), labels, class_names, source=path)


def write_csv(path: str, table: LabeledTable, provenance: str = ""):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        writer = csv.writer(fh)
        cols = [f"x{i}" for i in range(table.dim)]
        if table.labels is not None:
            cols.append("label")
        writer.writerow(cols)
        for i in range(table.n):
            row = [repr(float(v)) for v in table.features[i]]
            if table.labels is not None:
                row.append(str(int(table.labels[i])))
            writer.writerow(row)


def class_removal_split(
    table: LabeledTable,
    removed_classes,
    val_frac: float = 0.1,
    id_fracs=(0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitBundle:
    """Removed classes become the OOD side (``val_frac`` of them for model
    selection, the rest as OOD test); the remaining classes are split into
    train/val/test and relabeled contiguously."""
    if table.labels is None:
        raise DataError("class removal requires labels")
    removed = sorted(set(int(c) for c in removed_classes))
    present = sorted(set(table.labels.tolist()))
    for c in removed:
        if c not in present:
            raise DataError(f"class {c} not present")
    kept = [c for c in present if c not in removed]
    if not kept:
        raise DataError("cannot remove every class")
    rng = stream(seed, "split")

    ood_mask = np.isin(table.labels, removed)
    ood_idx = rng.permutation(np.where(ood_mask)[0])
    n_val = round(val_frac * ood_idx.size)
    ood_val_idx, ood_test_idx = ood_idx[:n_val], ood_idx[n_val:]

    id_idx = rng.permutation(np.where(~ood_mask)[0])
    n_id = id_idx.size
    n_tr = round(id_fracs[0] * n_id)
    n_va = round(id_fracs[1] * n_id)
    tr_idx, va_idx, te_idx = id_idx[:n_tr], id_idx[n_tr:n_tr + n_va], id_idx[n_tr + n_va:]

    remap = {c: i for i, c in enumerate(kept)}
    names = [table.class_names[c] if table.class_names else str(c) for c in kept]

    def id_part(idx):
        part = table.take(idx)
        part.labels = np.array([remap[c] for c in part.labels], dtype=np.int64)
        part.class_names = names
        return part

    return SplitBundle(
        id_train=id_part(tr_idx),
        id_val=id_part(va_idx),
        id_test=id_part(te_idx),
        ood_val=table.take(ood_val_idx),
        ood_test=table.take(ood_test_idx),
        removed_classes=removed,
    )


def make_noise(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Half standard Gaussian rows, half uniform(-1, 1) rows, shuffled.
    An odd count gives the Gaussian part the extra row."""
    n_gauss = math.ceil(n / 2)
    gauss = rng.normal(size=(n_gauss, dim))
    unif = rng.uniform(-1.0, 1.0, size=(n - n_gauss, dim))
    out = np.concatenate([gauss, unif], axis=0)
    return out[rng.permutation(n)]


def make_constant(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Each row filled with a single scalar drawn from uniform(-1, 1)."""
    values = rng.uniform(-1.0, 1.0, size=n)
    return np.repeat(values[:, None], dim, axis=1)


def make_oodomain(features: np.ndarray, mode: str = "tabular") -> np.ndarray:
    """Inputs presented in an un-normalized numeric range.

    Tabular: standardized features scaled by 255 (a deliberate artifact
    convention; images define the [0, 255] range, tabular data does not).
    Image: [0, 1] pixels mapped to whole numbers in [0, 255].
    """
    features = np.asarray(features, dtype=np.float64)
    if mode == "tabular":
        return features * 255.0
    if mode == "image":
        return np.round(features * 255.0)
    raise DataError(f"unknown oodomain mode {mode!r}")


def make_smoothness(n: int, side: int, pool_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform pixel noise, average-pooled, nearest-neighbor upsampled back
    to side x side, flattened. Pool size must divide the side."""
    if side % pool_size != 0:
        raise DataError(f"pool size {pool_size} does not divide side {side}")
    imgs = rng.uniform(0.0, 1.0, size=(n, side, side))
    m = side // pool_size
    pooled = imgs.reshape(n, m, pool_size, m, pool_size).mean(axis=(2, 4))
    up = np.repeat(np.repeat(pooled, pool_size, axis=1), pool_size, axis=2)
    return up.reshape(n, side * side)


def make_two_moons(n: int, noise_std: float, rng: np.random.Generator) -> LabeledTable:
    """Two interleaved half circles of n/2 points each."""
    n_outer = n // 2
    n_inner = n - n_outer
    t_outer = rng.uniform(0.0, math.pi, size=n_outer)
    t_inner = rng.uniform(0.0, math.pi, size=n_inner)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    feats = np.concatenate([outer, inner], axis=0)
    if noise_std > 0:
        feats = feats + noise_std * rng.normal(size=feats.shape)
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    perm = rng.permutation(n)
    return LabeledTable(feats[perm], labels[perm], ["outer", "inner"], source="two-moons")


def standardize(bundle: SplitBundle) -> SplitBundle:
    """z-score every part with id_train statistics (std floored at 1e-8)."""
    mean = bundle.id_train.features.mean(axis=0)
    std = np.maximum(bundle.id_train.features.std(axis=0), 1e-8)

    def tf(part: LabeledTable) -> LabeledTable:
        return LabeledTable((part.features - mean) / std, part.labels, part.class_names, part.source)

    return SplitBundle(
        id_train=tf(bundle.id_train),
        id_val=tf(bundle.id_val),
        id_test=tf(bundle.id_test),
        ood_val=tf(bundle.ood_val),
        ood_test=tf(bundle.ood_test),
        mean=mean,
        std=std,
        removed_classes=list(bundle.removed_classes),
    )


def unstandardize(features: np.ndarray, bundle: SplitBundle) -> np.ndarray:
    if bundle.mean is None:
        raise DataError("bundle carries no standardization stats")
    return features * bundle.std + bundle.mean


def embed_dataset(spec: ModelSpec, params, bundle: SplitBundle) -> SplitBundle:
    """Map every part through the classifier's penultimate layer."""
    def tf(part: LabeledTable) -> LabeledTable:
        emb = classifier_embed(spec, params, part.features)
        return LabeledTable(emb, part.labels, part.class_names, part.source + ":embedded")

    return SplitBundle(
        id_train=tf(bundle.id_train),
        id_val=tf(bundle.id_val),
        id_test=tf(bundle.id_test),
        ood_val=tf(bundle.ood_val),
        ood_test=tf(bundle.ood_test),
        removed_classes=list(bundle.removed_classes),
    )
