"""OOD scoring, average precision with tie blocks, report files, the
norm-sweep diagnostic, and density histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import SplitBundle
from .models import ModelSpec, score_logdensity, _atomic_write_json

REPORT_SCHEMA_VERSION = 1


class EvalError(Exception):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray  # higher = more in-distribution (unnormalized log-density)
    source: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise EvalError(f"non-finite scores in {self.source!r}")


@dataclass
class EvalReport:
    run: dict
    results: list[dict]            # {ood_set, auc_pr, group}
    selection: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "run": self.run,
            "results": self.results,
            "selection": self.selection,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema version {d.get('schema_version')}")
        return cls(run=d["run"], results=d["results"], selection=d.get("selection", {}))

    def save(self, path: str):
        _atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def average_precision(labels, scores) -> float:
    """AP with ID labeled 1, OOD labeled 0; tied scores form one block.

    Sort descending, walk distinct-score thresholds, and accumulate
    (R_k - R_{k-1}) * P_k; a constant scorer therefore gets the
    prevalence instead of an arbitrary tie-ordering artifact.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise EvalError("labels and scores must align")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("need at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int((y[i:j] == 1).sum())
        fp += int((y[i:j] == 0).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(ap)


def score_dataset(spec: ModelSpec, params, features, source: str = "") -> ScoreSet:
    return ScoreSet(score_logdensity(spec, params, features), source)


def ood_report(
    spec: ModelSpec,
    params,
    bundle: SplitBundle,
    ood_sets: dict[str, np.ndarray],
    groups: dict[str, str] | None = None,
    run_meta: dict | None = None,
) -> EvalReport:
    """One AP per OOD set against id_test, plus the selection AP on ood_val."""
    groups = groups or {}
    id_scores = score_dataset(spec, params, bundle.id_test.features, "id_test").scores
    results = []
    for name in sorted(ood_sets):
        ood_scores = score_dataset(spec, params, ood_sets[name], name).scores
        labels = np.concatenate([np.ones(len(id_scores)), np.zeros(len(ood_scores))])
        ap = average_precision(labels, np.concatenate([id_scores, ood_scores]))
        results.append({"ood_set": name, "auc_pr": ap, "group": groups.get(name, "natural")})
    selection = {}
    if bundle.ood_val.n > 0:
        val_id = score_dataset(spec, params, bundle.id_val.features, "id_val").scores
        val_ood = score_dataset(spec, params, bundle.ood_val.features, "ood_val").scores
        labels = np.concatenate([np.ones(len(val_id)), np.zeros(len(val_ood))])
        selection = {
            "metric": "auc_pr(id_val vs ood_val)",
            "auc_pr": average_precision(labels, np.concatenate([val_id, val_ood])),
        }
    return EvalReport(run=run_meta or {}, results=results, selection=selection)


def selection_score(spec: ModelSpec, params, bundle: SplitBundle) -> float:
    """Model-selection AP: id_val against ood_val."""
    val_id = score_logdensity(spec, params, bundle.id_val.features)
    val_ood = score_logdensity(spec, params, bundle.ood_val.features)
    labels = np.concatenate([np.ones(len(val_id)), np.zeros(len(val_ood))])
    return average_precision(labels, np.concatenate([val_id, val_ood]))


def unit_directions_through(anchor: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = np.atleast_2d(points) - anchor
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    norms = np.where(norms > 1e-12, norms, 1.0)
    return diff / norms


def random_unit_directions(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def norm_sweep(spec: ModelSpec, params, anchor, directions, radii) -> np.ndarray:
    """Mean unnormalized log-density over probes anchor + r * direction,
    one entry per radius."""
    anchor = np.asarray(anchor, dtype=np.float64)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size and (np.any(np.diff(radii) < 0) or radii[0] < 0):
        raise EvalError("radii must be ascending and nonnegative")
    curve = np.zeros(radii.size)
    for i, r in enumerate(radii):
        probes = anchor[None, :] + r * directions
        curve[i] = float(score_logdensity(spec, params, probes).mean())
    return curve


def density_histogram(score_sets: dict[str, np.ndarray], bins: int):
    """Shared-edge histograms spanning the joint min/max of all sets."""
    allscores = np.concatenate([np.asarray(s, dtype=np.float64) for s in score_sets.values()])
    lo, hi = float(allscores.min()), float(allscores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {name: np.histogram(s, bins=edges)[0] for name, s in score_sets.items()}
    return edges, counts


def write_series_csv(path: str, rows, header=("x", "value", "series")):
    """CSV of (x, value, series) rows for external plotting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
