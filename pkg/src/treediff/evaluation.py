"""Evaluation harness: optimal-matching clustering accuracy, normalized
mutual information, a Fréchet feature distance over a small trained
classifier's penultimate features, and the leaf-specificity entropy analysis.

The feature extractor is a deliberately small residual CNN, so every Fréchet
value here is a proxy: comparable across methods within one run, never
against published large-backbone numbers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import Rng
from .data import ImageBatch
from .errors import NumericError, ValidationError
from .tree.networks import _gn


def _contingency(true_labels: np.ndarray, assignments: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    true_labels = np.asarray(true_labels)
    assignments = np.asarray(assignments)
    if true_labels.size == 0:
        raise ValidationError("empty label arrays")
    if true_labels.shape != assignments.shape:
        raise ValidationError("label arrays must have equal length")
    classes, yi = np.unique(true_labels, return_inverse=True)
    clusters, ci = np.unique(assignments, return_inverse=True)
    table = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(table, (ci, yi), 1)
    return table, clusters, classes


def cluster_accuracy(true_labels: np.ndarray, assignments: np.ndarray) -> float:
    """Best matched fraction over injective cluster-to-class matchings."""
    table, _, _ = _contingency(true_labels, assignments)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / float(np.asarray(true_labels).size)


def _entropy_nats(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _partitions_identical(table: np.ndarray) -> bool:
    return bool(
        (np.count_nonzero(table, axis=0) <= 1).all() and (np.count_nonzero(table, axis=1) <= 1).all()
    )


def nmi(true_labels: np.ndarray, assignments: np.ndarray) -> float:
    """Mutual information normalized by the arithmetic mean of entropies.

    Degenerate single-cluster inputs: 1 when the partitions are identical,
    0 when either side has zero entropy and they are not.
    """
    table, _, _ = _contingency(true_labels, assignments)
    n = table.sum()
    h_rows = _entropy_nats(table.sum(axis=1).astype(np.float64))
    h_cols = _entropy_nats(table.sum(axis=0).astype(np.float64))
    if h_rows == 0.0 or h_cols == 0.0:
        return 1.0 if _partitions_identical(table) else 0.0
    p = table.astype(np.float64) / n
    pr = p.sum(axis=1, keepdims=True)
    pc = p.sum(axis=0, keepdims=True)
    mask = p > 0
    mi = float((p[mask] * np.log(p[mask] / (pr @ pc)[mask])).sum())
    return float(np.clip(mi / ((h_rows + h_cols) / 2.0), 0.0, 1.0))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Gaussian-moment distance between two feature sets.

    Not invariant under affine remapping of the feature space; values are only
    comparable when both sides use the same extractor.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("feature sets must be 2-d with equal width")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValidationError("need at least 2 samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all() and np.isfinite(mu_a).all()):
        raise NumericError("non-finite feature moments")
    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm = _gn(in_ch)
        self.conv = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.conv(F.silu(self.norm(x)))
        return F.silu(self.down(x))


class FeatureExtractor(nn.Module):
    """Small residual classifier; its pooled penultimate map is the feature."""

    def __init__(self, in_channels: int, num_classes: int, width: int = 16):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.stages = nn.ModuleList(
            [_Stage(width, width * 2), _Stage(width * 2, width * 4), _Stage(width * 4, width * 4)]
        )
        self.head = nn.Linear(width * 4, num_classes)
        self.feature_width = width * 4
        self.num_classes = num_classes
        self.test_accuracy: float | None = None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.stem(x))
        for stage in self.stages:
            h = stage(h)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def train_feature_extractor(
    train: ImageBatch, test: ImageBatch, epochs: int, rng: Rng, width: int = 16
) -> FeatureExtractor:
    """Fit the metric classifier; records held-out accuracy on the instance."""
    if train.labels is None or test.labels is None:
        raise ValidationError("feature extractor training needs labeled data")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        model = FeatureExtractor(train.values.shape[1], num_classes, width=width)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = torch.from_numpy(train.values)
    y = torch.from_numpy(train.labels)
    n = len(train)
    batch = min(128, n)
    model.train()
    for _ in range(epochs):
        order = rng.numpy.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            optimizer.zero_grad()
            loss = F.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
    model.eval()
    model.test_accuracy = float(
        (predict_classes(model, test.values) == test.labels).mean()
    )
    return model


@torch.no_grad()
def predict_classes(extractor: FeatureExtractor, images01: np.ndarray, batch: int = 256) -> np.ndarray:
    extractor.eval()
    out = []
    x = torch.from_numpy(np.asarray(images01, dtype=np.float32))
    for start in range(0, x.shape[0], batch):
        out.append(extractor(x[start : start + batch]).argmax(dim=1).numpy())
    return np.concatenate(out)


@torch.no_grad()
def extract_features(extractor: FeatureExtractor, images01: np.ndarray, batch: int = 256) -> np.ndarray:
    extractor.eval()
    out = []
    x = torch.from_numpy(np.asarray(images01, dtype=np.float32))
    for start in range(0, x.shape[0], batch):
        out.append(extractor.features(x[start : start + batch]).numpy())
    return np.concatenate(out)


def histogram_entropy(hist: np.ndarray) -> float:
    """Entropy in nats of a normalized histogram."""
    hist = np.asarray(hist, dtype=np.float64)
    if abs(hist.sum() - 1.0) > 1e-6:
        raise ValidationError("histogram must be normalized")
    return _entropy_nats(hist)


def leaf_specificity(
    generations_per_leaf: dict[int, np.ndarray],
    extractor: FeatureExtractor,
    leaf_prior_mass: dict[int, float],
    min_mass: float = 0.01,
    min_accuracy: float = 0.9,
) -> tuple[dict[int, np.ndarray], float]:
    """Per-leaf class histograms of generated images, plus their mean entropy.

    Leaves whose prior reach mass falls below ``min_mass`` are excluded. The
    metric refuses to run on a classifier below the accuracy gate.
    """
    if extractor.test_accuracy is None or extractor.test_accuracy < min_accuracy:
        raise ValidationError(
            f"classifier accuracy {extractor.test_accuracy} is below the {min_accuracy} gate"
        )
    histograms: dict[int, np.ndarray] = {}
    entropies = []
    for leaf, images in generations_per_leaf.items():
        if leaf_prior_mass.get(leaf, 0.0) < min_mass:
            continue
        preds = predict_classes(extractor, images)
        counts = np.bincount(preds, minlength=extractor.num_classes).astype(np.float64)
        hist = counts / counts.sum()
        histograms[leaf] = hist
        entropies.append(_entropy_nats(counts))
    if not histograms:
        raise ValidationError("no leaf passes the prior-mass inclusion threshold")
    return histograms, float(np.mean(entropies))


@dataclass
class MetricsReport:
    acc: float
    nmi: float
    fid_rec: float
    fid_gen: float
    per_leaf_histograms: dict[int, list[float]] = field(default_factory=dict)
    mean_entropy: float = 0.0

    def validate(self) -> None:
        for name in ("acc", "nmi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("fid_rec", "fid_gen"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        for leaf, hist in self.per_leaf_histograms.items():
            if abs(sum(hist) - 1.0) > 1e-6:
                raise ValidationError(f"histogram for leaf {leaf} is not normalized")
            if self.mean_entropy > np.log(len(hist)) + 1e-9:
                raise ValidationError("mean entropy exceeds ln K")

    def to_json(self) -> str:
        payload = {
            "acc": self.acc,
            "nmi": self.nmi,
            "fid_rec": self.fid_rec,
            "fid_gen": self.fid_gen,
            "per_leaf_histograms": {str(k): list(map(float, v)) for k, v in self.per_leaf_histograms.items()},
            "mean_entropy": self.mean_entropy,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        report = cls(
            acc=raw["acc"],
            nmi=raw["nmi"],
            fid_rec=raw["fid_rec"],
            fid_gen=raw["fid_gen"],
            per_leaf_histograms={int(k): v for k, v in raw["per_leaf_histograms"].items()},
            mean_entropy=raw["mean_entropy"],
        )
        report.validate()
        return report
