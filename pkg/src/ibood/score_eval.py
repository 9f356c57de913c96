"""KDE anomaly scoring, precision-recall evaluation, and separation diagnostics.

Anomaly scores are negative log densities under an isotropic Gaussian KDE
fitted on the embedded support examples (all classes pooled). Detection
quality is the area under the precision-recall curve with the held-out class
as the positive, computed with the step-interpolated average-precision
estimator. A separation ratio (inter-centroid spread over intra-class spread)
quantifies how segmented the in-distribution classes are in the embedding.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .data_ingest import OodTask

SCHEMA_VERSION = 1

# exp underflows below ~-745 in double precision; flooring the log density
# there keeps far-away queries at a large finite score.
LOG_DENSITY_FLOOR = -745.0


class DegenerateBandwidthError(ValueError):
    """Raised when a bandwidth rule produces h <= 0; pass a fixed h instead."""


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both positives and negatives."""


@dataclass(frozen=True)
class KdeModel:
    """Isotropic Gaussian KDE over M support embeddings with bandwidth h."""

    support_embeddings: np.ndarray  # (M, d)
    bandwidth: float

    def __post_init__(self):
        if self.support_embeddings.ndim != 2 or self.support_embeddings.shape[0] < 1:
            raise ValueError("support embeddings must be a nonempty (M, d) matrix")
        if self.bandwidth <= 0:
            raise DegenerateBandwidthError(f"bandwidth must be positive, got {self.bandwidth}")


def fit_kde(support_embeddings: np.ndarray, bandwidth="scott") -> KdeModel:
    """Fit a KDE with a fixed bandwidth or Scott's rule.

    Scott's rule: h = M^(-1/(d+4)) * sigma_hat, with sigma_hat the mean
    per-dimension standard deviation of the support.
    """
    support = np.asarray(support_embeddings, dtype=np.float64)
    if support.ndim != 2:
        raise ValueError(f"expected (M, d) support, got shape {support.shape}")
    if bandwidth == "scott":
        m, d = support.shape
        sigma_hat = support.std(axis=0, ddof=1).mean() if m > 1 else 0.0
        h = m ** (-1.0 / (d + 4)) * sigma_hat
        if h <= 0:
            raise DegenerateBandwidthError(
                "zero-variance support under Scott's rule; use a fixed bandwidth"
            )
    else:
        h = float(bandwidth)
    return KdeModel(support_embeddings=support, bandwidth=h)


def anomaly_score(model: KdeModel, queries: np.ndarray) -> np.ndarray:
    """Negative log KDE density of each query row; higher = more anomalous."""
    queries = np.asarray(queries, dtype=np.float64)
    support = model.support_embeddings
    if queries.ndim != 2 or queries.shape[1] != support.shape[1]:
        raise ValueError(
            f"queries must be (Q, {support.shape[1]}), got shape {queries.shape}"
        )
    m, d = support.shape
    h2 = model.bandwidth**2
    sq = (
        (queries**2).sum(1)[:, None]
        + (support**2).sum(1)[None, :]
        - 2.0 * queries @ support.T
    )
    np.clip(sq, 0.0, None, out=sq)
    exponents = -sq / (2.0 * h2)  # (Q, M)
    peak = exponents.max(axis=1)
    log_kernel_sum = peak + np.log(np.exp(exponents - peak[:, None]).sum(axis=1))
    log_density = log_kernel_sum - np.log(m) - 0.5 * d * np.log(2.0 * np.pi * h2)
    return -np.maximum(log_density, LOG_DENSITY_FLOOR)


def auprc(scores: np.ndarray, positives: np.ndarray):
    """Average precision with the high-score class as positive.

    Returns (curve, area): curve is a list of (recall, precision) points, one
    per distinct score threshold in descending order; area is
    sum_k (R_k - R_{k-1}) * P_k. Tied scores share a threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be aligned 1-D arrays")
    n_pos = int(positives.sum())
    if n_pos == 0 or n_pos == len(positives):
        raise UndefinedMetricError("AUPRC needs at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positives[order].astype(np.float64)

    # last index of each tied block = one threshold
    block_end = np.nonzero(np.diff(sorted_scores))[0]
    block_end = np.append(block_end, len(sorted_scores) - 1)

    tp = np.cumsum(sorted_pos)[block_end]
    predicted = block_end + 1.0
    precision = tp / predicted
    recall = tp / n_pos

    # fsum gives a correctly-rounded area independent of summation order
    area = math.fsum(np.diff(recall, prepend=0.0) * precision)
    curve = list(zip(recall.tolist(), precision.tolist()))
    return curve, area


def separation_ratio(embeddings: np.ndarray, labels: np.ndarray, classes) -> float:
    """Inter-class centroid spread over intra-class point-to-centroid spread.

    Mean pairwise distance between class centroids, divided by the mean
    distance of samples to their own centroid. Collapsed classes (zero intra
    spread) yield +inf.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError("separation ratio needs at least 2 classes")

    centroids = []
    intra = []
    for k in classes:
        members = embeddings[labels == k]
        if members.shape[0] < 1:
            raise ValueError(f"class {k} has no samples")
        center = members.mean(0)
        centroids.append(center)
        intra.extend(np.linalg.norm(members - center, axis=1))
    centroids = np.stack(centroids)

    inter = [
        np.linalg.norm(centroids[i] - centroids[j])
        for i in range(len(classes))
        for j in range(i + 1, len(classes))
    ]
    mean_intra = float(np.mean(intra))
    mean_inter = float(np.mean(inter))
    if mean_intra == 0.0:
        return float("inf")
    return mean_inter / mean_intra


@dataclass
class ScoreReport:
    """Per-sample scores, PR curve, AUPRC, and class-separation diagnostics."""

    ood_class: int
    scores: list[float]
    is_ood: list[bool]
    curve: list[tuple[float, float]]
    auprc: float
    separation: float
    bandwidth: float
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "ood_class": self.ood_class,
            "auprc": self.auprc,
            "separation": None if np.isinf(self.separation) else self.separation,
            "separation_is_inf": bool(np.isinf(self.separation)),
            "bandwidth": self.bandwidth,
            "curve": [[r, p] for r, p in self.curve],
            "scores": self.scores,
            "is_ood": self.is_ood,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> "ScoreReport":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(
                f"{source}: score report schema version {version} != {SCHEMA_VERSION}"
            )
        separation = (
            float("inf") if payload["separation_is_inf"] else payload["separation"]
        )
        return cls(
            ood_class=payload["ood_class"],
            scores=payload["scores"],
            is_ood=payload["is_ood"],
            curve=[tuple(p) for p in payload["curve"]],
            auprc=payload["auprc"],
            separation=separation,
            bandwidth=payload["bandwidth"],
        )


def evaluate_task(
    discriminator: "nets.Discriminator",
    head: "nets.EmbeddingHead",
    task: OodTask,
    bandwidth="scott",
) -> ScoreReport:
    """Score the test split of a task against a KDE on its support embeddings.

    Embeddings run in evaluation mode. AUPRC treats the held-out class as the
    positive; the separation ratio is computed over in-distribution test
    samples only.
    """
    support_z = nets.embed_numpy(discriminator, head, task.support_set.images)
    test_z = nets.embed_numpy(discriminator, head, task.test_set.images)

    model = fit_kde(support_z, bandwidth)
    scores = anomaly_score(model, test_z)
    is_ood = task.test_set.labels == task.ood_class
    curve, area = auprc(scores, is_ood)

    in_dist = ~is_ood
    separation = separation_ratio(
        test_z[in_dist], task.test_set.labels[in_dist], task.in_dist_classes
    )
    return ScoreReport(
        ood_class=task.ood_class,
        scores=scores.tolist(),
        is_ood=is_ood.tolist(),
        curve=curve,
        auprc=area,
        separation=separation,
        bandwidth=model.bandwidth,
    )


def export_embeddings(
    discriminator: "nets.Discriminator",
    head: "nets.EmbeddingHead",
    task: OodTask,
    path,
) -> None:
    """Write test-set embeddings as CSV: id, label, is_ood, then d coordinates."""
    test_z = nets.embed_numpy(discriminator, head, task.test_set.images)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["id", "label", "is_ood"] + [f"z{i}" for i in range(test_z.shape[1])]
        )
        for i, (row, label) in enumerate(zip(test_z, task.test_set.labels)):
            writer.writerow(
                [i, int(label), int(label == task.ood_class)] + [repr(v) for v in row]
            )
