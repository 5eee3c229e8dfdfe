"""Feature-distribution clusters, centroids, KL divergence and CMI.

For a sample x the feature distribution is ``f_x = softmax(h_s^x)`` over the d
feature coordinates. Samples sharing a label form a cluster whose centroid is
the arithmetic mean of its members. The conditional mutual information
``I(X; Z | Y)`` is the (label-averaged) mean KL divergence from each member to
its centroid, computed in closed form; the index Z is only ever sampled by
:func:`markov_chain_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import LOG_EPS, Tensor

MODES = ("eq11_average", "eq12_literal")


class CMIError(ValueError):
    pass


class DegenerateClusterError(CMIError):
    pass


class CentroidConfigError(CMIError):
    pass


def feature_distribution(h) -> Tensor:
    """Stable softmax of pooled features over the last axis."""
    return tn.softmax(h)


def kl_divergence(p, q, eps: float = LOG_EPS) -> Tensor:
    """KL(p || q) along the last axis, natural log, with ``0 log 0 = 0``.

    Both arguments are clamped to ``eps`` inside the logs only, so a zero in p
    contributes exactly zero.
    """
    p, q = tn.as_tensor(p), tn.as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise tn.ShapeError(f"kl_divergence: lengths {p.shape[-1]} and {q.shape[-1]} differ")
    return (p * (tn.log(p, eps) - tn.log(q, eps))).sum(axis=-1)


def centroid(cluster) -> np.ndarray:
    """Mean of a cluster of distributions (rows)."""
    arr = np.asarray(cluster.data if isinstance(cluster, Tensor) else cluster, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DegenerateClusterError("centroid of an empty cluster")
    return arr.mean(axis=0)


def cluster_cmi(cluster, g) -> Tensor:
    """I(X; Z | Y=y): mean KL from each cluster member to ``g``."""
    cluster = tn.as_tensor(cluster)
    if cluster.ndim != 2 or cluster.shape[0] == 0:
        raise DegenerateClusterError("cluster_cmi of an empty cluster")
    return kl_divergence(cluster, g).mean()


@dataclass
class CentroidSet:
    """One distribution per label (rows of ``probs``) and the cluster sizes."""

    probs: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.probs)

    def copy(self) -> "CentroidSet":
        return CentroidSet(self.probs.copy(), self.counts.copy())

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "counts": self.counts.tolist()}


def compute_centroids(features, labels, num_classes: int) -> CentroidSet:
    feats = np.asarray(features.data if isinstance(features, Tensor) else features)
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.empty((num_classes, feats.shape[1]))
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    for y in range(num_classes):
        if counts[y] == 0:
            raise DegenerateClusterError(f"label {y} has no samples")
        probs[y] = feats[labels == y].mean(axis=0)
    return CentroidSet(probs, counts)


def sample_weights(labels, num_classes: int, mode: str) -> np.ndarray:
    """Per-sample weights that turn summed KL terms into the CMI of ``mode``.

    ``eq11_average`` weights sample i by ``1 / (C * n_{y_i})`` so each label's
    mean KL is averaged over labels; ``eq12_literal`` uses ``1 / C`` for every
    sample. Labels absent from ``labels`` contribute nothing.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if mode == "eq12_literal":
        return np.full(len(labels), 1.0 / num_classes)
    if mode == "eq11_average":
        counts = np.bincount(labels, minlength=num_classes)
        return 1.0 / (num_classes * counts[labels])
    raise CentroidConfigError(f"unknown CMI mode {mode!r}; expected one of {MODES}")


def per_sample_kl(features, labels, centroids: CentroidSet) -> Tensor:
    """KL(f_x || G_{y_x}) for each row; centroids are constants."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= centroids.num_classes):
        raise CentroidConfigError(
            f"labels outside [0, {centroids.num_classes}) have no centroid")
    return kl_divergence(features, centroids.probs[labels])


def dataset_cmi(features, labels, centroids: CentroidSet, mode: str = "eq11_average",
                clip: float | None = None) -> Tensor:
    """I(X; Z | Y) over the given samples, differentiable in ``features``.

    ``clip`` caps each sample's KL before weighting.
    """
    kl = per_sample_kl(features, labels, centroids)
    if clip is not None:
        kl = tn.clamp(kl, hi=clip)
    weights = sample_weights(labels, centroids.num_classes, mode)
    return (kl * weights).sum()


def dataset_cmi_value(features, labels, centroids: CentroidSet, mode: str = "eq11_average",
                      jobs: int = 1, chunk: int = 256) -> float:
    """Numeric CMI, optionally evaluated in parallel chunks.

    Chunk results are reduced in chunk order, so the value does not depend on
    ``jobs``.
    """
    feats = np.asarray(features.data if isinstance(features, Tensor) else features)
    labels = np.asarray(labels, dtype=np.int64)
    weights = sample_weights(labels, centroids.num_classes, mode)
    starts = list(range(0, len(feats), chunk))

    def part(s):
        with tn.no_grad():
            kl = per_sample_kl(feats[s:s + chunk], labels[s:s + chunk], centroids).data
        return float(np.dot(kl, weights[s:s + chunk]))

    return tn.fixed_order_sum(tn.parallel_map(part, starts, jobs)) if starts else 0.0


def centroid_objective(features, labels, probs: np.ndarray) -> float:
    """sum_x KL(f_x || G_{y_x}) for an arbitrary candidate centroid table."""
    feats = np.asarray(features)
    q = np.maximum(np.asarray(probs)[np.asarray(labels)], LOG_EPS)
    p = feats
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, LOG_EPS)) - np.log(q)), 0.0)
    return float(terms.sum())


def perturb_centroids(probs: np.ndarray, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    """Random nearby distributions: multiplicative log-normal noise, renormalised."""
    noisy = probs * np.exp(rng.normal(0.0, scale, size=probs.shape))
    return noisy / noisy.sum(axis=-1, keepdims=True)


def centroid_optimality_check(features, labels, centroids: CentroidSet, n_perturb: int = 10,
                              rng: np.random.Generator | None = None) -> bool:
    """True when no random perturbation of the centroids lowers the KL objective."""
    rng = rng or np.random.default_rng(0)
    base = centroid_objective(features, labels, centroids.probs)
    return all(centroid_objective(features, labels, perturb_centroids(centroids.probs, rng)) >= base
               for _ in range(n_perturb))


@dataclass
class MarkovCheckReport:
    passed: bool
    n_draws: int
    threshold: float
    tv_distances: np.ndarray

    @property
    def max_tv(self) -> float:
        return float(self.tv_distances.max()) if self.tv_distances.size else 0.0


def markov_chain_check(features, labels=None, n_draws: int = 100_000, seed: int = 0) -> MarkovCheckReport:
    """Sample Z from P(Z | X=x, Y=y) and compare its law with f_x.

    The sampler receives the label but, as in the chain Y -> X -> Z, only
    uses f_x. Passes when every empirical law is within ``3/sqrt(n_draws)``
    of f_x in total variation.
    """
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    labels = np.zeros(len(feats), dtype=np.int64) if labels is None else np.asarray(labels)
    rng = np.random.default_rng(seed)
    tv = np.empty(len(feats))
    for i, (f, _y) in enumerate(zip(feats, labels)):
        p = f / f.sum()
        counts = rng.multinomial(n_draws, p)
        tv[i] = 0.5 * np.abs(counts / n_draws - p).sum()
    threshold = 3.0 / np.sqrt(n_draws)
    return MarkovCheckReport(bool(np.all(tv < threshold)), n_draws, threshold, tv)
