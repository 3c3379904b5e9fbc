"""Frozen-feature evaluation: linear probe, kNN, PCA and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .datagen import LabeledImageSet
from .models import as_constants, encode, images_to_batch, init_running_stats


@dataclass
class FeatureSet:
    features: np.ndarray  # (M, D)
    labels: np.ndarray  # (M,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (M, D) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise nd.NonFiniteError("non-finite feature values")

    def __len__(self) -> int:
        return len(self.labels)


def extract_features(
    params: dict[str, np.ndarray],
    data: LabeledImageSet,
    strides=(2, 2, 2),
    running: dict[str, np.ndarray] | None = None,
    chunk: int = 200,
) -> FeatureSet:
    """Encoder output h for every image, without building a gradient graph.

    Batch-norm layers use ``running`` statistics (default: the initial
    zero-mean / unit-variance statistics), so features never depend on how
    the data is chunked.
    """
    consts = as_constants(params)
    if running is None:
        running = init_running_stats(params)
    out = []
    for start in range(0, len(data), chunk):
        batch = images_to_batch(data.images[start : start + chunk])
        out.append(encode(consts, batch, strides, running=running).data)
    return FeatureSet(np.concatenate(out), data.labels)


def color_histogram_features(data: LabeledImageSet, bins: int = 8) -> FeatureSet:
    """Per-channel intensity histograms (normalized): a color-only shortcut baseline."""
    imgs = data.images
    m = len(imgs)
    feats = np.empty((m, 3 * bins))
    for c in range(3):
        idx = np.clip((imgs[..., c] * bins).astype(int), 0, bins - 1).reshape(m, -1)
        counts = np.stack([np.bincount(row, minlength=bins) for row in idx])
        feats[:, c * bins : (c + 1) * bins] = counts / idx.shape[1]
    return FeatureSet(feats, data.labels)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    weights: np.ndarray
    bias: np.ndarray
    iterations: int
    converged: bool


def _standardize(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(
    train: FeatureSet,
    test: FeatureSet,
    num_classes: int | None = None,
    lr: float = 0.1,
    iters: int = 5000,
    l2: float = 1e-4,
    tol: float = 1e-6,
) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training statistics. Stops early once
    the gradient norm falls below ``tol``.
    """
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train and test features differ in dimension")
    if len(np.unique(train.labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    k = num_classes or int(max(train.labels.max(), test.labels.max())) + 1
    xtr, xte = _standardize(train.features, test.features)
    m, d = xtr.shape
    onehot = np.eye(k)[train.labels]
    w = np.zeros((d, k))
    b = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        p = _softmax(xtr @ w + b)
        err = (p - onehot) / m
        gw = xtr.T @ err + l2 * w
        gb = err.sum(axis=0)
        if np.sqrt((gw * gw).sum() + (gb * gb).sum()) < tol:
            converged = True
            break
        w -= lr * gw
        b -= lr * gb

    def acc(x, y):
        return float(np.mean(np.argmax(x @ w + b, axis=1) == y))

    return ProbeResult(acc(xtr, train.labels), acc(xte, test.labels), w, b, it, converged)


# ---------------------------------------------------------------------------
# kNN


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n <= nd.EPS_NORM):
        raise nd.DegenerateNorm("zero feature vector in kNN evaluation")
    return x / n


def knn_predict(train: FeatureSet, queries: np.ndarray, k: int = 5) -> np.ndarray:
    """Majority vote of the k most cosine-similar training rows.

    Vote ties go to the tied class that holds the nearest neighbor.
    """
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in [1, {len(train)}]")
    sims = _unit_rows(np.asarray(queries, dtype=np.float64)) @ _unit_rows(train.features).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(order), dtype=np.int64)
    for r, nbrs in enumerate(order):
        labels = train.labels[nbrs]
        votes = np.bincount(labels)
        tied = np.flatnonzero(votes == votes.max())
        # first neighbor (in similarity order) whose label is among the tied classes
        preds[r] = next(lab for lab in labels if lab in tied)
    return preds


def knn_eval(train: FeatureSet, test: FeatureSet, k: int = 5) -> float:
    return float(np.mean(knn_predict(train, test.features, k) == test.labels))


# ---------------------------------------------------------------------------
# PCA


def pca2(x: np.ndarray, iters: int = 10_000, tol: float = 1e-9, seed: int = 0):
    """Top-2 principal components by power iteration with deflation.

    Returns (projected (M, 2), components (2, D), variances (2,)). Each
    component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError("pca2 needs an (M, D) matrix with M >= 3 and D >= 2")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    if not np.any(np.abs(cov) > 0):
        raise ValueError("all rows are identical; principal directions are undefined")
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    c = cov.copy()
    for _ in range(2):
        v = rng.standard_normal(c.shape[0])
        for u in comps:
            v = v - (v @ u) * u
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = c @ v
            for u in comps:
                w = w - (w @ u) * u  # keep the later component exactly orthogonal
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        variances.append(lam)
        c = c - lam * np.outer(v, v)
    comps = np.array(comps)
    return xc @ comps.T, comps, np.array(variances)


# ---------------------------------------------------------------------------
# export


def export_embeddings(params, data: LabeledImageSet, path, strides=(2, 2, 2), running=None) -> FeatureSet:
    """Encode ``data`` with ``params`` and write the features as CSV."""
    features = extract_features(params, data, strides, running)
    write_embeddings(path, features)
    return features


def write_embeddings(path, features: FeatureSet) -> None:
    """CSV with header ``id,label,h0,...``; floats round-trip exactly."""
    d = features.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", *(f"h{i}" for i in range(d))])
        for i, (row, lab) in enumerate(zip(features.features, features.labels)):
            w.writerow([i, int(lab), *(repr(float(v)) for v in row)])


def read_embeddings(path) -> FeatureSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise ValueError("not an embeddings CSV")
    body = rows[1:]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return FeatureSet(feats.reshape(len(body), -1), labels)
