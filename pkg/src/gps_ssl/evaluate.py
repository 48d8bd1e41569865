"""Frozen-representation evaluation: linear probe, Recall@1, kNN accuracy, runtime overhead.

Neighbor searches use squared Euclidean distance with ties going to the
lowest id, and never return the query itself.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset
from .errors import ArgumentError, DegenerateLabelError
from .model import ModelParams, embed


def pairwise_sq(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _features(params: ModelParams, dataset: Dataset, ids) -> np.ndarray:
    return embed(params, dataset.images[np.asarray(ids, dtype=np.int64)])


# -- linear probe -----------------------------------------------------------

def linear_probe_features(train_x, train_y, test_x, test_y, classifier_lr: float = 0.1,
                          epochs: int = 200, seed: int = 0) -> float:
    """Top-1 test accuracy (%) of a softmax linear classifier on fixed features.

    Features are standardized with training statistics; the classifier is
    trained by full-batch gradient descent on cross-entropy.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise DegenerateLabelError("linear probe needs at least two classes in the training set")
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0] = 1.0
    xtr = torch.from_numpy((train_x - mu) / sd)
    xte = torch.from_numpy((test_x - mu) / sd)
    ytr = torch.from_numpy(np.searchsorted(classes, train_y))
    rng = np.random.default_rng(seed)
    w = torch.from_numpy(rng.normal(0.0, 0.01, size=(xtr.shape[1], len(classes)))).requires_grad_(True)
    b = torch.zeros(len(classes), dtype=torch.float64, requires_grad=True)
    for _ in range(epochs):
        loss = torch.nn.functional.cross_entropy(xtr @ w + b, ytr)
        gw, gb = torch.autograd.grad(loss, [w, b])
        with torch.no_grad():
            w -= classifier_lr * gw
            b -= classifier_lr * gb
    with torch.no_grad():
        pred = classes[(xte @ w + b).argmax(dim=1).numpy()]
    return 100.0 * float(np.mean(pred == test_y))


def linear_probe(frozen_params: ModelParams, dataset: Dataset, train_ids, test_ids,
                 classifier_lr: float = 0.1, epochs: int = 200, seed: int = 0) -> float:
    labels = dataset.branch_labels
    return linear_probe_features(
        _features(frozen_params, dataset, train_ids), labels[np.asarray(train_ids)],
        _features(frozen_params, dataset, test_ids), labels[np.asarray(test_ids)],
        classifier_lr, epochs, seed,
    )


# -- retrieval --------------------------------------------------------------

def recall_at_1_features(features, labels, ids: Optional[Sequence[int]] = None) -> float:
    """% of rows whose nearest other row (ties: lowest id) shares the label."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n < 2:
        raise ArgumentError("recall@1 needs at least two samples")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    d = pairwise_sq(x, x)
    np.fill_diagonal(d, np.inf)
    hits = 0
    for i in range(n):
        best = np.flatnonzero(d[i] == d[i].min())
        j = best[np.argmin(ids[best])]
        hits += labels[j] == labels[i]
    return 100.0 * hits / n


def recall_at_1(frozen_params: ModelParams, dataset: Dataset, eval_ids) -> float:
    eval_ids = np.asarray(sorted(eval_ids), dtype=np.int64)
    return recall_at_1_features(_features(frozen_params, dataset, eval_ids), dataset.branch_labels[eval_ids], eval_ids)


def knn_accuracy_features(train_x, train_y, test_x, test_y, k: int,
                          train_ids=None, test_ids=None) -> float:
    """% of test rows whose k-nearest-train majority vote is correct.

    Candidates sharing the query's id are skipped; distance ties go to the
    lower train id and vote ties to the smallest class label.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    train_ids = np.arange(len(train_x)) if train_ids is None else np.asarray(train_ids)
    test_ids = np.full(len(test_x), -1) if test_ids is None else np.asarray(test_ids)
    if not 1 <= k <= len(train_x):
        raise ArgumentError(f"k must lie in [1, {len(train_x)}], got {k}")
    d = pairwise_sq(test_x, train_x)
    correct = 0
    for i in range(len(test_x)):
        keep = train_ids != test_ids[i]
        cand = np.flatnonzero(keep)
        order = cand[np.lexsort((train_ids[cand], d[i, cand]))][:k]
        votes = np.bincount(train_y[order], minlength=int(train_y.max()) + 1)
        correct += int(np.argmax(votes)) == test_y[i]
    return 100.0 * correct / len(test_x)


def knn_accuracy(frozen_params: ModelParams, dataset: Dataset, train_ids, test_ids, k: int = 5) -> float:
    train_ids = np.asarray(sorted(train_ids), dtype=np.int64)
    test_ids = np.asarray(sorted(test_ids), dtype=np.int64)
    labels = dataset.branch_labels
    return knn_accuracy_features(
        _features(frozen_params, dataset, train_ids), labels[train_ids],
        _features(frozen_params, dataset, test_ids), labels[test_ids],
        k, train_ids, test_ids,
    )


# -- runtime ----------------------------------------------------------------

def runtime_report(log_a, log_b) -> float:
    """Relative per-step overhead of run b over run a: median(b) / median(a) - 1."""
    a = np.asarray(log_a.step_seconds if hasattr(log_a, "step_seconds") else log_a, dtype=np.float64)
    b = np.asarray(log_b.step_seconds if hasattr(log_b, "step_seconds") else log_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ArgumentError("runtime_report needs two non-empty logs")
    return float(np.median(b) / np.median(a) - 1.0)
