"""Expert mixing weights from task probabilities, plus a demo classifier.

The weight pipeline: an out-of-distribution gate (if no task probability
reaches the threshold, all weight goes to the pretrain delta), softmax
temperature scaling over all tasks, restriction to the top-k tasks of
the raw probabilities, and optional renormalization of the survivors.

A task named "pretrain" is reserved: its surviving weight is routed to
the pretrain delta instead of an expert.

The demo classifier is a multinomial logistic regression over
caller-supplied feature vectors.  It stands in for a real router so the
pipeline can be exercised end to end; text goes through a hashed
bag-of-tokens featurizer.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    InvalidK,
    NonPositiveBeta,
)

PRETRAIN_TASK = "pretrain"

DEFAULT_FEATURE_DIM = 2048


@dataclass(frozen=True)
class RoutingWeights:
    """Mixing coefficients per task plus the pretrain-delta weight."""

    weights: dict[str, float]
    pretrain_weight: float
    beta: float
    k: int
    ood_triggered: bool

    @property
    def active_tasks(self) -> list[str]:
        return [t for t, w in self.weights.items() if w != 0.0]


def _as_prob_vector(probs) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch("probabilities must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("probabilities must be finite")
    return arr


def temperature_scale(probs, beta: float) -> np.ndarray:
    """Softmax of probs / beta over all tasks; sums to one."""
    if not beta > 0:
        raise NonPositiveBeta(f"beta must be > 0, got {beta}")
    arr = _as_prob_vector(probs) / beta
    arr -= arr.max()
    e = np.exp(arr)
    return e / e.sum()


def select_topk(probs, k: int) -> list[int]:
    """Indices of the k largest probabilities; ties favour lower indices."""
    arr = _as_prob_vector(probs)
    if not 1 <= k <= arr.size:
        raise InvalidK(f"k must be in [1, {arr.size}], got {k}")
    order = np.argsort(-arr, kind="stable")[:k]
    return sorted(int(i) for i in order)


def routing_weights(
    probs,
    tasks: Sequence[str],
    beta: float = 1.5,
    k: int = 2,
    ood_threshold: float = 0.5,
    renormalize: bool = False,
) -> RoutingWeights:
    """Turn a task-probability vector into expert mixing weights.

    ``probs`` may be a vector aligned with ``tasks`` or a mapping from
    task name to probability.  If every probability is below
    ``ood_threshold`` the input is treated as out of distribution and
    the pretrain delta receives full weight.  Otherwise weights are the
    temperature-scaled probabilities restricted to the top-k tasks of
    the raw vector, renormalized to sum to one only when requested.
    """
    tasks = list(tasks)
    if len(set(tasks)) != len(tasks):
        raise ValueError("task names must be unique")
    if isinstance(probs, Mapping):
        unknown = set(probs) - set(tasks)
        if unknown:
            raise ValueError(f"probabilities name unknown tasks: {sorted(unknown)}")
        probs = [float(probs.get(t, 0.0)) for t in tasks]
    arr = _as_prob_vector(probs)
    if arr.size != len(tasks):
        raise DimensionMismatch(f"{arr.size} probabilities for {len(tasks)} tasks")
    if not 1 <= k <= len(tasks):
        raise InvalidK(f"k must be in [1, {len(tasks)}], got {k}")
    if not beta > 0:
        raise NonPositiveBeta(f"beta must be > 0, got {beta}")

    if arr.max() < ood_threshold:
        return RoutingWeights(
            weights={t: 0.0 for t in tasks if t != PRETRAIN_TASK},
            pretrain_weight=1.0,
            beta=beta,
            k=k,
            ood_triggered=True,
        )

    h = temperature_scale(arr, beta)
    keep = set(select_topk(arr, k))
    h = np.array([h[i] if i in keep else 0.0 for i in range(len(tasks))])
    if renormalize:
        h = h / h.sum()
    weights = {t: float(h[i]) for i, t in enumerate(tasks) if t != PRETRAIN_TASK}
    pretrain_weight = float(h[tasks.index(PRETRAIN_TASK)]) if PRETRAIN_TASK in tasks else 0.0
    return RoutingWeights(
        weights=weights,
        pretrain_weight=pretrain_weight,
        beta=beta,
        k=k,
        ood_triggered=False,
    )


# --- demo router --------------------------------------------------------------


@dataclass(frozen=True)
class DemoRouter:
    """Multinomial logistic classifier over numeric feature vectors."""

    weights: np.ndarray  # (n_features, n_classes)
    bias: np.ndarray  # (n_classes,)
    train_losses: tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[1])


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionMismatch("features must be a non-empty (samples, dim) matrix")
    return x


def train_demo_router(
    features, labels, epochs: int = 500, learning_rate: float = 0.1
) -> DemoRouter:
    """Fit the classifier with full-batch gradient descent.

    The step is halved and retried whenever it would increase the
    training cross-entropy, so the recorded loss trace is non-increasing.
    """
    x = _check_features(features)
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateLabels("training needs at least two distinct labels")
    if y.min() < 0:
        raise DegenerateLabels("labels must be non-negative task indices")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    n_classes = int(y.max()) + 1
    m, n_features = x.shape
    onehot = np.zeros((m, n_classes))
    onehot[np.arange(m), y] = 1.0

    w = np.zeros((n_features, n_classes))
    b = np.zeros(n_classes)

    def loss_of(wm, bv) -> float:
        p = _softmax_rows(x @ wm + bv)
        return float(-np.mean(np.log(np.clip(p[np.arange(m), y], 1e-300, None))))

    losses = [loss_of(w, b)]
    for _ in range(epochs):
        p = _softmax_rows(x @ w + b)
        grad_w = x.T @ (p - onehot) / m
        grad_b = (p - onehot).mean(axis=0)
        step = learning_rate
        for _ in range(30):
            new_w, new_b = w - step * grad_w, b - step * grad_b
            new_loss = loss_of(new_w, new_b)
            if new_loss <= losses[-1]:
                break
            step /= 2
        else:
            new_w, new_b, new_loss = w, b, losses[-1]
        w, b = new_w, new_b
        losses.append(new_loss)
    return DemoRouter(weights=w, bias=b, train_losses=tuple(losses))


def demo_router_predict(router: DemoRouter, features) -> np.ndarray:
    """Class probabilities for each feature row; rows sum to one."""
    x = _check_features(features)
    if x.shape[1] != router.n_features:
        raise DimensionMismatch(
            f"router expects {router.n_features} features, got {x.shape[1]}"
        )
    return _softmax_rows(x @ router.weights + router.bias)


# --- text featurizer ----------------------------------------------------------

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def hashed_text_features(texts: Sequence[str], dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Hashed bag-of-tokens features, one L2-normalized row per text.

    Tokenization is lowercase split on non-alphanumerics; each token is
    bucketed by crc32 modulo ``dim`` so the mapping is stable across
    processes.
    """
    if dim < 1:
        raise DimensionMismatch(f"feature dim must be >= 1, got {dim}")
    out = np.zeros((len(texts), dim))
    for row, text in enumerate(texts):
        for token in _TOKEN_SPLIT.split(text.lower()):
            if token:
                out[row, zlib.crc32(token.encode("utf-8")) % dim] += 1.0
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    np.divide(out, norms, out=out, where=norms > 0)
    return out
