"""Reference comparators: logistic regression and KNN on LAST features, KNN with DTW on the EWS series."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import EARLY_WARNING_SCORE, FeatureSpec, PatientRecord, filter_window
from .numerics import TrainingError
from .tabular import TabularPreprocessor


@dataclass(frozen=True)
class DtwConfig:
    band_radius: int | None = None

    def __post_init__(self):
        if self.band_radius is not None and self.band_radius < 0:
            raise ValueError("band_radius must be nonnegative")


def dtw_distance(a: Sequence[float], b: Sequence[float], band_radius: int | None = None) -> float:
    """sqrt of the minimal accumulated squared difference over monotone alignments.

    Steps are (1,0), (0,1) and (1,1). With a Sakoe-Chiba band only cells with
    |i - j| <= band_radius are allowed; if no alignment fits the band the
    distance is infinite.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance needs two nonempty sequences")
    n, m = a.size, b.size
    cost = (a[:, None] - b[None, :]) ** 2
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = 1, m
        if band_radius is not None:
            lo, hi = max(1, i - band_radius), min(m, i + band_radius)
        for j in range(lo, hi + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return math.sqrt(acc[n, m])


def knn_scores(distances: np.ndarray, train_labels: np.ndarray, k: int) -> np.ndarray:
    """Positive fraction among the k nearest training points for each row of ``distances``.

    Distance ties go to the lower training index.
    """
    distances = np.atleast_2d(distances)
    if not 1 <= k <= distances.shape[1]:
        raise ValueError(f"k={k} must lie in 1..{distances.shape[1]}")
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :k]
    return np.asarray(train_labels, dtype=np.float64)[nearest].mean(axis=1)


def knn_predict(train_features: np.ndarray, train_labels, query: np.ndarray, k: int = 5) -> float:
    """Uniform-weight KNN score for one query under Euclidean distance."""
    diff = np.asarray(train_features, dtype=np.float64) - np.asarray(query, dtype=np.float64)
    return float(knn_scores(np.sqrt((diff**2).sum(axis=1)), np.asarray(train_labels), k)[0])


def pairwise_euclidean(queries: np.ndarray, train: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - train[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_regression(features: np.ndarray, labels, l2: float = 1e-2, epochs: int = 1000, lr: float = 0.1,
                        seed: int = 0, batch_size: int | None = None) -> tuple[np.ndarray, float]:
    """Gradient descent on mean log loss + (l2 / 2) * ||w||^2 from a zero start.

    Full-batch by default; with ``batch_size`` the mini-batch order is drawn from ``seed``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0 or y.min() == y.max():
        raise TrainingError("logistic regression needs both classes")
    w = np.zeros(x.shape[1])
    b = 0.0
    rng = np.random.default_rng(seed)
    n = y.size
    for _ in range(epochs):
        batches = [np.arange(n)] if batch_size is None else np.array_split(rng.permutation(n), max(1, n // batch_size))
        for idx in batches:
            err = sigmoid(x[idx] @ w + b) - y[idx]
            w -= lr * (x[idx].T @ err / idx.size + l2 * w)
            b -= lr * float(err.mean())
    return w, b


def logistic_predict(features: np.ndarray, weights: np.ndarray, intercept: float) -> np.ndarray:
    return sigmoid(np.asarray(features, dtype=np.float64) @ weights + intercept)


class LastFeaturizer:
    """Standardized LAST values (missing -> 0) with missingness indicators; one-hot categories."""

    def __init__(self, schema: Sequence[FeatureSpec]):
        self.preprocessor = TabularPreprocessor(schema)

    def fit(self, records: Sequence[PatientRecord]) -> "LastFeaturizer":
        self.preprocessor.fit(records)
        return self

    def transform(self, records: Sequence[PatientRecord]) -> np.ndarray:
        batch = self.preprocessor.transform(records)
        blocks = [batch.values, 1.0 - batch.observed]
        for j, spec in enumerate(self.preprocessor.categorical):
            # the last column is the missing slot, i.e. the missingness indicator
            onehot = np.zeros((len(records), len(spec.categories) + 1))
            onehot[np.arange(len(records)), batch.categories[:, j]] = 1.0
            blocks.append(onehot)
        return np.hstack(blocks)


class _LastPredictor:
    def __init__(self, featurizer: LastFeaturizer, tau: float):
        self.featurizer = featurizer
        self.tau = tau

    def features(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return self.featurizer.transform([filter_window(r, self.tau) for r in records])


class LogisticPredictor(_LastPredictor):
    def __init__(self, featurizer, tau, weights, intercept):
        super().__init__(featurizer, tau)
        self.weights = weights
        self.intercept = intercept

    def predict_proba(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return logistic_predict(self.features(records), self.weights, self.intercept)


class KnnPredictor(_LastPredictor):
    def __init__(self, featurizer, tau, train_features, train_labels, k):
        super().__init__(featurizer, tau)
        self.train_features = train_features
        self.train_labels = train_labels
        self.k = k

    def predict_proba(self, records: Sequence[PatientRecord]) -> np.ndarray:
        distances = pairwise_euclidean(self.features(records), self.train_features)
        return knn_scores(distances, self.train_labels, self.k)


def ews_series(record: PatientRecord, tau: float) -> np.ndarray:
    obs = filter_window(record, tau).auxiliary.get(EARLY_WARNING_SCORE, ())
    return np.array([float(o.value) for o in obs])


class KnnDtwPredictor:
    """KNN over early-warning-score series; a record without in-window scores is infinitely far from all."""

    def __init__(self, series: list[np.ndarray], labels: np.ndarray, k: int, tau: float, band_radius: int | None):
        self.series = series
        self.labels = labels
        self.k = k
        self.tau = tau
        self.band_radius = band_radius

    def _distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.size == 0 or b.size == 0:
            return math.inf
        return dtw_distance(a, b, self.band_radius)

    def predict_proba(self, records: Sequence[PatientRecord]) -> np.ndarray:
        queries = [ews_series(r, self.tau) for r in records]
        distances = np.array([[self._distance(q, s) for s in self.series] for q in queries])
        return knn_scores(distances.reshape(len(queries), len(self.series)), self.labels, self.k)


def _labels(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


@dataclass(frozen=True)
class LogisticLearner:
    l2: float = 1e-2
    epochs: int = 1000
    lr: float = 0.1
    seed: int = 0
    tau: float = 24.0
    name: str = "lr"

    def fit(self, records, schema) -> LogisticPredictor:
        windowed = [filter_window(r, self.tau) for r in records]
        featurizer = LastFeaturizer(schema).fit(windowed)
        w, b = logistic_regression(featurizer.transform(windowed), _labels(records), self.l2, self.epochs, self.lr,
                                   self.seed)
        return LogisticPredictor(featurizer, self.tau, w, b)


@dataclass(frozen=True)
class KnnLearner:
    k: int = 5
    tau: float = 24.0
    name: str = "knn-unif"

    def fit(self, records, schema) -> KnnPredictor:
        windowed = [filter_window(r, self.tau) for r in records]
        featurizer = LastFeaturizer(schema).fit(windowed)
        return KnnPredictor(featurizer, self.tau, featurizer.transform(windowed), _labels(records), self.k)


@dataclass(frozen=True)
class KnnDtwLearner:
    k: int = 5
    band_radius: int | None = None
    tau: float = 24.0
    name: str = "knn-dtw"

    def fit(self, records, schema) -> KnnDtwPredictor:
        series = [ews_series(r, self.tau) for r in records]
        return KnnDtwPredictor(series, _labels(records), self.k, self.tau, self.band_radius)
