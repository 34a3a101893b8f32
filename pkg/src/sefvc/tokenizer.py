"""K-means codebooks over self-supervised frame features.

Features come from any upstream extractor as ``(frames, dim)`` matrices at a
20 ms hop. :class:`ToyFeatureExtractor` provides a deterministic stand-in so
the pipeline runs without a pretrained speech model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import sparse
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .audio import Waveform, log_mel
from .exceptions import InsufficientDataError, ShapeError, TensorFileError
from .tensorfile import read_tensor, write_tensor

FEATURE_DIM = 1024
DEFAULT_K = 2000
_CHUNK = 4096


@dataclass
class FeatureMatrix:
    values: np.ndarray
    source_id: str = ""
    hop_ms: int = 20

    def __post_init__(self):
        self.values = check_array(self.values, dtype=np.float32, ensure_2d=True, ensure_min_samples=1)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        tf = read_tensor(path)
        if tf.values.ndim != 2:
            raise ShapeError(f"{path}: feature file must be 2-D, got shape {tf.shape}")
        return cls(tf.values, source_id=tf.meta.get("source_id", str(path)), hop_ms=tf.meta.get("hop_ms", 20))

    def save(self, path) -> None:
        write_tensor(path, self.values, {"source_id": self.source_id, "hop_ms": self.hop_ms})


@dataclass
class Codebook:
    centroids: np.ndarray
    seed: int = 0
    inertia: float = 0.0
    n_iter: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ShapeError(f"codebook needs at least 2 centroids, got shape {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook contains non-finite centroids")
        if np.unique(self.centroids, axis=0).shape[0] != self.centroids.shape[0]:
            raise ValueError("codebook contains duplicate centroids")

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def d(self) -> int:
        return int(self.centroids.shape[1])

    def header(self) -> dict:
        return {"k": self.k, "d": self.d, "seed": self.seed, "inertia": float(self.inertia), "n_iter": self.n_iter, **self.meta}

    def save(self, path) -> None:
        write_tensor(path, self.centroids, self.header())

    @classmethod
    def load(cls, path) -> "Codebook":
        tf = read_tensor(path)
        if tf.values.ndim != 2:
            raise TensorFileError(f"{path}: codebook must be 2-D")
        extra = {k: v for k, v in tf.meta.items() if k not in ("k", "d", "seed", "inertia", "n_iter")}
        return cls(tf.values, int(tf.meta.get("seed", 0)), float(tf.meta.get("inertia", 0.0)), int(tf.meta.get("n_iter", 0)), extra)


def _sq_distances(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d2, 0.0)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of the closest centroid for every row.

    Candidates within rounding distance of the best expanded-form distance
    are rescored exactly, so exact ties resolve to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    c_sq = (c * c).sum(axis=1)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dists = np.empty(x.shape[0], dtype=np.float64)
    for start in range(0, x.shape[0], _CHUNK):
        xb = x[start : start + _CHUNK]
        d2 = _sq_distances(xb, c, c_sq)
        best = d2.min(axis=1)
        scale = (xb * xb).sum(axis=1) + c_sq.max()
        near = d2 <= (best + 1e-9 * scale + 1e-300)[:, None]
        lab = d2.argmin(axis=1)
        ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
        for i in ambiguous:
            idx = np.flatnonzero(near[i])
            exact = ((c[idx] - xb[i]) ** 2).sum(axis=1)
            lab[i] = idx[np.flatnonzero(exact == exact.min())[0]]
        labels[start : start + _CHUNK] = lab
        dists[start : start + _CHUNK] = ((xb - c[lab]) ** 2).sum(axis=1)
    return labels, dists


def _kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a chosen centre
            choice = rng.integers(n)
        else:
            choice = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            choice = min(choice, n - 1)
        centers[j] = x[choice]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def lloyd_kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4):
    """Lloyd iterations from a k-means++ start.

    Stops when the relative change in inertia drops below ``tol``. An empty
    cluster is re-seeded with the point farthest from its current centroid.
    Returns ``(centroids, labels, inertia, n_iter)``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_plusplus(x, k, rng)
    prev = np.inf
    inertia = np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, dists = nearest_centroid(x, centers)
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            order = iter(np.argsort(-dists, kind="stable"))
            for j in empty:
                for i in order:
                    if counts[labels[i]] > 1:
                        counts[labels[i]] -= 1
                        labels[i] = j
                        counts[j] = 1
                        break
        onehot = sparse.csr_matrix((np.ones(x.shape[0]), (labels, np.arange(x.shape[0]))), shape=(k, x.shape[0]))
        sums = onehot @ x
        centers = sums / counts[:, None]
        labels, dists = nearest_centroid(x, centers)
        inertia = float(dists.sum())
        if inertia == 0.0 or (np.isfinite(prev) and abs(prev - inertia) <= tol * prev):
            break
        prev = inertia
    return centers, labels, inertia, n_iter


class KMeansCodebook(ClusterMixin, TransformerMixin, BaseEstimator):
    """K-means quantiser with a scikit-learn interface.

    ``predict`` returns token ids; ``transform`` returns squared distances to
    every centroid.

    >>> km = KMeansCodebook(n_clusters=2, random_state=0).fit([[0.0], [0.1], [5.0], [5.1]])
    >>> sorted(km.predict([[0.05], [5.05]]).tolist())
    [0, 1]
    """

    def __init__(self, n_clusters: int = DEFAULT_K, random_state: int = 0, max_iter: int = 100, tol: float = 1e-4):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = self._stack(X)
        if self.n_clusters < 2:
            raise ValueError(f"n_clusters must be >= 2, got {self.n_clusters}")
        n_distinct = np.unique(X, axis=0).shape[0]
        if n_distinct < self.n_clusters:
            raise InsufficientDataError(
                f"{n_distinct} distinct frames cannot support {self.n_clusters} clusters"
            )
        centers, labels, inertia, n_iter = lloyd_kmeans(X, self.n_clusters, self.random_state, self.max_iter, self.tol)
        self.cluster_centers_ = centers.astype(np.float32)
        self.labels_ = labels
        self.inertia_ = inertia
        self.n_iter_ = n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = self._check_dim(X)
        return nearest_centroid(X, self.cluster_centers_)[0]

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = self._check_dim(X)
        c = self.cluster_centers_.astype(np.float64)
        return _sq_distances(X.astype(np.float64), c, (c * c).sum(axis=1))

    def to_codebook(self) -> Codebook:
        check_is_fitted(self, "cluster_centers_")
        return Codebook(self.cluster_centers_, self.random_state, self.inertia_, self.n_iter_)

    @classmethod
    def from_codebook(cls, cb: Codebook) -> "KMeansCodebook":
        km = cls(n_clusters=cb.k, random_state=cb.seed)
        km.cluster_centers_ = cb.centroids
        km.inertia_ = cb.inertia
        km.n_iter_ = cb.n_iter
        km.n_features_in_ = cb.d
        return km

    def _check_dim(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"feature dim {X.shape[1]} does not match codebook dim {self.n_features_in_}")
        return X

    @staticmethod
    def _stack(X) -> np.ndarray:
        if isinstance(X, FeatureMatrix):
            X = X.values
        elif isinstance(X, (list, tuple)) and X and isinstance(X[0], FeatureMatrix):
            X = np.concatenate([f.values for f in X], axis=0)
        return check_array(X, dtype=np.float64)


def fit_codebook(features: Iterable[FeatureMatrix] | np.ndarray, k: int = DEFAULT_K, seed: int = 0) -> Codebook:
    return KMeansCodebook(n_clusters=k, random_state=seed).fit(list(features) if not isinstance(features, np.ndarray) else features).to_codebook()


def quantize(features: FeatureMatrix | np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest-centroid token ids for every frame (ties -> lowest index)."""
    values = features.values if isinstance(features, FeatureMatrix) else check_array(features, dtype=np.float64)
    if values.shape[1] != cb.d:
        raise ShapeError(f"feature dim {values.shape[1]} does not match codebook dim {cb.d}")
    return nearest_centroid(values, cb.centroids)[0]


class ToyFeatureExtractor(TransformerMixin, BaseEstimator):
    """Deterministic frame features: 20 ms log-mel plus deltas, randomly projected.

    Stands in for a pretrained self-supervised model. The projection matrix
    depends only on ``random_state`` and ``n_features``.
    """

    def __init__(self, n_features: int = FEATURE_DIM, n_mels: int = 80, random_state: int = 0):
        self.n_features = n_features
        self.n_mels = n_mels
        self.random_state = random_state

    def fit(self, X=None, y=None):
        return self

    def _projection(self) -> np.ndarray:
        rng = np.random.default_rng(self.random_state)
        return rng.standard_normal((2 * self.n_mels, self.n_features)) / np.sqrt(2 * self.n_mels)

    def extract(self, w: Waveform) -> FeatureMatrix:
        with torch.no_grad():
            mel = log_mel(torch.from_numpy(w.samples).double(), 20, self.n_mels).numpy()
        padded = np.pad(mel, ((1, 1), (0, 0)), mode="edge")
        delta = 0.5 * (padded[2:] - padded[:-2])
        stacked = np.concatenate([mel, delta], axis=1)
        return FeatureMatrix((stacked @ self._projection()).astype(np.float32), source_id=w.source_id)

    def transform(self, X):
        if isinstance(X, Waveform):
            return self.extract(X).values
        return [self.extract(w).values for w in X]

    def get_config(self) -> dict:
        return {"kind": "toy", **self.get_params()}


def load_feature_dir(directory) -> list[FeatureMatrix]:
    paths = sorted(Path(directory).glob("*.tensor"))
    if not paths:
        raise InsufficientDataError(f"no .tensor feature files in {directory}")
    return [FeatureMatrix.load(p) for p in paths]


def tokens_for(features: Sequence[FeatureMatrix], cb: Codebook) -> list[np.ndarray]:
    return [quantize(f, cb) for f in features]
