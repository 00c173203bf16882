"""Raw representations to K-dimensional cluster-distance embeddings.

Fit on training tiles only: standardize per feature, project with the
minimal number of principal components explaining at least 99% of the
variance, then K-means the projected points. A tile's embedding is its
Euclidean distance to each of the K centroids; the discrete form is the
argmin index. The fitted pipeline is frozen and reused for validation
and test transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arrayfile import read_named_arrays, write_named_arrays
from .errors import ConfigError, DegenerateInputError, DimensionError
from .augment import derive_rng

PIPELINE_MAGIC = b"DPIP"

DEFAULT_K_GRID = (4, 8, 16, 32, 64, 128, 256, 512)

VARIANCE_TARGET = 0.99


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray  # entries < 1e-12 replaced by 1 (constant feature guard)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.mean.shape[0]:
            raise DimensionError(
                f"feature width {x.shape[1]} != fitted width {self.mean.shape[0]}")
        return (x - self.mean) / self.sd


@dataclass(frozen=True)
class PCAModel:
    components: np.ndarray          # (n_components, n_features), orthonormal rows
    explained_variance: np.ndarray  # per kept component
    total_variance: float

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return x @ self.components.T


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray           # (K, n_components)
    inertia: float
    inertia_history: tuple[float, ...]  # per Lloyd iteration of the best restart

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class TileEmbedding:
    tile_id: int
    distances: np.ndarray  # K non-negative reals
    cluster: int           # argmin index, ties to the lowest index


@dataclass(frozen=True)
class EmbeddingPipeline:
    standardizer: Standardizer
    pca: PCAModel
    kmeans: KMeansModel

    @property
    def k(self) -> int:
        return self.kmeans.k


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def fit_standardizer(x: np.ndarray) -> Standardizer:
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return Standardizer(mean=mean, sd=sd)


def fit_pca(x_std: np.ndarray, variance_target: float = VARIANCE_TARGET) -> PCAModel:
    """SVD of the standardized matrix; keeps the minimal component count
    whose cumulative explained-variance ratio reaches the target."""
    n = x_std.shape[0]
    if n < 2:
        raise ConfigError("PCA needs at least 2 rows")
    centered = x_std - x_std.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    variances = svals ** 2 / (n - 1)
    total = float(variances.sum())
    if total <= 0:
        raise DegenerateInputError("zero total variance: all rows identical")
    ratio = np.cumsum(variances) / total
    n_comp = int(np.searchsorted(ratio, variance_target) + 1)
    n_comp = min(n_comp, len(svals))
    components = vt[:n_comp]
    # deterministic sign: largest-magnitude entry of each component positive
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PCAModel(components=components,
                    explained_variance=variances[:n_comp], total_variance=total)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: distance-squared weighted centre choices."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:  # fewer distinct points than centres
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random()))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, tol: float = 1e-6,
           max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    history = []
    labels = np.zeros(len(x), dtype=int)
    for _ in range(max_iter):
        d2 = _sq_distances(x, centroids)
        labels = np.argmin(d2, axis=1)  # ties resolve to the lowest index
        own_d2 = d2[np.arange(len(x)), labels]
        history.append(float(own_d2.sum()))
        new_centroids = centroids.copy()
        empties = []
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                empties.append(j)
        if empties:  # re-seed empty clusters on distinct farthest points
            far = np.argsort(own_d2)[::-1]
            for rank, j in enumerate(empties):
                new_centroids[j] = x[far[rank % len(x)]]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    return centroids, labels, inertia, history


def fit_kmeans(x: np.ndarray, k: int, seed: int, restarts: int = 10,
               tol: float = 1e-6, max_iter: int = 300) -> KMeansModel:
    """Best of `restarts` seeded k-means++ runs by final inertia."""
    if k < 2:
        raise ConfigError("K must be >= 2")
    if x.shape[0] < k:
        raise ConfigError(f"need at least K={k} rows, have {x.shape[0]}")
    best = None
    for r in range(restarts):
        rng = derive_rng(seed, r)
        init = _kmeans_pp_init(x, k, rng)
        centroids, _, inertia, history = _lloyd(x, init, tol, max_iter)
        if best is None or inertia < best[1]:
            best = (centroids, inertia, history)
    centroids, inertia, history = best
    return KMeansModel(centroids=centroids, inertia=inertia,
                       inertia_history=tuple(history))


def fit_pipeline(train_reps: np.ndarray, k: int, seed: int,
                 variance_target: float = VARIANCE_TARGET) -> EmbeddingPipeline:
    """Standardizer, PCA and K-means fitted on training rows only."""
    train_reps = np.asarray(train_reps, dtype=np.float64)
    if train_reps.ndim != 2:
        raise DimensionError("training representations must be a matrix")
    if train_reps.shape[0] < max(k, 2):
        raise ConfigError(
            f"need at least max(K, 2)={max(k, 2)} rows, have {train_reps.shape[0]}")
    std = fit_standardizer(train_reps)
    x_std = std.apply(train_reps)
    pca = fit_pca(x_std, variance_target)
    km = fit_kmeans(pca.project(x_std), k, seed)
    return EmbeddingPipeline(standardizer=std, pca=pca, kmeans=km)


# ---------------------------------------------------------------------------
# Transform
# ---------------------------------------------------------------------------


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |x - c|^2 via the dot-product identity: no (n, m, d) intermediate
    d2 = ((x * x).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)[None, :]
          - 2.0 * x @ centroids.T)
    return np.maximum(d2, 0.0)


def transform(ids: np.ndarray, reps: np.ndarray,
              pipeline: EmbeddingPipeline) -> list[TileEmbedding]:
    """Distance embeddings (and argmin clusters) for raw representations."""
    reps = np.asarray(reps, dtype=np.float64)
    pts = pipeline.pca.project(pipeline.standardizer.apply(reps))
    dists = np.sqrt(_sq_distances(pts, pipeline.kmeans.centroids))
    clusters = np.argmin(dists, axis=1)
    return [TileEmbedding(tile_id=int(t), distances=dists[i], cluster=int(clusters[i]))
            for i, t in enumerate(ids)]


def project_points(reps: np.ndarray, pipeline: EmbeddingPipeline) -> np.ndarray:
    """PCA-space coordinates (the space K-means operated in)."""
    reps = np.asarray(reps, dtype=np.float64)
    return pipeline.pca.project(pipeline.standardizer.apply(reps))


# ---------------------------------------------------------------------------
# Silhouette
# ---------------------------------------------------------------------------


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over points: (b - a) / max(a, b).

    a is the mean distance to the point's own cluster (excluding itself),
    b the smallest mean distance to any other cluster. Singleton clusters
    score 0; coincident clusters fall back to 0 via the max(a, b) = 0
    convention.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ConfigError("silhouette needs at least 2 clusters")
    scores = np.empty(len(points))
    for i in range(len(points)):
        # exact difference form, one row at a time (no n^2 x d intermediate)
        d = np.sqrt(((points - points[i]) ** 2).sum(axis=1))
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            scores[i] = 0.0
            continue
        a = d[own].sum() / (n_own - 1)
        b = min(d[labels == c].mean() for c in uniq if c != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


# ---------------------------------------------------------------------------
# Persistence and CSV
# ---------------------------------------------------------------------------


def save_pipeline(pipeline: EmbeddingPipeline, path) -> None:
    arrays = {
        "standardizer/mean": pipeline.standardizer.mean,
        "standardizer/sd": pipeline.standardizer.sd,
        "pca/components": pipeline.pca.components,
        "pca/explained_variance": pipeline.pca.explained_variance,
        "pca/total_variance": np.array([pipeline.pca.total_variance]),
        "kmeans/centroids": pipeline.kmeans.centroids,
        "kmeans/inertia": np.array([pipeline.kmeans.inertia]),
    }
    write_named_arrays(path, PIPELINE_MAGIC, arrays)


def load_pipeline(path) -> EmbeddingPipeline:
    a = {k: v.astype(np.float64) for k, v in
         read_named_arrays(path, PIPELINE_MAGIC).items()}
    std = Standardizer(mean=a["standardizer/mean"], sd=a["standardizer/sd"])
    pca = PCAModel(components=a["pca/components"],
                   explained_variance=a["pca/explained_variance"],
                   total_variance=float(a["pca/total_variance"][0]))
    km = KMeansModel(centroids=a["kmeans/centroids"],
                     inertia=float(a["kmeans/inertia"][0]), inertia_history=())
    return EmbeddingPipeline(standardizer=std, pca=pca, kmeans=km)


def write_embeddings_csv(embeddings: list[TileEmbedding], path) -> None:
    if not embeddings:
        raise ConfigError("no embeddings to write")
    k = embeddings[0].distances.shape[0]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("tile_id,cluster," + ",".join(f"d{j}" for j in range(k)) + "\n")
        for e in embeddings:
            fh.write(f"{e.tile_id},{e.cluster},"
                     + ",".join(repr(float(v)) for v in e.distances) + "\n")


def read_embeddings_csv(path) -> list[TileEmbedding]:
    out = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:2] != ["tile_id", "cluster"]:
            raise ConfigError("unexpected embeddings CSV header")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            out.append(TileEmbedding(tile_id=int(parts[0]), cluster=int(parts[1]),
                                     distances=np.array([float(v) for v in parts[2:]])))
    return out
