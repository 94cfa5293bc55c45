"""Visual correlations from class embeddings: hard/soft assignment and super-classes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from finedet.correlation import CorrelationMatrix
from finedet.errors import ValidationError


@dataclass(frozen=True)
class ClassEmbeddingTable:
    """Ordered class ids with one D-dimensional representation each."""

    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            raise ValidationError("embedding table needs one row per class id")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embedding components must be finite")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate class ids in embedding table")
        vectors.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def select(self, ids) -> "ClassEmbeddingTable":
        index = {c: i for i, c in enumerate(self.ids)}
        missing = [c for c in ids if c not in index]
        if missing:
            raise ValidationError(f"no embedding for classes {missing}")
        return ClassEmbeddingTable(tuple(ids), self.vectors[[index[c] for c in ids]])

    def to_text(self) -> str:
        lines = [f"D {self.dim}"]
        for cid, vec in zip(self.ids, self.vectors):
            lines.append(cid + " " + " ".join(repr(float(x)) for x in vec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassEmbeddingTable":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise ValidationError("empty embedding file")
        head = lines[0].split()
        if len(head) != 2 or head[0] != "D":
            raise ValidationError(f"bad embedding header {lines[0]!r}")
        dim = int(head[1])
        ids, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if len(parts) != dim + 1:
                raise ValidationError(f"embedding line {lineno}: expected {dim} values")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
        return cls(tuple(ids), np.array(rows).reshape(len(ids), dim))


def class_representation(samples) -> np.ndarray:
    """Component-wise mean of per-sample feature vectors."""
    if len(samples) == 0:
        raise ValidationError("class representation needs at least one sample")
    try:
        arr = np.asarray(samples, dtype=np.float64)
    except ValueError:
        raise ValidationError("samples have mismatched dimensions") from None
    if arr.ndim != 2:
        raise ValidationError("samples have mismatched dimensions")
    return arr.mean(axis=0)


def pairwise_distance(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"dimension mismatch {x.shape} vs {y.shape}")
    return float(np.linalg.norm(x - y))


def distance_matrix(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Euclidean distances, shape (n_coarse, n_fine)."""
    coarse, fine = np.asarray(coarse, dtype=np.float64), np.asarray(fine, dtype=np.float64)
    if coarse.shape[1] != fine.shape[1]:
        raise ValidationError("coarse and fine embeddings differ in dimension")
    diff = coarse[:, None, :] - fine[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _check_tables(coarse_emb, fine_emb):
    if len(coarse_emb) == 0 or len(fine_emb) == 0:
        raise ValidationError("embedding tables must be non-empty")
    if coarse_emb.dim != fine_emb.dim:
        raise ValidationError("coarse and fine embeddings differ in dimension")


@dataclass(frozen=True)
class ThresholdRule:
    """Per-coarse-class distance thresholds for hard assignment.

    By default ``theta_i = factor * min_j d_ij``. ``thresholds`` overrides the
    factor rule. With ``nearest`` set every fine class is also linked to its
    closest coarse class, so no fine class is left without attention.
    """

    factor: float = 1.2
    nearest: bool = True
    thresholds: tuple[float, ...] | None = None

    def resolve(self, dist: np.ndarray) -> np.ndarray:
        if self.thresholds is not None:
            theta = np.asarray(self.thresholds, dtype=np.float64)
            if theta.shape != (dist.shape[0],):
                raise ValidationError("need one threshold per coarse class")
            return theta
        return self.factor * dist.min(axis=1)


def hard_assign(coarse_emb: ClassEmbeddingTable, fine_emb: ClassEmbeddingTable,
                threshold_rule: ThresholdRule = ThresholdRule()) -> CorrelationMatrix:
    _check_tables(coarse_emb, fine_emb)
    dist = distance_matrix(coarse_emb.vectors, fine_emb.vectors)
    theta = threshold_rule.resolve(dist)
    values = (dist < theta[:, None]).astype(np.float64)
    if threshold_rule.nearest:
        values[np.argmin(dist, axis=0), np.arange(dist.shape[1])] = 1.0
    return CorrelationMatrix(values, "visual-hard", coarse_emb.ids, fine_emb.ids)


def soft_assign_distances(dist: np.ndarray, beta: float) -> np.ndarray:
    """Column-wise softmax of ``-beta * dist`` (normalized over coarse rows)."""
    if not beta > 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    logits = -beta * dist
    logits = logits - logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True)


def default_beta(coarse_emb: ClassEmbeddingTable, fine_emb: ClassEmbeddingTable) -> float:
    """Inverse median coarse-fine distance; 1.0 if every distance is zero."""
    med = float(np.median(distance_matrix(coarse_emb.vectors, fine_emb.vectors)))
    return 1.0 / med if med > 0 else 1.0


def soft_assign(coarse_emb: ClassEmbeddingTable, fine_emb: ClassEmbeddingTable,
                beta: float | None = None) -> CorrelationMatrix:
    _check_tables(coarse_emb, fine_emb)
    if beta is None:
        beta = default_beta(coarse_emb, fine_emb)
    dist = distance_matrix(coarse_emb.vectors, fine_emb.vectors)
    return CorrelationMatrix(soft_assign_distances(dist, beta), "visual-soft",
                             coarse_emb.ids, fine_emb.ids)


# --- K-means super-classes -------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_trace: tuple[float, ...]
    n_iter: int


def _sq_dist(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(points, k, rng, weights):
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    first = rng.choice(n, p=weights / weights.sum())
    centroids[0] = points[first]
    closest = _sq_dist(points, centroids[:1])[:, 0]
    for c in range(1, k):
        mass = weights * closest
        total = mass.sum()
        # degenerate data: every point already sits on a centroid
        idx = rng.choice(n, p=mass / total) if total > 0 else rng.choice(n)
        centroids[c] = points[idx]
        closest = np.minimum(closest, _sq_dist(points, centroids[c:c + 1])[:, 0])
    return centroids


def lloyd_kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
                 weights=None) -> KMeansResult:
    """Weighted Lloyd iterations from k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its centroid.
    ``weights`` defaults to uniform.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}], got {k}")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValidationError("weights must be non-negative with positive sum")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(points, k, rng, weights)
    trace = []
    labels = np.zeros(n, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(points, centroids)
        labels = np.argmin(d2, axis=1)
        trace.append(float(np.sum(weights * d2[np.arange(n), labels])))
        new = centroids.copy()
        taken: set[int] = set()
        for c in range(k):
            mask = labels == c
            if mask.any() and weights[mask].sum() > 0:
                new[c] = np.average(points[mask], axis=0, weights=weights[mask])
            else:
                far = d2[np.arange(n), labels]
                for idx in np.argsort(-far, kind="stable"):
                    if idx not in taken:
                        break
                taken.add(int(idx))
                new[c] = points[idx]
                labels[idx] = c
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dist(points, centroids)
    labels = np.argmin(d2, axis=1)
    trace.append(float(np.sum(weights * d2[np.arange(n), labels])))
    return KMeansResult(centroids, labels, tuple(trace), it)


@dataclass(frozen=True)
class SuperClassModel:
    centroids: np.ndarray
    coarse_assignment: CorrelationMatrix
    fine_assignment: CorrelationMatrix
    objective_trace: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.centroids)


def kmeans_superclasses(coarse_emb: ClassEmbeddingTable, k: int, seed: int,
                        fine_emb: ClassEmbeddingTable, beta: float | None = None,
                        weights=None) -> SuperClassModel:
    """Cluster coarse representations into ``k`` super-classes.

    Coarse classes map to their nearest centroid (hard); fine classes are
    softly assigned to centroids.
    """
    _check_tables(coarse_emb, fine_emb)
    if not 1 <= k <= len(coarse_emb):
        raise ValidationError(f"k must lie in [1, {len(coarse_emb)}], got {k}")
    res = lloyd_kmeans(coarse_emb.vectors, k, seed=seed, weights=weights)
    super_ids = tuple(f"super{i}" for i in range(k))
    hard = np.zeros((k, len(coarse_emb)))
    hard[res.labels, np.arange(len(coarse_emb))] = 1.0
    centroid_table = ClassEmbeddingTable(super_ids, res.centroids)
    if beta is None:
        beta = default_beta(centroid_table, fine_emb)
    return SuperClassModel(
        res.centroids,
        CorrelationMatrix(hard, "visual-hard", super_ids, coarse_emb.ids),
        soft_assign(centroid_table, fine_emb, beta),
        res.objective_trace,
    )
