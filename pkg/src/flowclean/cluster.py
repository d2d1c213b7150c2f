"""Unsupervised flow grouping: K-means and agglomerative hierarchical.

Both algorithms run on standardized feature matrices and report
centroids in the raw feature scale as well, so selection rules can be
written against literal byte counts and ratios. K-means is the fast
path; hierarchical clustering (Ward by default) trades speed for
merge-quality and needs no seed.

Determinism contract: identical inputs, k, seed, and tolerance yield
bit-identical assignments and centroids. Nearest-centroid ties go to
the lowest cluster id; hierarchical merge ties go to the smallest
(i, j) cluster pair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, TooFewRows
from .features import CLUSTER_FEATURES, FeatureMatrix, destandardize
from .rng import SplitMix64

# naive hierarchical keeps the full distance matrix argmin-scanned per
# merge; beyond this row count the nearest-neighbor-chain path wins
NAIVE_HIER_MAX_ROWS = 400


class Algorithm(Enum):
    KMEANS = "kmeans"
    HIERARCHICAL = "hier"


class Linkage(Enum):
    WARD = "ward"
    AVERAGE = "average"
    COMPLETE = "complete"


@dataclass
class ClusterModel:
    """Result of one clustering run.

    centroids_std lives in the space the algorithm ran in;
    centroids_raw is the same matrix mapped back to raw feature scale
    (identical when the input was not standardized).
    """

    algorithm: Algorithm
    k: int
    assignments: np.ndarray
    centroids_std: np.ndarray
    centroids_raw: np.ndarray
    sse: float
    seed: int = 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _coerce(matrix: FeatureMatrix | np.ndarray) -> tuple[np.ndarray, FeatureMatrix | None]:
    if isinstance(matrix, FeatureMatrix):
        return matrix.values, matrix
    values = np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatch("matrix must be 2-D")
    return values, None


def _to_raw(centroids: np.ndarray, fm: FeatureMatrix | None) -> np.ndarray:
    if fm is not None and fm.standardized:
        return destandardize(centroids, fm)
    return centroids.copy()


def sse(values: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    """Sum of squared distances from each row to its assigned centroid."""
    values = np.asarray(values, dtype=np.float64)
    assignments = np.asarray(assignments)
    centroids = np.asarray(centroids, dtype=np.float64)
    if values.ndim != 2 or centroids.ndim != 2:
        raise ShapeMismatch("values and centroids must be 2-D")
    if values.shape[1] != centroids.shape[1]:
        raise ShapeMismatch("column counts differ")
    if assignments.shape != (values.shape[0],):
        raise ShapeMismatch("one assignment per row required")
    if len(assignments) and (
        assignments.min() < 0 or assignments.max() >= centroids.shape[0]
    ):
        raise ShapeMismatch("assignment out of centroid range")
    diff = values - centroids[assignments]
    return float(np.einsum("ij,ij->", diff, diff))


def _sq_dists(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, rows x centroids, clamped at 0."""
    cross = values @ centroids.T
    sq_v = np.einsum("ij,ij->i", values, values)[:, None]
    sq_c = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    return np.maximum(sq_v - 2.0 * cross + sq_c, 0.0)


def _kmeanspp_init(values: np.ndarray, k: int, rng: SplitMix64) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared distance."""
    n = values.shape[0]
    centers = [rng.next_below(n)]
    diff = values - values[centers[0]]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            cand = rng.next_below(n)
        else:
            r = rng.random() * total
            cand = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            cand = min(cand, n - 1)
        centers.append(cand)
        diff = values - values[cand]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return values[np.array(centers)].astype(np.float64, copy=True)


def kmeans(
    matrix: FeatureMatrix | np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by donating the point currently
    farthest from its own centroid. The within-cluster SSE after each
    centroid update is asserted non-increasing.
    """
    values, fm = _coerce(matrix)
    n = values.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise TooFewRows(f"{n} rows < k={k}")

    rng = SplitMix64(seed)
    centroids = _kmeanspp_init(values, k, rng)
    assign = np.zeros(n, dtype=np.int64)
    prev_sse = np.inf
    for _ in range(max_iter):
        d2 = _sq_dists(values, centroids)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for cid in range(k):
            if counts[cid] == 0:
                # donate the worst-fitting point of a multi-member cluster
                own = d2[np.arange(n), assign]
                donor = int(np.argmax(np.where(counts[assign] > 1, own, -1.0)))
                counts[assign[donor]] -= 1
                assign[donor] = cid
                counts[cid] = 1
        new_centroids = np.empty_like(centroids)
        for cid in range(k):
            new_centroids[cid] = values[assign == cid].mean(axis=0)
        cur_sse = sse(values, assign, new_centroids)
        assert cur_sse <= prev_sse + 1e-9, "SSE increased during Lloyd iteration"
        prev_sse = cur_sse
        shift = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if shift < tol:
            break
    return ClusterModel(
        algorithm=Algorithm.KMEANS,
        k=k,
        assignments=assign,
        centroids_std=centroids,
        centroids_raw=_to_raw(centroids, fm),
        sse=prev_sse,
        seed=seed,
    )


def _pair_matrix(values: np.ndarray, squared: bool) -> np.ndarray:
    d2 = _sq_dists(values, values)
    np.fill_diagonal(d2, np.inf)
    return d2 if squared else np.sqrt(d2)


def _lw_update(
    linkage: Linkage,
    d_ik: np.ndarray,
    d_jk: np.ndarray,
    d_ij: float,
    s_i: float,
    s_j: float,
    s_k: np.ndarray,
) -> np.ndarray:
    """Lance-Williams distance from merged cluster (i u j) to others k."""
    if linkage is Linkage.WARD:
        denom = s_i + s_j + s_k
        return ((s_i + s_k) * d_ik + (s_j + s_k) * d_jk - s_k * d_ij) / denom
    if linkage is Linkage.AVERAGE:
        return (s_i * d_ik + s_j * d_jk) / (s_i + s_j)
    return np.maximum(d_ik, d_jk)


def _groups_to_model(
    values: np.ndarray,
    fm: FeatureMatrix | None,
    groups: list[list[int]],
) -> ClusterModel:
    # stable ids: clusters ordered by their smallest member row
    groups = sorted(groups, key=min)
    k = len(groups)
    assign = np.empty(values.shape[0], dtype=np.int64)
    centroids = np.empty((k, values.shape[1]), dtype=np.float64)
    for cid, members in enumerate(groups):
        assign[members] = cid
        centroids[cid] = values[members].mean(axis=0)
    return ClusterModel(
        algorithm=Algorithm.HIERARCHICAL,
        k=k,
        assignments=assign,
        centroids_std=centroids,
        centroids_raw=_to_raw(centroids, fm),
        sse=sse(values, assign, centroids),
    )


def _hier_naive(values: np.ndarray, k: int, linkage: Linkage) -> list[list[int]]:
    n = values.shape[0]
    dist = _pair_matrix(values, squared=linkage is Linkage.WARD)
    sizes = np.ones(n, dtype=np.float64)
    members: list[list[int] | None] = [[i] for i in range(n)]
    remaining = n
    while remaining > k:
        # row-major argmin = lexicographically smallest (i, j) tie-break
        flat = int(np.argmin(dist))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        d_ij = dist[i, j]
        others = np.array(
            [c for c in range(n) if members[c] is not None and c not in (i, j)],
            dtype=np.int64,
        )
        if others.size:
            dist[i, others] = _lw_update(
                linkage,
                dist[i, others],
                dist[j, others],
                d_ij,
                sizes[i],
                sizes[j],
                sizes[others],
            )
            dist[others, i] = dist[i, others]
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        dist[i, i] = np.inf
        members[i].extend(members[j])  # type: ignore[union-attr]
        members[j] = None
        sizes[i] += sizes[j]
        remaining -= 1
    return [m for m in members if m is not None]


def _hier_nnchain(values: np.ndarray, k: int, linkage: Linkage) -> list[list[int]]:
    """Nearest-neighbor-chain agglomeration.

    Builds the full merge sequence by following reciprocal-nearest-
    neighbor chains, then replays the merges in ascending height order
    (stable on ties) and cuts after n - k of them. On tie-free data
    the resulting partition matches the naive matrix scan.
    """
    n = values.shape[0]
    dist = _pair_matrix(values, squared=linkage is Linkage.WARD)
    sizes = np.ones(n, dtype=np.float64)
    alive = np.ones(n, dtype=bool)
    merges: list[tuple[float, int, int]] = []
    chain: list[int] = []
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(alive)[0]))
        x = chain[-1]
        row = np.where(alive, dist[x], np.inf)
        row[x] = np.inf
        y = int(np.argmin(row))
        if len(chain) >= 2 and y == chain[-2]:
            chain.pop()
            chain.pop()
            a, b = (x, y) if x < y else (y, x)
            d_ab = dist[a, b]
            merges.append((float(d_ab), a, b))
            others = alive.copy()
            others[a] = others[b] = False
            idx = np.flatnonzero(others)
            if idx.size:
                dist[a, idx] = _lw_update(
                    linkage,
                    dist[a, idx],
                    dist[b, idx],
                    d_ab,
                    sizes[a],
                    sizes[b],
                    sizes[idx],
                )
                dist[idx, a] = dist[a, idx]
            sizes[a] += sizes[b]
            alive[b] = False
        else:
            chain.append(y)

    order = sorted(range(len(merges)), key=lambda m: merges[m][0])
    parent = list(range(n))

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    for m in order[: n - k]:
        _, a, b = merges[m]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    groups: dict[int, list[int]] = {}
    for point in range(n):
        groups.setdefault(find(point), []).append(point)
    return list(groups.values())


def merge_heights(
    matrix: FeatureMatrix | np.ndarray, linkage: Linkage = Linkage.WARD
) -> list[float]:
    """Linkage distances of the full merge sequence, in merge order.

    Ward heights are non-decreasing (monotone linkage); a decrease
    would mean a broken Lance-Williams update.
    """
    values, _ = _coerce(matrix)
    n = values.shape[0]
    if n < 2:
        return []
    dist = _pair_matrix(values, squared=linkage is Linkage.WARD)
    sizes = np.ones(n, dtype=np.float64)
    members: list[list[int] | None] = [[i] for i in range(n)]
    heights: list[float] = []
    for _ in range(n - 1):
        flat = int(np.argmin(dist))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        d_ij = dist[i, j]
        heights.append(float(d_ij))
        others = np.array(
            [c for c in range(n) if members[c] is not None and c not in (i, j)],
            dtype=np.int64,
        )
        if others.size:
            dist[i, others] = _lw_update(
                linkage, dist[i, others], dist[j, others], d_ij,
                sizes[i], sizes[j], sizes[others],
            )
            dist[others, i] = dist[i, others]
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        dist[i, i] = np.inf
        members[i].extend(members[j])  # type: ignore[union-attr]
        members[j] = None
        sizes[i] += sizes[j]
    return heights


def hierarchical(
    matrix: FeatureMatrix | np.ndarray,
    k: int,
    linkage: Linkage = Linkage.WARD,
    method: str = "auto",
) -> ClusterModel:
    """Agglomerative clustering cut at k clusters.

    method selects the internal engine: "naive" scans the full
    distance matrix per merge, "nn-chain" follows nearest-neighbor
    chains (much faster for large inputs), "auto" picks by size. Both
    engines produce identical partitions on tie-free data.
    """
    values, fm = _coerce(matrix)
    n = values.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise TooFewRows(f"{n} rows < k={k}")
    if method == "auto":
        method = "naive" if n <= NAIVE_HIER_MAX_ROWS else "nn-chain"
    if method == "naive":
        groups = _hier_naive(values, k, linkage)
    elif method == "nn-chain":
        groups = _hier_nnchain(values, k, linkage)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _groups_to_model(values, fm, groups)


CLUSTER_REPORT_HEADER = ["cluster_id", "size"] + list(CLUSTER_FEATURES)


def write_cluster_report(model: ClusterModel, file: str | Path) -> None:
    """CSV of per-cluster sizes and raw-scale centroids."""
    sizes = model.sizes()
    with open(file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CLUSTER_REPORT_HEADER)
        for cid in range(model.k):
            row = [cid, int(sizes[cid])]
            row += [repr(float(x)) for x in model.centroids_raw[cid]]
            writer.writerow(row)


def write_assignments(
    model: ClusterModel, flow_ids: list[int], file: str | Path
) -> None:
    """CSV mapping each flow id to its cluster id."""
    if len(flow_ids) != len(model.assignments):
        raise ShapeMismatch("flow_ids length differs from assignments")
    with open(file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flow_id", "cluster_id"])
        for fid, cid in zip(flow_ids, model.assignments):
            writer.writerow([fid, int(cid)])
