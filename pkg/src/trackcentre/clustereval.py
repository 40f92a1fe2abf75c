"""Hierarchical agglomerative clustering and clustering quality metrics.

HAC supports single/complete/average linkage over Euclidean distances with
two stopping rules: a known cluster count, or a merge-height threshold.
Metrics: NMI (arithmetic normalisation, natural logs), weighted clustering
purity, cluster-count difference, and the S-Dbw internal validity index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINKAGES = ("single", "complete", "average")


class ClusterError(Exception):
    pass


@dataclass(frozen=True)
class KnownK:
    k: int


@dataclass(frozen=True)
class Threshold:
    t: float


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]  # per input vector, 0..k-1
    k: int
    # (height, member_index_a, member_index_b) per merge, in merge order;
    # members identified by their smallest original index.
    merges: tuple[tuple[float, int, int], ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


def hac(vectors, linkage: str = "average", stop=None) -> ClusterAssignment:
    """Agglomerative clustering of row vectors under Euclidean distance.

    Ties between equal-height merge candidates are broken by the lowest
    (min_index_a, min_index_b) pair so results are deterministic.
    """
    if linkage not in LINKAGES:
        raise ClusterError(f"unknown linkage {linkage!r}")
    if stop is None:
        raise ClusterError("stop criterion required: KnownK(k) or Threshold(t)")
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ClusterError("need a non-empty 2-D array of vectors")
    m = x.shape[0]
    if isinstance(stop, KnownK):
        if not (1 <= stop.k <= m):
            raise ClusterError(f"k={stop.k} outside [1, {m}]")
        target_k, threshold = stop.k, None
    elif isinstance(stop, Threshold):
        target_k, threshold = 1, float(stop.t)
    else:
        raise ClusterError(f"unsupported stop criterion {stop!r}")

    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)

    # Active clusters: representative = smallest member index.
    members: dict[int, list[int]] = {i: [i] for i in range(m)}
    d = dist.copy()
    merges: list[tuple[float, int, int]] = []

    while len(members) > target_k:
        h = d.min()
        ties = np.argwhere(d == h)
        ties = ties[ties[:, 0] < ties[:, 1]]
        a, b = min((int(r), int(c)) for r, c in ties)
        if threshold is not None and h > threshold:
            break
        merges.append((float(h), a, b))
        na, nb = len(members[a]), len(members[b])
        for c in members:
            if c in (a, b):
                continue
            if linkage == "single":
                nd = min(d[a, c], d[b, c])
            elif linkage == "complete":
                nd = max(d[a, c], d[b, c])
            else:
                nd = (na * d[a, c] + nb * d[b, c]) / (na + nb)
            d[a, c] = d[c, a] = nd
        members[a].extend(members[b])
        del members[b]
        d[b, :] = np.inf
        d[:, b] = np.inf

    reps = sorted(members)
    labels = np.empty(m, dtype=np.int64)
    for lab, rep in enumerate(reps):
        labels[members[rep]] = lab
    return ClusterAssignment(
        labels=tuple(int(v) for v in labels),
        k=len(reps),
        merges=tuple(merges),
    )


def _contingency(pred, truth) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ClusterError(
            f"partition universes differ: {pred.shape} vs {truth.shape}"
        )
    if pred.size == 0:
        raise ClusterError("empty partitions")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def nmi(pred, truth) -> float:
    """Normalised mutual information, 2 I(Y,P) / (H(P) + H(Y)), natural logs.

    Defined as 1.0 when both partitions are single-cluster, and 0.0 when
    the mutual information is zero.
    """
    table = _contingency(pred, truth)
    n = table.sum()
    pj = table.sum(axis=1) / n
    tj = table.sum(axis=0) / n
    hp = -np.sum(pj[pj > 0] * np.log(pj[pj > 0]))
    ht = -np.sum(tj[tj > 0] * np.log(tj[tj > 0]))
    if hp == 0.0 and ht == 0.0:
        return 1.0
    p = table / n
    nz = p > 0
    outer = pj[:, None] * tj[None, :]
    mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))
    if mi <= 0.0:
        return 0.0
    return float(2.0 * mi / (hp + ht))


def wcp(pred, truth) -> float:
    """Weighted clustering purity: size-weighted majority-class fraction."""
    table = _contingency(pred, truth)
    return float(table.max(axis=1).sum() / table.sum())


def c_dif(pred_k: int, true_k: int) -> int:
    """Absolute difference between predicted and true cluster counts."""
    if pred_k < 1 or true_k < 1:
        raise ClusterError("cluster counts must be >= 1")
    return abs(pred_k - true_k)


def sdbw(vectors, labels) -> float:
    """S-Dbw validity index (scattering + inter-cluster density); lower is
    better.  Requires at least two non-empty clusters."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    k = len(uniq)
    if k < 2:
        raise ClusterError("S-Dbw undefined for k<2")

    clusters = [x[labels == u] for u in uniq]
    centroids = np.array([c.mean(axis=0) for c in clusters])
    var_all = x.var(axis=0)  # per-dimension, biased
    norm_all = np.linalg.norm(var_all)
    cluster_var_norms = np.array(
        [np.linalg.norm(c.var(axis=0)) for c in clusters]
    )
    scat = float(cluster_var_norms.mean() / norm_all) if norm_all > 0 else 0.0

    stdev = float(np.sqrt(cluster_var_norms).mean())

    def density(point, pts) -> int:
        return int((np.linalg.norm(pts - point, axis=1) <= stdev).sum())

    dens_terms = []
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            union = np.vstack([clusters[i], clusters[j]])
            mid = 0.5 * (centroids[i] + centroids[j])
            denom = max(density(centroids[i], union), density(centroids[j], union))
            num = density(mid, union)
            dens_terms.append(num / denom if denom > 0 else 0.0)
    dens_bw = float(np.mean(dens_terms))
    return scat + dens_bw
