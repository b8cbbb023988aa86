"""Two-way clustering of explanation maps.

Every image is described by one map per prototype of its class. Those maps
can be clustered one view at a time (spectral clustering on a single
vector per image) or jointly with pairwise co-regularized spectral
clustering, which nudges the spectral embeddings of all views towards each
other before k-means runs on one consensus embedding.

Results never depend on the order in which images are supplied: rows are
put in a canonical (lexicographic) order before any computation and the
k-means seed is derived from the data content.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .tensor import resize_bilinear

log = logging.getLogger(__name__)

__all__ = [
    "VIEW_MODES",
    "ViewSet",
    "build_views",
    "gaussian_affinity",
    "normalized_laplacian",
    "spectral_embedding",
    "spectral_cluster",
    "CoRegResult",
    "coreg_consensus_cluster",
    "ClusterResult",
    "score_confusion",
    "score_clustering",
    "write_cluster_outputs",
]

VIEW_MODES = ("per_prototype", "summed_concat", "lrp_single")
VIEW_SIZE = (80, 80)


@dataclass
class ViewSet:
    views: np.ndarray  # [k, N, F]
    flags: np.ndarray | None = None  # ground-truth artifact flag per item, scoring only
    mode: str = "per_prototype"

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 3:
            raise ValueError(f"views must be [k, N, F], got {self.views.shape}")
        if self.flags is not None:
            self.flags = np.asarray(self.flags, dtype=bool)
            if self.flags.shape != (self.num_items,):
                raise ValueError("one artifact flag per item is required")

    @property
    def num_views(self) -> int:
        return self.views.shape[0]

    @property
    def num_items(self) -> int:
        return self.views.shape[1]


def _to_view(maps: np.ndarray, size) -> np.ndarray:
    """Channel-sum ``[..., C, H, W]`` maps, resample to ``size`` and flatten."""
    summed = maps.sum(axis=-3, dtype=np.float64)
    return resize_bilinear(summed, size).reshape(summed.shape[:-2] + (-1,))


NORMALIZERS = (None, "l2")


def build_views(maps, mode: str = "per_prototype", flags=None, size=VIEW_SIZE,
                normalize: str | None = None) -> ViewSet:
    """Turn input-space maps into clustering views.

    ``maps`` is ``[N, k, C, H, W]`` (one map per prototype) for
    ``per_prototype`` and ``summed_concat``, or ``[N, C, H, W]`` (one class
    map per image) for ``lrp_single``. ``per_prototype`` keeps the ``k``
    views apart; the other two modes produce a single view.

    ``normalize="l2"`` scales every item's vector in every view to unit
    length, so views compare where relevance lies rather than how much of
    it there is. All-zero vectors stay zero.
    """
    if normalize not in NORMALIZERS:
        raise ValueError(f"unknown normalization {normalize!r}, expected one of {NORMALIZERS}")
    if mode not in VIEW_MODES:
        raise ValueError(f"unknown view mode {mode!r}, expected one of {VIEW_MODES}")
    maps = np.asarray(maps)
    if maps.size == 0 or len(maps) == 0:
        raise ValueError("no maps given")
    if mode == "lrp_single":
        if maps.ndim != 4:
            raise ValueError(f"lrp_single expects [N,C,H,W] maps, got {maps.shape}")
        views = _to_view(maps, size)[None]
    else:
        if maps.ndim != 5:
            raise ValueError(f"{mode} expects [N,k,C,H,W] maps, got {maps.shape}")
        per = _to_view(maps, size)  # [N,k,F]
        if mode == "per_prototype":
            views = per.transpose(1, 0, 2)
        else:
            views = per.reshape(per.shape[0], -1)[None]
    if normalize == "l2":
        norms = np.linalg.norm(views, axis=-1, keepdims=True)
        views = np.divide(views, norms, out=np.zeros_like(views), where=norms > 0)
    return ViewSet(views, flags, mode)


# ----------------------------------------------------------------------------
# spectral machinery
# ----------------------------------------------------------------------------


def _pairwise_sq(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(d2, 0)
    return np.maximum(d2, 0)


def gaussian_affinity(X, sigma: float | None = None, sigma_scale: float = 1.0) -> tuple[np.ndarray, float]:
    """``exp(-|u - v|^2 / (2 sigma^2))``.

    Without an explicit ``sigma`` the bandwidth is ``sigma_scale`` times the
    median pairwise distance. Returns the affinity and the sigma used (0
    when all rows coincide, in which case the affinity is all ones).
    """
    X = np.asarray(X, dtype=np.float64)
    d2 = _pairwise_sq(X)
    if sigma is None:
        if sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")
        iu = np.triu_indices(len(X), 1)
        sigma = sigma_scale * float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 0.0
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones_like(d2), 0.0
    K = np.exp(-d2 / (2 * sigma**2))
    np.fill_diagonal(K, 1.0)
    return K, sigma


def _normalized_affinity(K: np.ndarray) -> np.ndarray:
    """``D^-1/2 K D^-1/2``."""
    inv = 1.0 / np.sqrt(K.sum(axis=1))
    M = K * inv[:, None] * inv[None, :]
    return (M + M.T) / 2


def normalized_laplacian(K: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^-1/2 K D^-1/2``."""
    return np.eye(len(K)) - _normalized_affinity(K)


def _fix_signs(U: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive (first on ties)."""
    idx = np.abs(U).argmax(axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1
    return U * s


def _top_eigvecs(M: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(M)
    return vals[::-1][:k], _fix_signs(vecs[:, ::-1][:, :k])


def spectral_embedding(X, k: int = 2, sigma: float | None = None, sigma_scale: float = 1.0) -> np.ndarray:
    """The ``k`` Laplacian eigenvectors with smallest eigenvalue, as columns ``[N, k]``."""
    K, _ = gaussian_affinity(X, sigma, sigma_scale)
    return _top_eigvecs(_normalized_affinity(K), k)[1]


def _canonical_order(X: np.ndarray) -> np.ndarray:
    """Row permutation sorting rows lexicographically."""
    return np.lexsort(X.T[::-1]) if X.shape[1] else np.arange(len(X))


def _content_seed(X: np.ndarray, seed: int) -> int:
    h = hashlib.sha256(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(int(seed).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest()[:4], "little")


def _kmeans_rows(U: np.ndarray, k: int, rng_seed: int) -> np.ndarray:
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    Y = np.divide(U, norms, out=np.zeros_like(U), where=norms > 0)
    km = KMeans(n_clusters=k, n_init=10, random_state=rng_seed).fit(Y)
    return _relabel_first_seen(km.labels_)


def _relabel_first_seen(labels: np.ndarray) -> np.ndarray:
    """Number clusters by first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, np.int64)
    remap[np.unique(labels)[order]] = np.arange(len(order))
    return remap[labels]


def spectral_cluster(view, k: int = 2, sigma: float | None = None, seed: int = 0,
                     sigma_scale: float = 1.0) -> np.ndarray:
    """Spectral clustering of one view ``[N, F]``; returns a cluster id per row.

    Gaussian affinity, symmetric normalized Laplacian, its ``k`` bottom
    eigenvectors, row normalization and k-means with 10 restarts. Identical
    rows for every item give a single cluster and a warning.
    """
    X = np.asarray(view, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"a single view is [N, F], got {X.shape}")
    n = len(X)
    if n < k:
        raise ValueError(f"need at least {k} items, got {n}")
    order = _canonical_order(X)
    Xs = X[order]
    if np.all(Xs == Xs[0]):
        warnings.warn("all items identical; reporting a single cluster", RuntimeWarning, stacklevel=2)
        return np.zeros(n, np.int64)
    U = spectral_embedding(Xs, k, sigma, sigma_scale)
    labels = _kmeans_rows(U, k, _content_seed(Xs, seed))
    out = np.empty(n, np.int64)
    out[order] = labels
    return out


@dataclass
class CoRegResult:
    assignment: np.ndarray
    embeddings: np.ndarray  # [V, N, k] in input order
    consensus_view: int | str
    iterations: int
    converged: bool
    objective: float
    view_scores: list = field(default_factory=list)  # tr(U_v^T M_v U_v)
    agreement: list = field(default_factory=list)


def _agreement(Us) -> list[float]:
    """Per view, summed ``tr(P_v P_w)`` over the other views."""
    P = [U @ U.T for U in Us]
    return [sum(float(np.sum(P[a] * P[b])) for b in range(len(P)) if b != a) for a in range(len(P))]


def _coreg_objective(Ms, Us, lam) -> tuple[float, list]:
    per = [float(np.trace(U.T @ M @ U)) for M, U in zip(Ms, Us)]
    return sum(per) + lam * sum(_agreement(Us)), per


def coreg_consensus_cluster(
    viewset: ViewSet,
    k: int = 2,
    lambda_coreg: float = 0.01,
    *,
    max_iter: int = 50,
    tol: float = 1e-4,
    consensus_view: int | str = "concat",
    sigma: float | None = None,
    sigma_scale: float = 1.0,
    seed: int = 0,
) -> CoRegResult:
    """Pairwise co-regularized multi-view spectral clustering.

    Each round replaces view ``v``'s embedding by the top ``k`` eigenvectors of
    ``D^-1/2 K_v D^-1/2 + lambda * sum_{w != v} U_w U_w^T`` (latest ``U_w``).
    Rounds stop once no projector ``U_v U_v^T`` moves by ``tol`` (Frobenius)
    or after ``max_iter`` rounds; in the latter case the iterate with the
    highest objective is returned and ``converged`` is False.

    ``consensus_view`` selects what k-means sees: ``"concat"`` stacks all
    view embeddings side by side, an integer picks one view, and ``"auto"``
    picks the view whose projector ``U_v U_v^T`` agrees most with those of
    the other views (lowest index on ties).
    """
    if lambda_coreg < 0:
        raise ValueError("lambda_coreg must be non-negative")
    V, n = viewset.num_views, viewset.num_items
    if V < 1:
        raise ValueError("need at least one view")
    if n < k:
        raise ValueError(f"need at least {k} items, got {n}")
    flat = viewset.views.transpose(1, 0, 2).reshape(n, -1)
    order = _canonical_order(flat)
    views = viewset.views[:, order]
    Ms = [_normalized_affinity(gaussian_affinity(X, sigma, sigma_scale)[0]) for X in views]
    Us = [_top_eigvecs(M, k)[1] for M in Ms]
    P = [U @ U.T for U in Us]
    best = (-np.inf, None, None)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        change = 0.0
        for v in range(V):
            reg = sum(P[w] for w in range(V) if w != v) if V > 1 else 0.0
            Us[v] = _top_eigvecs(Ms[v] + lambda_coreg * reg, k)[1]
            newP = Us[v] @ Us[v].T
            change = max(change, float(np.linalg.norm(newP - P[v])))
            P[v] = newP
        obj, per = _coreg_objective(Ms, Us, lambda_coreg)
        if obj > best[0]:
            best = (obj, [U.copy() for U in Us], per)
        if change < tol:
            converged = True
            break
    if converged:
        obj, per = _coreg_objective(Ms, Us, lambda_coreg)
        final = Us
    else:
        log.warning("co-regularization did not converge in %d rounds", max_iter)
        obj, final, per = best
    agree = _agreement(final)
    if consensus_view == "concat":
        cv, U = "concat", np.concatenate(final, axis=1)
    elif consensus_view == "auto":
        cv = int(np.argmax(agree))
        U = final[cv]
    else:
        cv = int(consensus_view)
        if not 0 <= cv < V:
            raise IndexError(f"consensus view {cv} out of range for {V} views")
        U = final[cv]
    labels = _kmeans_rows(U, k, _content_seed(flat[order], seed))
    assignment = np.empty(n, np.int64)
    assignment[order] = labels
    emb = np.empty((V, n, k))
    emb[:, order] = np.stack(final)
    return CoRegResult(assignment, emb, cv, it, converged, float(obj), per, agree)


# ----------------------------------------------------------------------------
# scoring and output
# ----------------------------------------------------------------------------


@dataclass
class ClusterResult:
    assignment: np.ndarray
    artifact_cluster: int
    acc: float
    f1: float
    method: str = ""
    diagnostics: dict = field(default_factory=dict)


def score_confusion(confusion) -> tuple[float, float, int]:
    """ACC, artifact F1 and artifact cluster id from a 2x2 confusion matrix.

    Rows are clusters, columns are (clean, artifact) counts. The artifact
    cluster is the one matched to the artifact label by the better of the
    two matchings; a tie goes to the cluster holding more artifact items,
    then to the lower id.
    """
    C = np.asarray(confusion, dtype=np.float64)
    if C.shape != (2, 2):
        raise ValueError(f"expected a 2x2 confusion matrix, got {C.shape}")
    total = C.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    cands = []
    for a in (0, 1):  # cluster a is called "artifact"
        correct = C[a, 1] + C[1 - a, 0]
        cands.append((correct / total, C[a, 1], -a))
    acc, _, neg_a = max(cands)
    a = -neg_a
    tp, fp, fn = C[a, 1], C[a, 0], C[1 - a, 1]
    f1 = 2 * tp / (2 * tp + fp + fn) if tp > 0 else 0.0
    return float(acc), float(f1), int(a)


def score_clustering(assignment, flags) -> tuple[float, float, int]:
    """ACC and artifact-cluster F1 of a two-cluster assignment against artifact flags."""
    a = np.asarray(assignment)
    f = np.asarray(flags, dtype=bool)
    if a.shape != f.shape:
        raise ValueError("assignment and flags differ in length")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("assignment must use cluster ids 0 and 1")
    conf = np.zeros((2, 2))
    np.add.at(conf, (a.astype(np.int64), f.astype(np.int64)), 1)
    return score_confusion(conf)


def make_result(assignment, flags, method: str, diagnostics: dict | None = None) -> ClusterResult:
    acc, f1, art = score_clustering(assignment, flags)
    return ClusterResult(np.asarray(assignment), art, acc, f1, method, diagnostics or {})


def write_cluster_outputs(result: ClusterResult, ids, outdir) -> None:
    """Write ``clusters.csv`` (id, cluster, is_artifact_cluster) and ``metrics.json``."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "clusters.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "cluster", "is_artifact_cluster"])
        for i, c in zip(ids, result.assignment):
            wr.writerow([int(i), int(c), int(c == result.artifact_cluster)])
    metrics = {
        "method": result.method,
        "acc": result.acc,
        "f1": result.f1,
        "artifact_cluster": result.artifact_cluster,
        "diagnostics": result.diagnostics,
    }
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
