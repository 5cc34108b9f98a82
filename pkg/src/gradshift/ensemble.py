"""Parameter-free heads on the shared feature extractor and their average.

Label propagation minimizes

    sum_i ||F_i - Y_i||^2 + lam * sum_ij a_ij ||F_i / sqrt(d_i) - F_j / sqrt(d_j)||^2

With symmetric ``A`` the second sum is ``2 tr(F^T (I - S) F)``, ``S = D^-1/2 A D^-1/2``,
and the factor of two is absorbed into ``lam``. Setting the gradient
``2 (F - Y) + 2 lam (I - S) F`` to zero gives

    F = (I + lam (I - S))^-1 Y = (1 - a) (I - a S)^-1 Y,   a = lam / (1 + lam),

which is also the fixed point of ``F <- a S F + (1 - a) Y``. The system matrix is
symmetric positive definite for ``lam >= 0`` because the spectrum of ``S`` lies
in [-1, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import model as mdl
from .errors import ConvergenceWarning, InvalidArgument, NumericError
from .selection import kernel_logits, masked_softmax, sq_distances

DENSE_LIMIT = 4000
NORM_EPS = 1e-12
DEGREE_EPS = 1e-12
_BLOCK = 2048


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centers: np.ndarray
    source_centers: np.ndarray
    iterations_run: int
    kernel: str = "softmax_neg_sq"
    inertia: tuple = ()


def lloyd(points: np.ndarray, init: np.ndarray, max_iter: int = 100):
    """Lloyd iterations from ``init`` until assignments stop changing.

    Clusters that lose every member keep their previous center. Returns
    ``(centers, assignments, iterations, inertia_history)``; the history holds the
    inertia of each assignment against the centers it was computed from.
    """
    centers = np.array(init, dtype=np.float64)
    k = centers.shape[0]
    d2 = sq_distances(points, centers)
    assign = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(len(points)), assign].sum())]
    it = 0
    while it < max_iter:
        new_centers = centers.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new_centers[c] = points[members].mean(axis=0)
        it += 1
        centers = new_centers
        d2 = sq_distances(points, centers)
        history.append(float(d2[np.arange(len(points)), assign].sum()))
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(points)), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers, assign, it, history


def class_means(feats: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise InvalidArgument(f"class {int(empty[0])} has no labeled samples")
    out = np.zeros((num_classes, feats.shape[1]))
    np.add.at(out, labels, feats)
    return out / counts[:, None]


def fit_clusters(clf: mdl.Classifier, source, target, max_iter: int = 100, kernel: str = "softmax_neg_sq",
                 source_feats: Optional[np.ndarray] = None,
                 target_feats: Optional[np.ndarray] = None) -> ClusterModel:
    """k-means on target features, warm-started at the per-class source means."""
    if source_feats is None:
        source_feats = mdl.features(clf, source.features)
    if target_feats is None:
        target_feats = mdl.features(clf, target.features)
    src_centers = class_means(source_feats, source.labels, clf.num_classes)
    centers, _, it, hist = lloyd(target_feats, src_centers, max_iter)
    return ClusterModel(centers, src_centers, it, kernel, tuple(hist))


def cluster_predict(cm: ClusterModel, feats: np.ndarray) -> np.ndarray:
    """Distance-kernel softmax over the target cluster centers (row or batch)."""
    f = np.asarray(feats, dtype=np.float64)
    single = f.ndim == 1
    fb = f[None, :] if single else f
    logit = kernel_logits(sq_distances(fb, cm.centers), cm.kernel)
    p = masked_softmax(logit, np.ones(cm.centers.shape[0], dtype=bool))
    return p[0] if single else p


@dataclass(eq=False)
class PropagationGraph:
    """Cosine affinity graph over source rows followed by target rows.

    Above ``DENSE_LIMIT`` nodes the affinity is kept implicit (unit-norm features)
    and applied blockwise.
    """

    degree: np.ndarray
    labels: np.ndarray  # Y, one-hot for source rows, zero for target rows
    lam: float
    affinity: Optional[np.ndarray] = None
    unit_features: Optional[np.ndarray] = None
    n_source: int = 0

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dense(self) -> bool:
        return self.affinity is not None

    def affinity_matmul(self, g: np.ndarray) -> np.ndarray:
        if self.affinity is not None:
            return self.affinity @ g
        return _implicit_matmul(self.unit_features, g)

    def normalized_matmul(self, g: np.ndarray) -> np.ndarray:
        """``S @ g`` with ``S = D^-1/2 A D^-1/2``."""
        r = 1.0 / np.sqrt(self.degree)
        return r[:, None] * self.affinity_matmul(r[:, None] * g)

    def normalized_affinity(self) -> np.ndarray:
        if self.affinity is None:
            raise InvalidArgument("normalized affinity is only materialized for dense graphs")
        r = 1.0 / np.sqrt(self.degree)
        return r[:, None] * self.affinity * r[None, :]


def _implicit_matmul(u: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = u.shape[0]
    out = np.empty((n, g.shape[1]))
    for lo in range(0, n, _BLOCK):
        hi = min(n, lo + _BLOCK)
        blk = np.maximum(u[lo:hi] @ u.T, 0.0)
        blk[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        out[lo:hi] = blk @ g
    return out


def cosine_affinity(feats: np.ndarray) -> np.ndarray:
    u = unit_rows(feats)
    a = np.maximum(u @ u.T, 0.0)
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 0.0)
    return a


def unit_rows(feats: np.ndarray) -> np.ndarray:
    f = np.asarray(feats, dtype=np.float64)
    return f / (np.linalg.norm(f, axis=1, keepdims=True) + NORM_EPS)


def graph_from_features(feats: np.ndarray, y_onehot: np.ndarray, lam: float, n_source: int = 0,
                        dense_limit: int = DENSE_LIMIT) -> PropagationGraph:
    if lam < 0:
        raise InvalidArgument("lambda must be >= 0")
    n = feats.shape[0]
    if n <= dense_limit:
        a = cosine_affinity(feats)
        deg = np.maximum(a.sum(axis=1), DEGREE_EPS)
        return PropagationGraph(deg, y_onehot, float(lam), affinity=a, n_source=n_source)
    u = unit_rows(feats)
    deg = np.maximum(_implicit_matmul(u, np.ones((n, 1)))[:, 0], DEGREE_EPS)
    return PropagationGraph(deg, y_onehot, float(lam), unit_features=u, n_source=n_source)


def build_graph(clf: mdl.Classifier, source, target, lam: float = 1.0,
                source_feats: Optional[np.ndarray] = None, target_feats: Optional[np.ndarray] = None,
                dense_limit: int = DENSE_LIMIT) -> PropagationGraph:
    if source_feats is None:
        source_feats = mdl.features(clf, source.features)
    if target_feats is None:
        target_feats = mdl.features(clf, target.features)
    k = clf.num_classes
    y = np.zeros((source_feats.shape[0] + target_feats.shape[0], k))
    y[np.arange(source_feats.shape[0]), source.labels] = 1.0
    feats = np.vstack([source_feats, target_feats])
    return graph_from_features(feats, y, lam, n_source=source_feats.shape[0], dense_limit=dense_limit)


def propagate_closed_form(g: PropagationGraph) -> np.ndarray:
    """Exact minimizer via one SPD linear solve."""
    if g.n > DENSE_LIMIT or not g.dense:
        raise InvalidArgument(f"dense solve limited to {DENSE_LIMIT} nodes, graph has {g.n}")
    if g.lam == 0:
        return g.labels.copy()
    system = (1.0 + g.lam) * np.eye(g.n) - g.lam * g.normalized_affinity()
    try:
        f = scipy.linalg.solve(system, g.labels, assume_a="pos", check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"propagation solve failed: {exc}") from exc
    return np.maximum(f, 0.0)


@dataclass(frozen=True, eq=False)
class PropagationResult:
    scores: np.ndarray
    iterations: int
    converged: bool
    last_change: float = field(default=0.0)


def propagate_iterative(g: PropagationGraph, tol: float = 1e-10, max_iter: int = 10000,
                        init: Optional[np.ndarray] = None) -> PropagationResult:
    """Fixed-point iteration ``F <- a S F + (1 - a) Y`` from ``init`` (default ``Y``)."""
    a = g.lam / (1.0 + g.lam)
    y = g.labels
    f = y.copy() if init is None else np.array(init, dtype=np.float64)
    change = np.inf
    for it in range(1, max_iter + 1):
        nxt = a * g.normalized_matmul(f) + (1.0 - a) * y if a else y.copy()
        change = float(np.max(np.abs(nxt - f))) if f.size else 0.0
        f = nxt
        if change < tol:
            return PropagationResult(f, it, True, change)
    warnings.warn(f"label propagation stopped after {max_iter} iterations (change {change:.3g})",
                  ConvergenceWarning, stacklevel=2)
    return PropagationResult(f, max_iter, False, change)


def propagate(g: PropagationGraph) -> np.ndarray:
    if g.dense:
        return propagate_closed_form(g)
    return propagate_iterative(g).scores


def propagation_probs(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize score rows to sum to one; all-zero rows become uniform and are flagged."""
    r = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    s = r.sum(axis=1)
    flagged = ~(s > 0)
    out = np.empty_like(r)
    out[~flagged] = r[~flagged] / s[~flagged, None]
    out[flagged] = 1.0 / r.shape[1]
    return out, flagged


def propagation_predict(f: np.ndarray, row: int) -> tuple[np.ndarray, bool]:
    p, flagged = propagation_probs(f[row])
    return p[0], bool(flagged[0])


def enhanced_indicator(*heads: np.ndarray) -> np.ndarray:
    """Elementwise mean of probability vectors (or matrices) from the three heads."""
    if not heads:
        raise InvalidArgument("need at least one head")
    return np.mean(np.stack([np.asarray(h, dtype=np.float64) for h in heads]), axis=0)


@dataclass(frozen=True, eq=False)
class EnsembleOutput:
    plain: np.ndarray
    cluster: np.ndarray
    propagation: np.ndarray
    enhanced: np.ndarray
    flagged: np.ndarray
    cluster_model: ClusterModel


def ensemble_probs(clf: mdl.Classifier, source, target_x: np.ndarray, lam: float = 1.0,
                   kernel: str = "softmax_neg_sq") -> EnsembleOutput:
    """All three heads on the target rows, sharing one feature pass.

    ``source`` is the labeled pool (features + labels) used for the cluster warm
    start and as the labeled nodes of the graph.
    """
    src_feats = mdl.features(clf, source.features)
    tgt_feats = mdl.features(clf, target_x)
    plain = mdl.forward(clf, target_x)
    cm = fit_clusters(clf, source, None, kernel=kernel, source_feats=src_feats, target_feats=tgt_feats)
    hat = cluster_predict(cm, tgt_feats)
    g = build_graph(clf, source, None, lam, source_feats=src_feats, target_feats=tgt_feats)
    f = propagate(g)
    tilde, flagged = propagation_probs(f[g.n_source:])
    return EnsembleOutput(plain, hat, tilde, enhanced_indicator(plain, hat, tilde), flagged, cm)


def dump_graph(g: PropagationGraph, f: Optional[np.ndarray], affinity_path=None, scores_path=None) -> None:
    """Debug dump: affinity as ``i,j,a_ij`` triplets and scores as a dense CSV."""
    if affinity_path is not None:
        if not g.dense:
            raise InvalidArgument("affinity dump needs a dense graph")
        i, j = np.nonzero(g.affinity)
        with open(affinity_path, "w") as fh:
            fh.write("i,j,a\n")
            for a, b in zip(i, j):
                fh.write(f"{a},{b},{float(g.affinity[a, b])!r}\n")
    if scores_path is not None and f is not None:
        with open(scores_path, "w") as fh:
            fh.write(",".join(f"k{c}" for c in range(f.shape[1])) + "\n")
            for row in f:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
