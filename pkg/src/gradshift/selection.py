"""Confidence scores for target and source samples and top-k domain construction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import model as mdl
from .errors import InvalidArgument, NumericError, StateError

KERNELS = ("softmax_neg_sq", "student_exp")


@dataclass(frozen=True, eq=False)
class ScoreTable:
    scores: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(s)) or s.size and (s.min() < 0 or s.max() > 1):
            raise NumericError(f"scores from {self.provenance or 'scorer'} must be finite and in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "score"])
            for i, s in enumerate(self.scores):
                w.writerow([i, repr(float(s))])


@dataclass(frozen=True, eq=False)
class Prototypes:
    centers: np.ndarray  # K x h, NaN rows for empty classes
    counts: np.ndarray

    @property
    def nonempty(self) -> np.ndarray:
        return self.counts > 0


@dataclass(frozen=True, eq=False)
class IntermediateDomain:
    stage: int
    num_stages: int
    source_active: np.ndarray
    target_active: np.ndarray
    # pseudo label per target sample, -1 where inactive
    target_pseudo_labels: np.ndarray

    @property
    def n_source_active(self) -> int:
        return int(self.source_active.sum())

    @property
    def n_target_active(self) -> int:
        return int(self.target_active.sum())


def score_targets(indicator: Callable[[np.ndarray], np.ndarray] | np.ndarray, target=None) -> ScoreTable:
    """Max class probability per target row.

    ``indicator`` is either a callable mapping the target features to an n x K
    probability matrix, or that matrix itself.
    """
    if callable(indicator):
        probs = np.asarray(indicator(target.features))
    else:
        probs = np.asarray(indicator)
    bad = np.flatnonzero(~np.all(np.isfinite(probs), axis=1))
    if bad.size:
        raise NumericError(f"non-finite probability for target sample {int(bad[0])}")
    return ScoreTable(np.clip(probs.max(axis=1), 0.0, 1.0), "target_max_prob")


def top_k_indicator(scores, k: int) -> np.ndarray:
    """0/1 vector marking the ``k`` highest scores; ties go to the lower index."""
    s = np.asarray(scores.scores if isinstance(scores, ScoreTable) else scores, dtype=np.float64)
    n = s.size
    if k < 0 or k > n:
        raise InvalidArgument(f"k={k} outside [0, {n}]")
    order = np.lexsort((np.arange(n), -s))
    out = np.zeros(n, dtype=np.int64)
    out[order[:k]] = 1
    return out


select_top = top_k_indicator


def random_indicator(n: int, k: int, seed) -> np.ndarray:
    if k < 0 or k > n:
        raise InvalidArgument(f"k={k} outside [0, {n}]")
    out = np.zeros(n, dtype=np.int64)
    out[np.random.default_rng(seed).choice(n, size=k, replace=False)] = 1
    return out


def compute_prototypes(clf: mdl.Classifier, target, pseudo_labels: Optional[np.ndarray] = None,
                       feats: Optional[np.ndarray] = None) -> Prototypes:
    """Per-class mean target feature over samples pseudo-labeled as that class.

    ``pseudo_labels`` and ``feats`` default to the classifier's own argmax and
    penultimate features on ``target``.
    """
    x = target.features if hasattr(target, "features") else np.asarray(target)
    if feats is None:
        feats = mdl.features(clf, x)
    if pseudo_labels is None:
        pseudo_labels = mdl.predict(clf, x)
    k = clf.num_classes
    centers = np.full((k, feats.shape[1]), np.nan)
    counts = np.bincount(pseudo_labels, minlength=k)
    for c in range(k):
        if counts[c]:
            centers[c] = feats[pseudo_labels == c].mean(axis=0)
    return Prototypes(centers, counts)


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, rows of ``a`` against rows of ``b``."""
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kernel_logits(sq_dist: np.ndarray, kernel: str = "softmax_neg_sq") -> np.ndarray:
    """Unnormalized log-scores for the distance kernel.

    ``softmax_neg_sq`` reads ``exp(1 + d^2)^-1`` as ``e^-1 e^-d^2``, so the common
    ``e^-1`` drops out; ``student_exp`` reads it as ``exp(1 / (1 + d^2))``.
    """
    if kernel == "softmax_neg_sq":
        return -sq_dist
    if kernel == "student_exp":
        return 1.0 / (1.0 + sq_dist)
    raise InvalidArgument(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def masked_softmax(logit: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask[None, :], logit, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_sources(clf: mdl.Classifier, protos: Prototypes, source, kernel: str = "softmax_neg_sq",
                  feats: Optional[np.ndarray] = None) -> ScoreTable:
    """Probability that each source sample's own class wins under the target prototype classifier."""
    mask = protos.nonempty
    if not mask.any():
        raise StateError("all target prototypes are empty")
    if feats is None:
        feats = mdl.features(clf, source.features)
    centers = np.where(mask[:, None], protos.centers, 0.0)
    probs = masked_softmax(kernel_logits(sq_distances(feats, centers), kernel), mask)
    y = source.labels
    s = probs[np.arange(len(y)), y]
    s = np.where(mask[y], s, 0.0)
    return ScoreTable(np.clip(s, 0.0, 1.0), "source_prototype")


def stage_counts(m: int, num_stages: int, n_target: int, n_source: int) -> tuple[int, int]:
    """Active (target, source) counts at stage ``m``, rounded half up."""
    if num_stages < 1 or not 0 <= m <= num_stages:
        raise InvalidArgument(f"stage {m} outside [0, {num_stages}]")
    # exact integer round-half-up of m*n/M
    kt = (2 * m * n_target + num_stages) // (2 * num_stages)
    ks = (2 * (num_stages - m) * n_source + num_stages) // (2 * num_stages)
    return kt, ks


def build_intermediate(m: int, num_stages: int, target_scores, source_scores,
                       pseudo_labels) -> IntermediateDomain:
    """Stage ``m`` domain: top ``m/M`` of targets and top ``(M-m)/M`` of sources."""
    if not 1 <= m <= num_stages:
        raise InvalidArgument(f"stage {m} outside [1, {num_stages}]")
    ts = target_scores.scores if isinstance(target_scores, ScoreTable) else np.asarray(target_scores)
    ss = source_scores.scores if isinstance(source_scores, ScoreTable) else np.asarray(source_scores)
    kt, ks = stage_counts(m, num_stages, ts.size, ss.size)
    t_on = top_k_indicator(ts, kt)
    s_on = top_k_indicator(ss, ks)
    return IntermediateDomain(m, num_stages, s_on, t_on, np.where(t_on == 1, np.asarray(pseudo_labels), -1))


def indicator_to_csv(indicator: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "active"])
        for i, a in enumerate(indicator):
            w.writerow([i, int(a)])

