"""Shift measurements: proxy A-distance, accuracy/confidence vs. rotation, and
discrepancy between consecutive intermediate domains."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from .data import LabeledSet, RotationSpec, rotate, split
from .errors import InvalidArgument

A_DISTANCE_HIDDEN = 16
A_DISTANCE_CONFIG = mdl.TrainConfig(eta0=0.05, iterations=300, batch_labeled=64, seed=0)


def _content_key(x: np.ndarray) -> bytes:
    order = np.lexsort(x.T[::-1]) if x.size else np.arange(0)
    h = hashlib.sha256()
    h.update(np.asarray(x.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(x[order]).tobytes())
    return h.digest()


def proxy_a_distance(set_a, set_b, cfg: Optional[mdl.TrainConfig] = None) -> float:
    """``2 (1 - 2 err)`` for a small MLP domain classifier, clamped to [0, 2].

    The two sets are balanced by subsampling, split in half per domain, and the
    error is measured on the held-out halves. Arguments are put in a canonical
    order first, so the result does not depend on which set is passed first.
    """
    cfg = cfg or A_DISTANCE_CONFIG
    a = np.asarray(getattr(set_a, "features", set_a), dtype=np.float64)
    b = np.asarray(getattr(set_b, "features", set_b), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"sets must be matrices of equal width, got {a.shape} and {b.shape}")
    if a.shape[0] < 4 or b.shape[0] < 4:
        raise InvalidArgument("each set needs at least 4 samples")
    if _content_key(a) > _content_key(b):
        a, b = b, a
    rng = np.random.default_rng(cfg.seed)
    m = min(len(a), len(b))
    if len(a) > m:
        a = a[np.sort(rng.choice(len(a), m, replace=False))]
    if len(b) > m:
        b = b[np.sort(rng.choice(len(b), m, replace=False))]
    half = m // 2
    pa, pb = rng.permutation(m), rng.permutation(m)
    x_tr = np.vstack([a[pa[:half]], b[pb[:half]]])
    y_tr = np.repeat([0, 1], half)
    x_te = np.vstack([a[pa[half:]], b[pb[half:]]])
    y_te = np.repeat([0, 1], m - half)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-12
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    clf = mdl.init_classifier([a.shape[1], A_DISTANCE_HIDDEN, 2], seed=cfg.seed)
    clf = mdl.train_source(clf, LabeledSet(x_tr, y_tr, 2), cfg)
    err = 1.0 - mdl.accuracy(clf, x_te, y_te)
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


@dataclass(frozen=True, eq=False)
class ShiftCurve:
    r: np.ndarray
    angle_lo: np.ndarray
    angle_hi: np.ndarray
    accuracy: np.ndarray
    mean_maxprob: np.ndarray
    a_dis: np.ndarray
    source_holdout_accuracy: float = float("nan")

    def __post_init__(self):
        n = len(self.r)
        for name in ("angle_lo", "angle_hi", "accuracy", "mean_maxprob", "a_dis"):
            if len(getattr(self, name)) != n:
                raise InvalidArgument(f"{name} length differs from r")
        if np.any((self.a_dis < 0) | (self.a_dis > 2)):
            raise InvalidArgument("A-distance values must lie in [0, 2]")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "accuracy", "mean_maxprob", "a_dis"])
            for row in zip(self.r, self.accuracy, self.mean_maxprob, self.a_dis):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def shift_study(base: LabeledSet, source_spec: RotationSpec, bucket_width: float, num_buckets: int,
                hidden: Sequence[int] = (32, 32), cfg: Optional[mdl.TrainConfig] = None,
                seed: int = 0, a_cfg: Optional[mdl.TrainConfig] = None) -> ShiftCurve:
    """Train on a rotated source half, then probe rotated copies of the target half.

    Bucket ``r`` rotates the target half by angles in ``[r w, (r + 1) w]``.
    """
    if num_buckets < 1 or bucket_width <= 0:
        raise InvalidArgument("need num_buckets >= 1 and bucket_width > 0")
    cfg = cfg or mdl.TrainConfig(eta0=0.05, iterations=1000, seed=seed)
    a_cfg = a_cfg or replace(A_DISTANCE_CONFIG, seed=seed)
    ss = np.random.SeedSequence([seed, source_spec.seed]).generate_state(num_buckets + 3)
    src_pool, tgt_pool = split(base, 0.5, seed=int(ss[0]))
    src = rotate(src_pool, replace(source_spec, seed=int(ss[1])))
    src_train, src_hold = split(src, 0.8, seed=int(ss[2]))
    clf = mdl.init_classifier([base.dim, *hidden, base.num_classes], seed=seed)
    clf = mdl.train_source(clf, src_train, cfg)
    hold_acc = mdl.accuracy(clf, src_hold.features, src_hold.labels)

    rs, los, his, accs, conf, adis = [], [], [], [], [], []
    for r in range(num_buckets):
        lo, hi = r * bucket_width, (r + 1) * bucket_width
        tgt = rotate(tgt_pool, RotationSpec(lo, hi, int(ss[3 + r])))
        probs = mdl.forward(clf, tgt.features)
        rs.append(r)
        los.append(lo)
        his.append(hi)
        accs.append(float(np.mean(mdl.pseudo_label(probs) == tgt.labels)))
        conf.append(float(probs.max(axis=1).mean()))
        adis.append(proxy_a_distance(src.features, tgt.features, a_cfg))
    return ShiftCurve(np.array(rs), np.array(los), np.array(his), np.array(accs), np.array(conf),
                      np.array(adis), hold_acc)


def materialize(domain_rows: dict, pools: dict) -> np.ndarray:
    """Stack the active rows of each pool: ``domain_rows[pool]`` is a 0/1 vector."""
    parts = [pools[name][np.asarray(active) == 1] for name, active in domain_rows.items()
             if name in pools and np.any(np.asarray(active) == 1)]
    if not parts:
        raise InvalidArgument("domain has no active rows")
    return np.vstack(parts)


def consecutive_discrepancy(models: Sequence[mdl.Classifier], domains: Sequence[dict], pools: dict,
                            cfg: Optional[mdl.TrainConfig] = None) -> list[float]:
    """A-distance between domains ``m-1`` and ``m`` in the features of model ``m``.

    ``models[m]`` and ``domains[m]`` index stages ``0..M``; ``domains[m]`` maps a
    pool name to its 0/1 activity vector and ``pools`` maps it to the raw inputs.
    Returns ``M`` values for ``m = 1..M``.
    """
    cfg = cfg or A_DISTANCE_CONFIG
    out = []
    for m in range(1, len(domains)):
        clf = models[m]
        prev = mdl.features(clf, materialize(domains[m - 1], pools))
        cur = mdl.features(clf, materialize(domains[m], pools))
        out.append(proxy_a_distance(prev, cur, replace(cfg, seed=cfg.seed + m)))
    return out


def direct_discrepancy(models: Sequence[mdl.Classifier], source_x: np.ndarray, target_x: np.ndarray,
                       cfg: Optional[mdl.TrainConfig] = None) -> list[float]:
    """Source vs. target A-distance in the features of each stage model ``1..M``."""
    cfg = cfg or A_DISTANCE_CONFIG
    return [
        proxy_a_distance(mdl.features(clf, source_x), mdl.features(clf, target_x), replace(cfg, seed=cfg.seed + m))
        for m, clf in enumerate(models) if m > 0
    ]


def write_consecutive_csv(values: Sequence[float], path, direct: Optional[Sequence[float]] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "a_dis"] + (["a_dis_source_target"] if direct is not None else []))
        for m, v in enumerate(values, start=1):
            w.writerow([m, repr(float(v))] + ([repr(float(direct[m - 1]))] if direct is not None else []))


def consecutive_from_run(run_dir, cfg: Optional[mdl.TrainConfig] = None, with_direct: bool = False):
    """Recompute consecutive discrepancies from a checkpoint directory (read-only)."""
    from .pipeline import load_run_artifacts

    run_dir = Path(run_dir)
    models, domains, pools = load_run_artifacts(run_dir)
    values = consecutive_discrepancy(models, domains, pools, cfg)
    direct = None
    if with_direct:
        src = pools["source"]
        tgt = pools["target"]
        direct = direct_discrepancy(models, src, tgt, cfg)
    return values, direct


def spearman(x, y) -> float:
    import warnings

    from scipy.stats import spearmanr

    # a constant curve has no rank order; report 0 rather than warn
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0
