"""A small ReLU MLP with a softmax head, trained by SGD with momentum.

The penultimate activations are the feature space used for prototypes,
clustering and the propagation graph (``features``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgument, TrainingDiverged

FORMAT_VERSION = 1


@dataclass
class Classifier:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.vel_w:
            self.reset_momentum()

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-2]

    def reset_momentum(self) -> None:
        self.vel_w = [np.zeros_like(w) for w in self.weights]
        self.vel_b = [np.zeros_like(b) for b in self.biases]

    def copy(self) -> "Classifier":
        return Classifier(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.vel_w],
            [v.copy() for v in self.vel_b],
        )


# "active": each loss term is a mean over its drawn active rows (B labeled, u*B
# pseudo-labeled per step). "population": that mean is further scaled by the active
# fraction of its pool, as if the indicators sat inside a mean over the whole pool.
TERM_WEIGHTINGS = ("active", "population")


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    batch_labeled: int = 64
    unlabeled_ratio: int = 7
    iterations: int = 1000
    seed: int = 0
    augment_sigma: float = 0.0
    weight_decay: float = 0.0
    term_weighting: str = "active"

    def __post_init__(self):
        if not self.eta0 > 0:
            raise InvalidArgument("eta0 must be > 0")
        if self.batch_labeled < 1:
            raise InvalidArgument("batch_labeled must be >= 1")
        if self.unlabeled_ratio < 1:
            raise InvalidArgument("unlabeled_ratio must be >= 1")
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if self.augment_sigma < 0:
            raise InvalidArgument("augment_sigma must be >= 0")
        if self.term_weighting not in TERM_WEIGHTINGS:
            raise InvalidArgument(f"term_weighting must be one of {TERM_WEIGHTINGS}")


def learning_rate(cfg: TrainConfig, p: float) -> float:
    """Annealed step size ``eta0 / (1 + alpha p) ** beta`` for progress ``p`` in [0, 1]."""
    return cfg.eta0 / (1.0 + cfg.alpha * p) ** cfg.beta


@dataclass(frozen=True, eq=False)
class WeightedBatchSpec:
    """0/1 sample weights for one self-training stage.

    Labeled rows index the labeled pool (source, plus labeled target in SSDA);
    pseudo rows index the unlabeled target pool and carry frozen pseudo labels.
    """

    labeled_indices: np.ndarray
    labels: np.ndarray
    labeled_weights: np.ndarray
    pseudo_indices: np.ndarray
    pseudo_labels: np.ndarray
    pseudo_weights: np.ndarray

    def __post_init__(self):
        for name in ("labeled_weights", "pseudo_weights"):
            w = getattr(self, name)
            if w.size and not np.all((w == 0) | (w == 1)):
                raise InvalidArgument(f"{name} must be 0/1")
        if self.labeled_indices.shape != self.labels.shape or self.labels.shape != self.labeled_weights.shape:
            raise InvalidArgument("labeled arrays must share length")
        if self.pseudo_indices.shape != self.pseudo_labels.shape or self.pseudo_labels.shape != self.pseudo_weights.shape:
            raise InvalidArgument("pseudo arrays must share length")
        if self.labeled_weights.sum() + self.pseudo_weights.sum() == 0:
            raise InvalidArgument("batch spec has no active sample")

    @classmethod
    def from_masks(cls, labels, labeled_active, pseudo_labels, pseudo_active) -> "WeightedBatchSpec":
        """Build from full-length pools: labels per labeled row and pseudo labels per target row."""
        labels = np.asarray(labels, dtype=np.int64)
        pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
        la, pa = np.asarray(labeled_active), np.asarray(pseudo_active)
        for name, a in (("labeled_active", la), ("pseudo_active", pa)):
            if a.size and not np.all((a == 0) | (a == 1)):
                raise InvalidArgument(f"{name} must be 0/1")
        la, pa = la.astype(np.int64), pa.astype(np.int64)
        return cls(
            np.arange(labels.size), labels, la,
            np.arange(pseudo_labels.size), pseudo_labels, pa,
        )

    def active_labeled(self) -> tuple[np.ndarray, np.ndarray]:
        on = self.labeled_weights == 1
        return self.labeled_indices[on], self.labels[on]

    def active_pseudo(self) -> tuple[np.ndarray, np.ndarray]:
        on = self.pseudo_weights == 1
        return self.pseudo_indices[on], self.pseudo_labels[on]


def init_classifier(layer_dims: Sequence[int], seed: int = 0) -> Classifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise InvalidArgument("need at least an input and an output layer")
    if any(d <= 0 for d in dims):
        raise InvalidArgument(f"layer sizes must be positive, got {dims}")
    if dims[-1] < 2:
        raise InvalidArgument("need at least two classes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Classifier(dims, weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(c: Classifier, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != c.in_dim:
        raise InvalidArgument(f"expected inputs of dimension {c.in_dim}, got shape {x.shape}")
    return x, single


def _forward_cache(c: Classifier, x: np.ndarray) -> list[np.ndarray]:
    """Activations per layer: [x, h1, ..., h_f, logits]."""
    acts = [x]
    h = x
    last = len(c.weights) - 1
    for i, (w, b) in enumerate(zip(c.weights, c.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def logits(c: Classifier, x) -> np.ndarray:
    xb, single = _as_batch(c, x)
    z = _forward_cache(c, xb)[-1]
    return z[0] if single else z


def forward(c: Classifier, x) -> np.ndarray:
    """Class probabilities for one vector or a batch of rows."""
    return softmax(logits(c, x))


def features(c: Classifier, x) -> np.ndarray:
    """Penultimate-layer activations (the input itself for a linear model)."""
    xb, single = _as_batch(c, x)
    h = _forward_cache(c, xb)[-2]
    return h[0] if single else h


def predict(c: Classifier, x) -> np.ndarray:
    return pseudo_label(forward(c, x))


def accuracy(c: Classifier, x, y) -> float:
    return float(np.mean(predict(c, x) == np.asarray(y)))


def pseudo_label(probs) -> np.ndarray | int:
    """Argmax with ties to the lowest index; works row-wise on batches."""
    p = np.asarray(probs)
    if p.size == 0 or p.shape[-1] == 0:
        raise InvalidArgument("empty probability vector")
    out = np.argmax(p, axis=-1)
    return int(out) if p.ndim == 1 else out


def objective(c: Classifier, x: np.ndarray, y: np.ndarray, sample_weights: np.ndarray):
    """Weighted cross-entropy ``sum_i w_i * -log p(y_i | x_i)`` and its gradients.

    Returns ``(loss, grad_weights, grad_biases)``.
    """
    acts = _forward_cache(c, x)
    z = acts[-1]
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    logp = zs[np.arange(len(y)), y] - logsum
    loss = float(-(sample_weights * logp).sum())

    delta = softmax(z)
    delta[np.arange(len(y)), y] -= 1.0
    delta *= sample_weights[:, None]
    gw = [None] * len(c.weights)
    gb = [None] * len(c.biases)
    for i in range(len(c.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ c.weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


def sgd_step(c: Classifier, gw, gb, lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    for i in range(len(c.weights)):
        g = gw[i] + weight_decay * c.weights[i] if weight_decay else gw[i]
        c.vel_w[i] = momentum * c.vel_w[i] + g
        c.vel_b[i] = momentum * c.vel_b[i] + gb[i]
        c.weights[i] -= lr * c.vel_w[i]
        c.biases[i] -= lr * c.vel_b[i]


def augment(x, sigma: float, rng: np.random.Generator, raster: bool = False) -> np.ndarray:
    """Stand-in for strong augmentation on unlabeled inputs.

    Vector mode adds N(0, sigma^2) jitter. Raster mode applies a rotation in
    [-10, 10] degrees and an integer pixel shift in {-1, 0, 1} per axis.
    ``sigma == 0`` is the identity in both modes. Accepts a row or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    if not raster:
        return x + rng.normal(0.0, sigma, size=x.shape)
    batch = x[None, :] if x.ndim == 1 else x
    side = math.isqrt(batch.shape[1])
    if side * side != batch.shape[1]:
        raise InvalidArgument("raster augmentation needs square images")
    out = np.empty_like(batch)
    angles = rng.uniform(-10.0, 10.0, len(batch))
    shifts = rng.integers(-1, 2, size=(len(batch), 2))
    for i, row in enumerate(batch):
        img = row.reshape(side, side)
        if angles[i] != 0.0:
            img = ndimage.rotate(img, angles[i], reshape=False, order=1, mode="constant", cval=0.0,
                                 prefilter=False)
        if shifts[i].any():
            img = ndimage.shift(img, shifts[i], order=0, mode="constant", cval=0.0)
        out[i] = np.clip(img, 0.0, 1.0).ravel()
    return out[0] if x.ndim == 1 else out


def _draw(rng: np.random.Generator, pool: int, size: int) -> np.ndarray:
    # with replacement only when the active pool is smaller than the batch share
    if pool >= size:
        return rng.choice(pool, size=size, replace=False)
    return rng.integers(0, pool, size=size)


def _check(loss: float, it: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(it, loss)


def train_source(c: Classifier, source, cfg: TrainConfig,
                 schedule_span: tuple[float, float] = (0.0, 1.0)) -> Classifier:
    """Supervised cross-entropy training on a LabeledSet; returns a trained copy."""
    x, y = source.features, source.labels
    if x.shape[0] == 0:
        raise InvalidArgument("empty training set")
    out = c.copy()
    out.reset_momentum()
    rng = np.random.default_rng(cfg.seed)
    p0, p1 = schedule_span
    bsz = min(cfg.batch_labeled, x.shape[0])
    for it in range(cfg.iterations):
        idx = _draw(rng, x.shape[0], bsz)
        w = np.full(bsz, 1.0 / bsz)
        loss, gw, gb = objective(out, x[idx], y[idx], w)
        _check(loss, it)
        lr = learning_rate(cfg, p0 + (p1 - p0) * it / cfg.iterations)
        sgd_step(out, gw, gb, lr, cfg.momentum, cfg.weight_decay)
    return out


def stage_batch(labeled_x, labeled_y, target_x, spec: WeightedBatchSpec, cfg: TrainConfig,
                rng: np.random.Generator, raster: bool = False):
    """Draw one self-training batch: B labeled rows and u*B augmented pseudo-labeled rows.

    Returns ``(x, y, weights)``. Each term is averaged over its drawn rows; with
    ``term_weighting="population"`` it is then scaled by the active fraction of its
    pool, which makes the expected loss the indicator-weighted mean over all rows.
    """
    population = cfg.term_weighting == "population"
    lab_idx, lab_y = spec.active_labeled()
    ps_idx, ps_y = spec.active_pseudo()
    xs, ys, ws = [], [], []
    if lab_idx.size:
        pick = _draw(rng, lab_idx.size, cfg.batch_labeled)
        rows = lab_idx[pick]
        xs.append(labeled_x[rows])
        ys.append(lab_y[pick])
        scale = lab_idx.size / spec.labeled_weights.size if population else 1.0
        ws.append(np.full(pick.size, scale / pick.size))
    if ps_idx.size:
        nb = cfg.unlabeled_ratio * cfg.batch_labeled
        pick = _draw(rng, ps_idx.size, nb)
        xs.append(augment(target_x[ps_idx[pick]], cfg.augment_sigma, rng, raster=raster))
        ys.append(ps_y[pick])
        scale = ps_idx.size / spec.pseudo_weights.size if population else 1.0
        ws.append(np.full(pick.size, scale / pick.size))
    return np.vstack(xs), np.concatenate(ys), np.concatenate(ws)


def train_stage(c: Classifier, labeled_x, labeled_y, target_x, spec: WeightedBatchSpec,
                cfg: TrainConfig, schedule_span: tuple[float, float] = (0.0, 1.0),
                raster: bool = False) -> Classifier:
    """Warm-started self-training on one intermediate domain; returns a trained copy.

    ``labeled_x/labeled_y`` is the labeled pool indexed by the labeled rows of ``spec``,
    ``target_x`` the unlabeled target pool indexed by its pseudo rows. Pseudo labels
    stay fixed for the whole call.
    """
    out = c.copy()
    out.reset_momentum()
    rng = np.random.default_rng(cfg.seed)
    labeled_x = np.asarray(labeled_x) if labeled_x is not None else np.empty((0, c.in_dim))
    labeled_y = np.asarray(labeled_y) if labeled_y is not None else np.empty(0, dtype=np.int64)
    target_x = np.asarray(target_x) if target_x is not None else np.empty((0, c.in_dim))
    p0, p1 = schedule_span
    for it in range(cfg.iterations):
        xb, yb, wb = stage_batch(labeled_x, labeled_y, target_x, spec, cfg, rng, raster=raster)
        loss, gw, gb = objective(out, xb, yb, wb)
        _check(loss, it)
        lr = learning_rate(cfg, p0 + (p1 - p0) * it / cfg.iterations)
        sgd_step(out, gw, gb, lr, cfg.momentum, cfg.weight_decay)
    return out


def to_dict(c: Classifier) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(c.layer_dims),
        "weights": [w.tolist() for w in c.weights],
        "biases": [b.tolist() for b in c.biases],
    }


def from_dict(doc: dict) -> Classifier:
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {doc.get('format_version') if isinstance(doc, dict) else None!r}")
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        weights = [np.asarray(w, dtype=np.float64) for w in doc["weights"]]
        biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
        raise FormatError("layer count does not match layer_dims")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise FormatError(f"layer {i} shapes {w.shape}/{b.shape} inconsistent with layer_dims {dims}")
    return Classifier(dims, weights, biases)


def save(c: Classifier, path) -> None:
    Path(path).write_text(json.dumps(to_dict(c)))


def load(path) -> Classifier:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)
