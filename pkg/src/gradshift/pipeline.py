"""Gradual self-training over evolving intermediate domains.

Stage ``m = 1..M`` uses the previous stage's model (optionally averaged with the
cluster and propagation heads) to score targets, the target prototypes to score
sources, keeps the top ``m/M`` of targets and ``(M-m)/M`` of sources, and
warm-starts the next model on that mix with frozen pseudo labels. Test-time predictions
always come from the plain final network.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diagnostics, ensemble, model as mdl, selection
from .data import LabeledSet, SsdaSplit, UnlabeledSet
from .errors import InvalidArgument, StateError

logger = logging.getLogger(__name__)

SELECTION_MODES = ("ours", "random", "all")
REPORT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """One adaptation run.

    ``train.iterations`` is the total adaptation budget, split evenly across the
    ``num_stages`` stages; the schedule progress runs once from 0 to 1 over it.
    """

    num_stages: int = 20
    mode: str = "DA"
    hidden: tuple = (64,)
    source_train: mdl.TrainConfig = field(default_factory=lambda: mdl.TrainConfig(eta0=0.05, iterations=1000))
    train: mdl.TrainConfig = field(default_factory=lambda: mdl.TrainConfig(
        eta0=0.05, iterations=1000, batch_labeled=32, unlabeled_ratio=3, augment_sigma=0.05))
    sel_enh: bool = True
    lab_enh: bool = True
    sel_t: str = "ours"
    sel_s: str = "ours"
    lam: float = 1.0
    kernel: str = "softmax_neg_sq"
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    compute_discrepancy: bool = False

    def __post_init__(self):
        if self.num_stages < 1:
            raise InvalidArgument(f"num_stages (M) must be >= 1, got {self.num_stages}")
        if self.mode not in ("DA", "SSDA"):
            raise InvalidArgument(f"mode must be DA or SSDA, got {self.mode!r}")
        for name in ("sel_t", "sel_s"):
            if getattr(self, name) not in SELECTION_MODES:
                raise InvalidArgument(f"{name} must be one of {SELECTION_MODES}")
        if self.kernel not in selection.KERNELS:
            raise InvalidArgument(f"kernel must be one of {selection.KERNELS}")
        if self.lam < 0:
            raise InvalidArgument("lam must be >= 0")
        if any(int(h) < 1 for h in self.hidden):
            raise InvalidArgument("hidden sizes must be positive")

    @property
    def stage_iterations(self) -> int:
        return max(1, int(np.floor(self.train.iterations / self.num_stages + 0.5)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown run config keys: {sorted(unknown)}")
        kw = dict(d)
        tk = {f.name for f in fields(mdl.TrainConfig)}
        for key in ("source_train", "train"):
            if key in kw and isinstance(kw[key], dict):
                bad = set(kw[key]) - tk
                if bad:
                    raise InvalidArgument(f"unknown {key} keys: {sorted(bad)}")
                kw[key] = mdl.TrainConfig(**kw[key])
        if "hidden" in kw:
            kw["hidden"] = tuple(int(h) for h in kw["hidden"])
        return cls(**kw)


@dataclass
class StageReport:
    stage: int
    n_source_active: int
    n_target_active: int
    n_labeled_target: int
    target_accuracy: Optional[float]
    pseudo_label_accuracy: Optional[float]
    pseudo_agreement: Optional[float]
    a_distance: Optional[float]
    source_angle_mean: Optional[float]
    target_angle_mean: Optional[float]
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    final_model: mdl.Classifier
    stage_reports: list
    config_echo: dict
    models: list = field(default_factory=list)
    domains: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.stage_reports[-1].target_accuracy if self.stage_reports else None

    def report_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "config": self.config_echo,
            "stages": [r.to_dict() for r in self.stage_reports],
            "final_accuracy": self.final_accuracy,
        }


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _mean_or_none(values: Optional[np.ndarray], mask: np.ndarray) -> Optional[float]:
    if values is None or not mask.any():
        return None
    return float(values[mask].mean())


def _choose(mode: str, scores: Optional[selection.ScoreTable], n: int, k: int, seed: int) -> np.ndarray:
    if mode == "ours":
        return selection.top_k_indicator(scores, k) if k else np.zeros(n, dtype=np.int64)
    if mode == "random":
        return selection.random_indicator(n, k, seed)
    return np.ones(n, dtype=np.int64)


def _write_domain_csv(path: Path, domain: dict, labels: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pool", "index", "active", "label"])
        for pool, active in domain.items():
            lab = labels[pool]
            for i, a in enumerate(active):
                w.writerow([pool, i, int(a), int(lab[i])])


def read_domain_csv(path) -> tuple[dict, dict]:
    """Return ``(active, labels)`` dicts keyed by pool name."""
    active, labels = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            active.setdefault(row["pool"], []).append(int(row["active"]))
            labels.setdefault(row["pool"], []).append(int(row["label"]))
    return ({k: np.array(v, dtype=np.int64) for k, v in active.items()},
            {k: np.array(v, dtype=np.int64) for k, v in labels.items()})


def _sha_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sha_arrays(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = arrays[name]
        if a is None:
            continue
        a = np.ascontiguousarray(a)
        h.update(name.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _sha_config(echo: dict) -> str:
    return hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()


STAGE_FILES = ("model.json", "domain.csv", "report.json")


class _Checkpointer:
    """Stage directories plus ``manifest.json``, which records hashes of the run
    config, the input arrays and every file written per stage."""

    def __init__(self, root: Optional[str]):
        self.root = Path(root) if root else None
        self.manifest: dict = {}

    def stage_dir(self, m: int) -> Optional[Path]:
        if self.root is None:
            return None
        d = self.root / f"stage_{m}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _flush_manifest(self) -> None:
        (self.root / "manifest.json").write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    def write_data(self, pools: dict, labels: dict, echo: dict) -> None:
        if self.root is None:
            return
        d = self.root / "data"
        d.mkdir(parents=True, exist_ok=True)
        for name, x in pools.items():
            np.save(d / f"{name}_x.npy", x)
            if labels.get(name) is not None:
                np.save(d / f"{name}_y.npy", labels[name])
        self.manifest = {"config": _sha_config(echo), "inputs": _sha_arrays({**pools, **{
            f"{k}_y": v for k, v in labels.items()}}), "stages": {}}
        self._flush_manifest()

    def write_stage(self, m: int, clf, domain: dict, labels: dict, report: Optional[StageReport]) -> None:
        d = self.stage_dir(m)
        if d is None:
            return
        mdl.save(clf, d / "model.json")
        _write_domain_csv(d / "domain.csv", domain, labels)
        if report is not None:
            (d / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        self.manifest.setdefault("stages", {})[str(m)] = {
            f: _sha_file(d / f) for f in STAGE_FILES if (d / f).exists()}
        self._flush_manifest()

    def verify(self, upto: int, pools: dict, labels: dict, echo: dict) -> None:
        """Raise StateError unless config, inputs and stages ``0..upto`` match the manifest."""
        path = self.root / "manifest.json"
        if not path.exists():
            raise StateError(f"{self.root} has no manifest.json; cannot resume")
        man = json.loads(path.read_text())
        if man.get("config") != _sha_config(echo):
            raise StateError("run config differs from the checkpointed run")
        if man.get("inputs") != _sha_arrays({**pools, **{f"{k}_y": v for k, v in labels.items()}}):
            raise StateError("input data differs from the checkpointed run")
        for m in range(upto + 1):
            rec = man.get("stages", {}).get(str(m))
            d = self.root / f"stage_{m}"
            if rec is None:
                raise StateError(f"stage_{m} is not recorded in the manifest")
            for f, digest in rec.items():
                if not (d / f).exists() or _sha_file(d / f) != digest:
                    raise StateError(f"stage_{m}/{f} does not match its recorded hash")
        man["stages"] = {k: v for k, v in man.get("stages", {}).items() if int(k) <= upto}
        self.manifest = man

    def write_report(self, result: RunResult) -> None:
        if self.root is None:
            return
        (self.root / "report.json").write_text(json.dumps(result.report_dict(), indent=1))


def load_run_artifacts(run_dir) -> tuple[list, list, dict]:
    """Stage models ``0..M``, per-stage domain activity and raw input pools of a run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no run directory {run_dir}")
    pools = {p.name[:-6]: np.load(p) for p in sorted((run_dir / "data").glob("*_x.npy"))}
    stages = sorted(int(p.name.split("_")[1]) for p in run_dir.glob("stage_*") if (p / "model.json").exists())
    if not stages or stages[0] != 0:
        raise FileNotFoundError(f"{run_dir} has no stage_0 checkpoint")
    models, domains = [], []
    for m in range(stages[-1] + 1):
        models.append(mdl.load(run_dir / f"stage_{m}" / "model.json"))
        domains.append(read_domain_csv(run_dir / f"stage_{m}" / "domain.csv")[0])
    return models, domains, pools


def _adapt(labeled: LabeledSet, n_sched: int, target: Optional[UnlabeledSet], cfg: RunConfig,
           eval_labels: Optional[np.ndarray], f0: Optional[mdl.Classifier],
           resume_stage: Optional[int]) -> RunResult:
    """Shared loop. Rows ``n_sched:`` of ``labeled`` are pinned labeled-target rows."""
    M = cfg.num_stages
    n_pin = labeled.n - n_sched
    ck = _Checkpointer(cfg.checkpoint_dir)
    pools = {"source": labeled.features[:n_sched]}
    pool_labels = {"source": labeled.labels[:n_sched]}
    if n_pin:
        pools["labeled_target"] = labeled.features[n_sched:]
        pool_labels["labeled_target"] = labeled.labels[n_sched:]
    if target is not None:
        pools["target"] = target.features
        pool_labels["target"] = eval_labels
    xt = target.features if target is not None else np.empty((0, labeled.dim))
    nt = xt.shape[0]
    src_angles = labeled.angles[:n_sched] if labeled.angles is not None else None
    tgt_angles = target.angles if target is not None else None
    sched = labeled.subset(np.arange(n_sched))
    raster = labeled.raster
    echo = cfg.to_dict()
    echo["checkpoint_dir"] = None

    def domain_dict(s_on, t_on):
        d = {"source": s_on}
        if n_pin:
            d["labeled_target"] = np.ones(n_pin, dtype=np.int64)
        if target is not None:
            d["target"] = t_on
        return d

    def label_dict(pseudo_all):
        d = {"source": sched.labels}
        if n_pin:
            d["labeled_target"] = labeled.labels[n_sched:]
        if target is not None:
            d["target"] = pseudo_all
        return d

    reports: list[StageReport] = []
    domains = []
    models = []
    prev_pseudo = None
    start = 1
    if resume_stage is not None:
        if ck.root is None:
            raise InvalidArgument("resume needs a checkpoint directory")
        if not 0 <= resume_stage <= M:
            raise InvalidArgument(f"resume stage {resume_stage} outside [0, {M}]")
        ck.verify(resume_stage, pools, pool_labels, echo)
        for m in range(resume_stage + 1):
            d = ck.root / f"stage_{m}"
            models.append(mdl.load(d / "model.json"))
            act, labs = read_domain_csv(d / "domain.csv")
            domains.append(act)
            if m > 0:
                reports.append(StageReport(**json.loads((d / "report.json").read_text())))
            if m == resume_stage and m > 0 and "target" in labs:
                prev_pseudo = labs["target"]
        start = resume_stage + 1
    else:
        ck.write_data(pools, pool_labels, echo)
        if f0 is None:
            f0 = mdl.init_classifier([labeled.dim, *cfg.hidden, labeled.num_classes], derive_seed(cfg.seed, 0))
            f0 = mdl.train_source(f0, labeled, replace(cfg.source_train, seed=derive_seed(cfg.seed, 1)))
        models.append(f0)
        d0 = domain_dict(np.ones(n_sched, dtype=np.int64), np.zeros(nt, dtype=np.int64))
        domains.append(d0)
        ck.write_stage(0, f0, d0, label_dict(np.full(nt, -1)), None)

    for m in range(start, M + 1):
        t0 = time.perf_counter()
        prev = models[-1]
        pseudo = np.zeros(nt, dtype=np.int64)
        if nt:
            plain = mdl.forward(prev, xt)
            if cfg.sel_enh or cfg.lab_enh:
                enh = ensemble.ensemble_probs(prev, labeled, xt, cfg.lam, cfg.kernel).enhanced
            sel_probs = enh if cfg.sel_enh else plain
            lab_probs = enh if cfg.lab_enh else plain
            pseudo = mdl.pseudo_label(lab_probs)
            kt, ks = selection.stage_counts(m, M, nt, n_sched)
            t_scores = selection.score_targets(sel_probs) if cfg.sel_t == "ours" else None
            t_on = _choose(cfg.sel_t, t_scores, nt, kt, derive_seed(cfg.seed, 3, m, 0))
            s_scores = None
            if cfg.sel_s == "ours" and ks:
                protos = selection.compute_prototypes(prev, xt, pseudo_labels=mdl.pseudo_label(plain))
                s_scores = selection.score_sources(prev, protos, sched, kernel=cfg.kernel)
            s_on = _choose(cfg.sel_s, s_scores, n_sched, ks, derive_seed(cfg.seed, 3, m, 1))
        else:
            # no unlabeled pool: plain supervised training on everything labeled
            t_on = np.zeros(0, dtype=np.int64)
            s_on = np.ones(n_sched, dtype=np.int64)
        labeled_on = np.concatenate([s_on, np.ones(n_pin, dtype=np.int64)])
        spec = mdl.WeightedBatchSpec.from_masks(labeled.labels, labeled_on, pseudo, t_on)
        stage_cfg = replace(cfg.train, iterations=cfg.stage_iterations, seed=derive_seed(cfg.seed, 2, m))
        cur = mdl.train_stage(prev, labeled.features, labeled.labels, xt, spec, stage_cfg,
                              schedule_span=((m - 1) / M, m / M), raster=raster)
        models.append(cur)
        dom = domain_dict(s_on, t_on)
        domains.append(dom)

        t_mask = t_on == 1
        acc = pacc = None
        if eval_labels is not None and nt:
            acc = mdl.accuracy(cur, xt, eval_labels)
            if t_mask.any():
                pacc = float(np.mean(pseudo[t_mask] == eval_labels[t_mask]))
        agree = float(np.mean(pseudo == prev_pseudo)) if prev_pseudo is not None and nt else None
        adis = None
        if cfg.compute_discrepancy:
            adis = diagnostics.consecutive_discrepancy(models[-2:], domains[-2:], pools,
                                                       replace(diagnostics.A_DISTANCE_CONFIG,
                                                               seed=derive_seed(cfg.seed, 4, m)))[0]
        rep = StageReport(
            stage=m,
            n_source_active=int(s_on.sum()),
            n_target_active=int(t_on.sum()),
            n_labeled_target=n_pin,
            target_accuracy=acc,
            pseudo_label_accuracy=pacc,
            pseudo_agreement=agree,
            a_distance=adis,
            source_angle_mean=_mean_or_none(src_angles, s_on == 1),
            target_angle_mean=_mean_or_none(tgt_angles, t_mask),
            wall_time_s=time.perf_counter() - t0,
        )
        reports.append(rep)
        prev_pseudo = pseudo if nt else None
        ck.write_stage(m, cur, dom, label_dict(pseudo), rep)
        result = RunResult(cur, reports, echo, models, domains)
        ck.write_report(result)
        logger.debug("stage %d/%d: src %d tgt %d acc %s", m, M, rep.n_source_active, rep.n_target_active, acc)

    return RunResult(models[-1], reports, echo, models, domains)


def _check_dims(source: LabeledSet, target_dim: int) -> None:
    if source.dim != target_dim:
        raise InvalidArgument(f"source has d={source.dim} but target has d={target_dim}")


def run_da(source: LabeledSet, target: UnlabeledSet, cfg: RunConfig, eval_labels=None,
           f0: Optional[mdl.Classifier] = None, resume_stage: Optional[int] = None) -> RunResult:
    """Unsupervised adaptation; ``eval_labels`` are used for reporting only."""
    _check_dims(source, target.dim)
    if eval_labels is not None:
        eval_labels = np.asarray(eval_labels, dtype=np.int64)
        if eval_labels.shape != (target.n,):
            raise InvalidArgument("eval_labels must have one entry per target sample")
    return _adapt(source, source.n, target, cfg, eval_labels, f0, resume_stage)


def run_ssda(source: LabeledSet, split: SsdaSplit, cfg: RunConfig, eval_labels=None,
             f0: Optional[mdl.Classifier] = None, resume_stage: Optional[int] = None) -> RunResult:
    """Semi-supervised adaptation: the labeled target rows join the source from stage 0 on
    and stay active with their true labels in every stage."""
    if split.labels_per_class < 1:
        raise InvalidArgument("SSDA needs labels_per_class >= 1; use run_da otherwise")
    lt = split.labeled_target
    _check_dims(source, lt.dim)
    if lt.num_classes != source.num_classes:
        raise InvalidArgument("labeled target and source disagree on the number of classes")
    angles = None
    if source.angles is not None and lt.angles is not None:
        angles = np.concatenate([source.angles, lt.angles])
    pool = LabeledSet(np.vstack([source.features, lt.features]), np.concatenate([source.labels, lt.labels]),
                      source.num_classes, raster=source.raster, angles=angles, domain="source+labeled_target")
    if eval_labels is None:
        eval_labels = split.unlabeled_labels
    if split.unlabeled_target is not None:
        _check_dims(source, split.unlabeled_target.dim)
    if eval_labels is not None and split.unlabeled_target is not None:
        eval_labels = np.asarray(eval_labels, dtype=np.int64)
    else:
        eval_labels = None
    return _adapt(pool, source.n, split.unlabeled_target, cfg, eval_labels, f0, resume_stage)


def train_source_model(source: LabeledSet, cfg: RunConfig) -> mdl.Classifier:
    """The source model exactly as the run loop would build it for this seed."""
    f0 = mdl.init_classifier([source.dim, *cfg.hidden, source.num_classes], derive_seed(cfg.seed, 0))
    return mdl.train_source(f0, source, replace(cfg.source_train, seed=derive_seed(cfg.seed, 1)))


@dataclass(frozen=True)
class Arm:
    name: str
    sel_t: str = "ours"
    sel_s: str = "ours"
    sel_enh: bool = True
    lab_enh: bool = True

    def apply(self, cfg: RunConfig) -> RunConfig:
        return replace(cfg, sel_t=self.sel_t, sel_s=self.sel_s, sel_enh=self.sel_enh, lab_enh=self.lab_enh)


TABLE1_ARMS = (
    Arm("full"),
    Arm("t_all", sel_t="all"),
    Arm("t_random", sel_t="random"),
    Arm("s_all", sel_s="all"),
    Arm("s_random", sel_s="random"),
    Arm("no_enh", sel_enh=False, lab_enh=False),
    Arm("no_lab_enh", lab_enh=False),
)
ARMS_BY_NAME = {a.name: a for a in TABLE1_ARMS}
ABLATION_COLUMNS = ("sel_t", "sel_s", "sel_enh", "lab_enh", "seed", "accuracy")


def _run_arm(args) -> dict:
    arm, source, target, eval_labels, cfg, seed, out = args
    result_path = out / f"{arm.name}_seed{seed}" / "result.json" if out is not None else None
    if result_path is not None and result_path.exists():
        return json.loads(result_path.read_text())
    run_cfg = replace(arm.apply(cfg), seed=seed, checkpoint_dir=None)
    res = run_da(source, target, run_cfg, eval_labels)
    row = {"arm": arm.name, "sel_t": arm.sel_t, "sel_s": arm.sel_s, "sel_enh": int(arm.sel_enh),
           "lab_enh": int(arm.lab_enh), "seed": seed, "accuracy": res.final_accuracy}
    if result_path is not None:
        result_path.parent.mkdir(parents=True, exist_ok=True)
        result_path.write_text(json.dumps(row))
    return row


def run_ablation_grid(source: LabeledSet, target: UnlabeledSet, base_cfg: RunConfig,
                      arms: Sequence[Arm] = TABLE1_ARMS, seeds: Sequence[int] = (0,),
                      eval_labels=None, out_dir=None, jobs: int = 1) -> list[dict]:
    """Every arm on every seed with shared data; finished arm/seed cells are reused from ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else None
    tasks = [(arm, source, target, eval_labels, base_cfg, seed, out) for arm in arms for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_arm, tasks))
    else:
        rows = [_run_arm(t) for t in tasks]
    if out is not None:
        write_ablation_csv(rows, out / "ablation.csv")
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            acc = r["accuracy"]
            w.writerow([r["sel_t"], r["sel_s"], r["sel_enh"], r["lab_enh"], r["seed"],
                        "" if acc is None else repr(float(acc))])


def report_schema() -> dict:
    """The JSON schema that every emitted ``report.json`` satisfies."""
    from importlib import resources

    return json.loads(resources.files(__package__).joinpath("report.schema.json").read_text())
