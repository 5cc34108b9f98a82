"""Desk-scale control studies on rotating two-moons.

Each function returns plain numbers so the acceptance suite and the scripts in
``scripts/`` share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import diagnostics as dg
from . import model as mdl
from . import pipeline as pl
from .data import LabeledSet, RotationSpec, UnlabeledSet, make_ssda_split, make_two_moons, rotate, split

SOURCE_RANGE = (0.0, 30.0)
TARGET_RANGE = (60.0, 90.0)
N_PER_DOMAIN = 500
NOISE = 0.1


@dataclass(frozen=True, eq=False)
class Task:
    source: LabeledSet
    target: UnlabeledSet
    target_labels: np.ndarray


def rotating_moons_task(seed: int, n: int = N_PER_DOMAIN, noise: float = NOISE,
                        source_range=SOURCE_RANGE, target_range=TARGET_RANGE, center: bool = True) -> Task:
    """Split one moons draw into halves and rotate each half by its own angle range."""
    ss = np.random.SeedSequence([seed, 7]).generate_state(4)
    base = make_two_moons(2 * n, noise, int(ss[0]), center=center)
    src, tgt = split(base, 0.5, int(ss[1]))
    src = rotate(src, RotationSpec(*source_range, int(ss[2])))
    tgt = rotate(tgt, RotationSpec(*target_range, int(ss[3])))
    return Task(src, tgt.unlabeled(), np.asarray(tgt.labels))


def base_config(seed: int = 0, **overrides) -> pl.RunConfig:
    return replace(pl.RunConfig(seed=seed), **overrides)


def vanilla_config(cfg: pl.RunConfig) -> pl.RunConfig:
    """Plain self-training: one stage, all targets, pseudo labels from the source model."""
    return replace(cfg, num_stages=1, sel_enh=False, lab_enh=False)


def gradual_vs_direct(seeds: Sequence[int], num_stages: int = 20, cfg: Optional[pl.RunConfig] = None) -> dict:
    """Target accuracy of source-only, vanilla self-training and the gradual method per seed."""
    out = {"source_only": [], "vanilla": [], "gradual": []}
    for seed in seeds:
        task = rotating_moons_task(seed)
        c = replace(cfg or base_config(), seed=seed)
        f0 = pl.train_source_model(task.source, c)
        out["source_only"].append(mdl.accuracy(f0, task.target.features, task.target_labels))
        out["vanilla"].append(pl.run_da(task.source, task.target, vanilla_config(c), task.target_labels,
                                        f0=f0).final_accuracy)
        out["gradual"].append(pl.run_da(task.source, task.target, replace(c, num_stages=num_stages),
                                        task.target_labels, f0=f0).final_accuracy)
    return {k: np.array(v) for k, v in out.items()}


def ablation(seeds: Sequence[int], arms: Sequence[pl.Arm] = pl.TABLE1_ARMS,
             cfg: Optional[pl.RunConfig] = None) -> dict:
    """Final accuracy per arm name, one entry per seed."""
    out = {a.name: [] for a in arms}
    for seed in seeds:
        task = rotating_moons_task(seed)
        c = replace(cfg or base_config(), seed=seed)
        f0 = pl.train_source_model(task.source, c)
        for arm in arms:
            res = pl.run_da(task.source, task.target, arm.apply(c), task.target_labels, f0=f0)
            out[arm.name].append(res.final_accuracy)
    return {k: np.array(v) for k, v in out.items()}


def stage_sweep(seeds: Sequence[int], stage_counts: Sequence[int] = (1, 2, 5, 10, 20, 40),
                cfg: Optional[pl.RunConfig] = None) -> dict:
    """Final accuracy as a function of the number of stages (full method)."""
    out = {m: [] for m in stage_counts}
    for seed in seeds:
        task = rotating_moons_task(seed)
        c = replace(cfg or base_config(), seed=seed)
        f0 = pl.train_source_model(task.source, c)
        for m in stage_counts:
            out[m].append(pl.run_da(task.source, task.target, replace(c, num_stages=m), task.target_labels,
                                    f0=f0).final_accuracy)
    return {m: np.array(v) for m, v in out.items()}


def ssda_vs_da(seeds: Sequence[int], shots: Sequence[int] = (1, 3), cfg: Optional[pl.RunConfig] = None) -> dict:
    """Source-only, DA and SSDA accuracy, all on the unlabeled remainder of the target.

    For every seed and shot count the labeled target rows are drawn first; DA and
    source-only are scored on the same unlabeled rows as the largest-shot SSDA run.
    """
    out = {"source_only": [], "da": []}
    out.update({f"ssda_{k}": [] for k in shots})
    for seed in seeds:
        task = rotating_moons_task(seed)
        c = replace(cfg or base_config(), seed=seed)
        full_target = LabeledSet(task.target.features, task.target_labels, task.source.num_classes,
                                 angles=task.target.angles)
        splits = {k: make_ssda_split(full_target, k, seed=pl.derive_seed(seed, 9)) for k in shots}
        # score everything on the rows that are unlabeled in every split
        common = np.ones(full_target.n, dtype=bool)
        for sp in splits.values():
            common[sp.labeled_indices] = False
        f0 = pl.train_source_model(task.source, c)
        out["source_only"].append(mdl.accuracy(f0, full_target.features[common], full_target.labels[common]))
        da = pl.run_da(task.source, task.target, c, task.target_labels, f0=f0)
        out["da"].append(mdl.accuracy(da.final_model, full_target.features[common], full_target.labels[common]))
        for k, sp in splits.items():
            res = pl.run_ssda(task.source, sp, replace(c, mode="SSDA"))
            out[f"ssda_{k}"].append(mdl.accuracy(res.final_model, full_target.features[common],
                                                 full_target.labels[common]))
    return {k: np.array(v) for k, v in out.items()}


def consecutive_vs_random(seeds: Sequence[int], cfg: Optional[pl.RunConfig] = None) -> dict:
    """Mean per-step consecutive A-distance for our selection and random selection,
    and the mean source/target A-distance in the same stage features."""
    out = {"ours": [], "random": [], "direct": []}
    for seed in seeds:
        task = rotating_moons_task(seed)
        c = replace(cfg or base_config(), seed=seed)
        f0 = pl.train_source_model(task.source, c)
        pools = {"source": task.source.features, "target": task.target.features}
        a_cfg = replace(dg.A_DISTANCE_CONFIG, seed=seed)
        ours = pl.run_da(task.source, task.target, c, f0=f0)
        rnd = pl.run_da(task.source, task.target, replace(c, sel_t="random", sel_s="random"), f0=f0)
        out["ours"].append(np.mean(dg.consecutive_discrepancy(ours.models, ours.domains, pools, a_cfg)))
        out["random"].append(np.mean(dg.consecutive_discrepancy(rnd.models, rnd.domains, pools, a_cfg)))
        out["direct"].append(np.mean(dg.direct_discrepancy(ours.models, task.source.features,
                                                           task.target.features, a_cfg)))
    return {k: np.array(v) for k, v in out.items()}


def shift_trends(seeds: Sequence[int], num_buckets: int = 12, bucket_width: float = 5.0,
                 n: int = 2 * N_PER_DOMAIN, hidden=(64,)) -> dict:
    """Seed-averaged accuracy, confidence and A-distance per rotation bucket."""
    curves = []
    for seed in seeds:
        base = make_two_moons(n, NOISE, seed)
        curves.append(dg.shift_study(base, RotationSpec(0.0, bucket_width, seed), bucket_width, num_buckets,
                                     hidden=hidden, seed=seed))
    r = np.arange(num_buckets)
    acc = np.mean([c.accuracy for c in curves], axis=0)
    conf = np.mean([c.mean_maxprob for c in curves], axis=0)
    adis = np.mean([c.a_dis for c in curves], axis=0)
    return {
        "r": r, "accuracy": acc, "mean_maxprob": conf, "a_dis": adis,
        "rho_accuracy": dg.spearman(acc, r), "rho_maxprob": dg.spearman(conf, r), "rho_a_dis": dg.spearman(adis, r),
        "curves": curves,
    }


def selection_angle_trend(seed: int = 0, num_stages: int = 24, source_range=SOURCE_RANGE,
                          target_range=(30.0, 60.0), cfg: Optional[pl.RunConfig] = None) -> dict:
    """Mean rotation of newly added targets and of dropped sources, stage by stage."""
    task = rotating_moons_task(seed, source_range=source_range, target_range=target_range)
    c = replace(cfg or base_config(), seed=seed, num_stages=num_stages)
    res = pl.run_da(task.source, task.target, c, task.target_labels)
    t_ang, s_ang = task.target.angles, task.source.angles
    added, dropped = [], []
    for prev, cur in zip(res.domains[:-1], res.domains[1:]):
        new_t = (cur["target"] == 1) & (prev["target"] == 0)
        gone_s = (cur["source"] == 0) & (prev["source"] == 1)
        added.append(float(t_ang[new_t].mean()) if new_t.any() else np.nan)
        dropped.append(float(s_ang[gone_s].mean()) if gone_s.any() else np.nan)
    return {"added_target_angle": np.array(added), "dropped_source_angle": np.array(dropped),
            "final_accuracy": res.final_accuracy}
