"""Command-line entry point.

Exit codes: 0 ok, 2 usage or validation error, 3 refused to overwrite existing
output, 4 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics as dg
from . import model as mdl
from . import pipeline as pl
from .data import (LabeledSet, RotationSpec, UnlabeledSet, load_idx_images, make_ssda_split, make_two_moons,
                   read_csv, rotate, write_csv)
from .errors import FormatError, InvalidArgument, StateError, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_EXISTS, EXIT_DIVERGED = 0, 2, 3, 4
DATA_ENV = "GRADSHIFT_DATA_DIR"
RECIPES = ("moons", "mnist")

EPILOG = """exit codes:
  0  success
  2  usage or validation error (nothing is written)
  3  output exists; pass --force to overwrite
  4  training diverged (non-finite loss)

Relative dataset paths resolve against $GRADSHIFT_DATA_DIR when it is set."""

DEFAULT_EXPERIMENT = {
    "run": {},
    "source": {"recipe": "moons", "n": 500, "noise": 0.1, "rotate": "0:30", "seed": 0},
    "target": {"recipe": "moons", "n": 500, "noise": 0.1, "rotate": "60:90", "seed": 1},
    "ssda": {"labels_per_class": 3, "seed": 0},
    "evaluate": True,
    "out_dir": "runs/moons",
}
EXPERIMENT_KEYS = set(DEFAULT_EXPERIMENT)
ROLE_KEYS = {"recipe", "path", "n", "noise", "rotate", "seed", "center", "images", "labels", "num_classes"}

log = logging.getLogger("gradshift")


class UsageError(Exception):
    pass


class Exists(Exception):
    pass


def data_root() -> Optional[Path]:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def resolve(path) -> Path:
    p = Path(path)
    root = data_root()
    if not p.is_absolute() and root is not None:
        return root / p
    return p


# ---------------------------------------------------------------- datasets

def generate_recipe(spec: dict):
    """Build a labeled dataset from a recipe dict (``moons`` or ``mnist``)."""
    recipe = spec.get("recipe")
    seed = int(spec.get("seed", 0))
    if recipe == "moons":
        data = make_two_moons(int(spec.get("n", 1000)), float(spec.get("noise", 0.1)), seed,
                              center=bool(spec.get("center", True)))
    elif recipe == "mnist":
        root = data_root() or Path(".")
        images = resolve(spec.get("images", root / "train-images-idx3-ubyte.gz"))
        labels = resolve(spec.get("labels", root / "train-labels-idx1-ubyte.gz"))
        data = load_idx_images(images, labels)
        n = spec.get("n")
        if n is not None:
            rng = np.random.default_rng(seed)
            data = data.subset(np.sort(rng.choice(data.n, min(int(n), data.n), replace=False)))
    else:
        raise InvalidArgument(f"unknown recipe {recipe!r}; choose from {RECIPES}")
    if spec.get("rotate"):
        rs = RotationSpec.parse(spec["rotate"])
        data = rotate(data, replace(rs, seed=pl.derive_seed(seed, 17)))
    return data


def validate_role(spec, role: str) -> None:
    if not isinstance(spec, dict):
        raise InvalidArgument(f"{role} must be an object")
    unknown = set(spec) - ROLE_KEYS
    if unknown:
        raise InvalidArgument(f"unknown {role} keys: {sorted(unknown)}")
    if ("recipe" in spec) == ("path" in spec):
        raise InvalidArgument(f"{role} needs exactly one of 'recipe' or 'path'")
    if "recipe" in spec and spec["recipe"] not in RECIPES:
        raise InvalidArgument(f"unknown recipe {spec['recipe']!r}; choose from {RECIPES}")
    if "path" in spec and not resolve(spec["path"]).exists():
        raise InvalidArgument(f"{role} file not found: {resolve(spec['path'])}")
    if "rotate" in spec:
        RotationSpec.parse(spec["rotate"])


def load_role(spec: dict, role: str, num_classes: Optional[int] = None):
    validate_role(spec, role)
    if "path" in spec:
        return read_csv(resolve(spec["path"]), num_classes=spec.get("num_classes", num_classes))
    return generate_recipe(spec)


# ---------------------------------------------------------------- config

def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = doc
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise InvalidArgument(f"cannot set {key}: {p} is not an object")
        cur = nxt
    cur[parts[-1]] = value


def load_experiment(path: Optional[str], overrides: list[tuple[str, object]]) -> dict:
    doc = copy.deepcopy(DEFAULT_EXPERIMENT)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InvalidArgument(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"{p}: invalid JSON ({e})") from None
        if not isinstance(user, dict):
            raise InvalidArgument(f"{p}: top level must be an object")
        unknown = set(user) - EXPERIMENT_KEYS
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        doc.update(user)
    for key, value in overrides:
        set_dotted(doc, key, value)
    if set(doc) - EXPERIMENT_KEYS:
        raise InvalidArgument(f"unknown config keys: {sorted(set(doc) - EXPERIMENT_KEYS)}")
    return doc


def run_config(doc: dict) -> pl.RunConfig:
    run = doc.get("run") or {}
    if not isinstance(run, dict):
        raise InvalidArgument("run must be an object")
    try:
        return pl.RunConfig.from_dict(run)
    except TypeError as e:
        raise InvalidArgument(f"bad run config: {e}") from None


def collect_overrides(args) -> list[tuple[str, object]]:
    out = []
    for item in args.set or []:
        if "=" not in item:
            raise InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), parse_value(v)))
    flag_map = {"num_stages": "run.num_stages", "seed": "run.seed", "mode": "run.mode", "lam": "run.lam",
                "kernel": "run.kernel", "sel_t": "run.sel_t", "sel_s": "run.sel_s",
                "iterations": "run.train.iterations", "out": "out_dir"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append((key, v))
    if getattr(args, "no_sel_enh", False):
        out.append(("run.sel_enh", False))
    if getattr(args, "no_lab_enh", False):
        out.append(("run.lab_enh", False))
    return out


class Prepared:
    """Everything ``adapt`` needs, built without touching the output directory."""

    def __init__(self, doc: dict):
        self.doc = doc
        self.cfg = run_config(doc)
        if not doc.get("out_dir"):
            raise InvalidArgument("out_dir must be set")
        self.out = Path(doc["out_dir"])
        self.source = load_role(doc.get("source"), "source")
        if not isinstance(self.source, LabeledSet):
            raise InvalidArgument("source data must be labeled")
        target = load_role(doc.get("target"), "target", self.source.num_classes)
        if target.dim != self.source.dim:
            raise InvalidArgument(f"source has d={self.source.dim} but target has d={target.dim}")
        self.target_labeled = target if isinstance(target, LabeledSet) else None
        self.target = target.unlabeled() if isinstance(target, LabeledSet) else target
        evaluate = bool(doc.get("evaluate", True))
        self.eval_labels = self.target_labeled.labels if (evaluate and self.target_labeled is not None) else None
        self.split = None
        if self.cfg.mode == "SSDA":
            if self.target_labeled is None:
                raise InvalidArgument("SSDA mode needs a labeled target file or recipe")
            ss = doc.get("ssda") or {}
            self.split = make_ssda_split(self.target_labeled, int(ss.get("labels_per_class", 3)),
                                         seed=int(ss.get("seed", 0)))

    def run(self, resume_stage: Optional[int] = None) -> pl.RunResult:
        cfg = replace(self.cfg, checkpoint_dir=str(self.out))
        if self.split is not None:
            ev = self.split.unlabeled_labels if self.eval_labels is not None else None
            return pl.run_ssda(self.source, self.split, cfg, ev, resume_stage=resume_stage)
        return pl.run_da(self.source, self.target, cfg, self.eval_labels, resume_stage=resume_stage)


def parse_resume(text: Optional[str]) -> Optional[int]:
    if text is None:
        return None
    t = text.strip()
    if t.startswith("stage_"):
        t = t[len("stage_"):]
    try:
        return int(t)
    except ValueError:
        raise InvalidArgument(f"--resume expects stage_K, got {text!r}") from None


def fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    spec = {"recipe": args.recipe, "n": args.n, "noise": args.noise, "seed": args.seed,
            "center": not args.no_center}
    if args.rotate:
        spec["rotate"] = args.rotate
    if args.images:
        spec["images"] = args.images
    if args.labels:
        spec["labels"] = args.labels
    if args.n < 1:
        raise InvalidArgument("--n must be >= 1")
    if args.rotate:
        RotationSpec.parse(args.rotate)
    out = resolve(args.out)
    if out.exists() and not args.force:
        raise Exists(f"{out} exists; pass --force to overwrite")
    data = generate_recipe(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    print(f"wrote {data.n} rows to {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    doc = load_experiment(args.config, collect_overrides(args))
    prep = Prepared(doc)
    out = Path(args.model_out) if args.model_out else prep.out / "source_model.json"
    if out.exists() and not args.force:
        raise Exists(f"{out} exists; pass --force to overwrite")
    f0 = pl.train_source_model(prep.source, prep.cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    mdl.save(f0, out)
    src_acc = mdl.accuracy(f0, prep.source.features, prep.source.labels)
    tgt_acc = mdl.accuracy(f0, prep.target.features, prep.eval_labels) if prep.eval_labels is not None else None
    print(f"source_accuracy={src_acc:.4f} target_accuracy={fmt(tgt_acc)} model={out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    doc = load_experiment(args.config, collect_overrides(args))
    resume = parse_resume(args.resume)
    prep = Prepared(doc)
    if resume is not None:
        if not (prep.out / f"stage_{resume}").is_dir():
            raise InvalidArgument(f"no checkpoint {prep.out / f'stage_{resume}'} to resume from")
        if resume > prep.cfg.num_stages:
            raise InvalidArgument(f"resume stage {resume} exceeds num_stages {prep.cfg.num_stages}")
    elif (prep.out / "report.json").exists() and not args.force:
        raise Exists(f"{prep.out} already holds a run; pass --force or --resume")
    prep.out.mkdir(parents=True, exist_ok=True)
    (prep.out / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    res = prep.run(resume)
    print(f"final_accuracy={fmt(res.final_accuracy)} stages={len(res.stage_reports)} out={prep.out}")
    return EXIT_OK


def cmd_diagnose_shift(args) -> int:
    if args.buckets < 1 or args.bucket_width <= 0:
        raise InvalidArgument("need --buckets >= 1 and --bucket-width > 0")
    out_dir = Path(args.out)
    csv_path = out_dir / "shift_curve.csv"
    if args.data:
        base = read_csv(resolve(args.data))
        if not isinstance(base, LabeledSet):
            raise InvalidArgument("--data must be a labeled CSV")
    else:
        if args.n < 8:
            raise InvalidArgument("--n must be >= 8")
        base = make_two_moons(args.n, args.noise, args.seed)
    src_spec = RotationSpec.parse(args.source_rotate) if args.source_rotate else \
        RotationSpec(0.0, args.bucket_width, args.seed)
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (64,)
    if csv_path.exists() and not args.force:
        raise Exists(f"{csv_path} exists; pass --force to overwrite")
    curve = dg.shift_study(base, replace(src_spec, seed=args.seed), args.bucket_width, args.buckets,
                           hidden=hidden, seed=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve.to_csv(csv_path)
    print(f"rho_accuracy={dg.spearman(curve.accuracy, curve.r):.3f} "
          f"rho_maxprob={dg.spearman(curve.mean_maxprob, curve.r):.3f} "
          f"rho_a_dis={dg.spearman(curve.a_dis, curve.r):.3f} out={csv_path}")
    return EXIT_OK


def cmd_diagnose_consecutive(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir() or not (run_dir / "stage_0").is_dir():
        raise InvalidArgument(f"no run directory at {run_dir}")
    out = Path(args.out) if args.out else run_dir / "consecutive.csv"
    if out.exists() and not args.force:
        raise Exists(f"{out} exists; pass --force to overwrite")
    a_cfg = replace(dg.A_DISTANCE_CONFIG, seed=args.seed)
    values, direct = dg.consecutive_from_run(run_dir, a_cfg, with_direct=args.with_direct)
    dg.write_consecutive_csv(values, out, direct)
    print(f"mean_a_dis={np.mean(values):.4f} rows={len(values)} out={out}")
    return EXIT_OK


def parse_seeds(text: str) -> list[int]:
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise InvalidArgument(f"bad --seeds {text!r}; use 0,1,2 or 0:5") from None


def cmd_ablate(args) -> int:
    doc = load_experiment(args.config, collect_overrides(args))
    prep = Prepared(doc)
    if prep.cfg.mode != "DA":
        raise InvalidArgument("the ablation grid runs in DA mode")
    names = [a.strip() for a in args.arms.split(",")] if args.arms else [a.name for a in pl.TABLE1_ARMS]
    bad = [n for n in names if n not in pl.ARMS_BY_NAME]
    if bad:
        raise InvalidArgument(f"unknown arms {bad}; choose from {list(pl.ARMS_BY_NAME)}")
    seeds = parse_seeds(args.seeds)
    if not seeds:
        raise InvalidArgument("--seeds selects no seeds")
    if args.jobs < 1:
        raise InvalidArgument("--jobs must be >= 1")
    out = Path(args.out) if args.out else prep.out / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    rows = pl.run_ablation_grid(prep.source, prep.target, prep.cfg, [pl.ARMS_BY_NAME[n] for n in names], seeds,
                                prep.eval_labels, out, args.jobs)
    for name in names:
        accs = [r["accuracy"] for r in rows if r["arm"] == name and r["accuracy"] is not None]
        print(f"{name:12s} mean_accuracy={fmt(float(np.mean(accs)) if accs else None)}")
    print(f"rows={len(rows)} out={out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="experiment JSON (default: built-in rotating moons task)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, dotted, JSON value (e.g. run.train.eta0=0.1)")
    p.add_argument("--num-stages", type=int, help="override run.num_stages")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--mode", choices=("DA", "SSDA"), help="override run.mode")
    p.add_argument("--lam", type=float, help="override run.lam")
    p.add_argument("--kernel", help="override run.kernel")
    p.add_argument("--sel-t", choices=pl.SELECTION_MODES, help="override run.sel_t")
    p.add_argument("--sel-s", choices=pl.SELECTION_MODES, help="override run.sel_s")
    p.add_argument("--no-sel-enh", action="store_true", help="set run.sel_enh false")
    p.add_argument("--no-lab-enh", action="store_true", help="set run.lab_enh false")
    p.add_argument("--iterations", type=int, help="override run.train.iterations (total adaptation budget)")
    p.add_argument("--out", help="override out_dir")


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="gradshift", description="Gradual self-training toolkit.",
                                 epilog=EPILOG, formatter_class=fmt_cls)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset CSV from a recipe", epilog=EPILOG, formatter_class=fmt_cls)
    g.add_argument("out", help="output CSV path")
    g.add_argument("--recipe", choices=RECIPES, default="moons")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--rotate", help="rotation range lo:hi in degrees")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-center", action="store_true", help="keep the canonical moons coordinates")
    g.add_argument("--images", help="IDX images file (mnist recipe)")
    g.add_argument("--labels", help="IDX labels file (mnist recipe)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train-source", help="train the source model only", epilog=EPILOG, formatter_class=fmt_cls)
    _add_config_flags(t)
    t.add_argument("--model-out", help="model JSON path (default: <out_dir>/source_model.json)")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train_source)

    a = sub.add_parser("adapt", help="run gradual adaptation", epilog=EPILOG, formatter_class=fmt_cls)
    _add_config_flags(a)
    a.add_argument("--resume", metavar="stage_K", help="continue after a verified checkpoint")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_adapt)

    d = sub.add_parser("diagnose", help="shift diagnostics", epilog=EPILOG, formatter_class=fmt_cls)
    dsub = d.add_subparsers(dest="diagnostic", required=True)
    s = dsub.add_parser("shift", help="accuracy, confidence and A-distance vs. rotation",
                        epilog=EPILOG, formatter_class=fmt_cls)
    s.add_argument("--buckets", type=int, default=12)
    s.add_argument("--bucket-width", type=float, default=5.0)
    s.add_argument("--data", help="labeled CSV to use instead of generated moons")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--source-rotate", help="source rotation lo:hi (default 0:bucket-width)")
    s.add_argument("--hidden", default="64", help="comma-separated hidden widths")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_diagnose_shift)
    c = dsub.add_parser("consecutive", help="A-distance between consecutive intermediate domains",
                        epilog=EPILOG, formatter_class=fmt_cls)
    c.add_argument("--run", required=True, help="run directory written by adapt")
    c.add_argument("--out", help="CSV path (default: <run>/consecutive.csv)")
    c.add_argument("--with-direct", action="store_true", help="add a source/target column")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_diagnose_consecutive)

    b = sub.add_parser("ablate", help="run the selection/enhancement ablation grid",
                       epilog=EPILOG, formatter_class=fmt_cls)
    _add_config_flags(b)
    b.add_argument("--arms", help=f"comma-separated subset of {','.join(pl.ARMS_BY_NAME)}")
    b.add_argument("--seeds", default="0", help="0,1,2 or 0:5")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, FormatError, StateError, UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exists as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
