"""Calibration run for the gradual-vs-direct margin.

Runs source-only, vanilla self-training (one stage) and the gradual method on
the rotating-moons task and records the observed margin next to the threshold
the acceptance gate uses.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from gradshift import experiments as ex

THRESHOLD = 0.05


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--stages", type=int, default=20)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "calibration" / "margin.json"))
    args = ap.parse_args()
    r = ex.gradual_vs_direct(range(args.seeds), num_stages=args.stages)
    margins = r["gradual"] - r["vanilla"]
    doc = {
        "task": "rotating moons, source 0-30 deg, target 60-90 deg, 500 per domain, noise 0.1",
        "num_stages": args.stages,
        "seeds": list(range(args.seeds)),
        "per_seed": {k: [round(float(v), 4) for v in vals] for k, vals in r.items()},
        "mean": {k: round(float(np.mean(v)), 4) for k, v in r.items()},
        "observed_margin": round(float(np.mean(margins)), 4),
        "min_seed_margin": round(float(margins.min()), 4),
        "margin_threshold": THRESHOLD,
        "threshold_confirmed": bool(np.mean(margins) >= THRESHOLD),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(json.dumps(doc["mean"]), f"margin={doc['observed_margin']:.3f}", f"threshold={THRESHOLD}")


if __name__ == "__main__":
    main()
