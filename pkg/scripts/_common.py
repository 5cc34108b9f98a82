"""Small helpers shared by the experiment scripts."""

import argparse
import json
from pathlib import Path

import numpy as np


def parser(doc: str, seeds: int = 5) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=doc)
    ap.add_argument("--seeds", type=int, default=seeds, help="number of seeds, 0..N-1")
    ap.add_argument("--out", help="optional JSON file for the per-seed results")
    return ap


def summarize(results: dict, out=None) -> None:
    for k, v in results.items():
        v = np.asarray(v, dtype=float)
        print(f"{str(k):14s} mean={v.mean():.4f} std={v.std():.4f} per_seed={np.round(v, 3).tolist()}")
    if out:
        doc = {str(k): np.asarray(v, dtype=float).tolist() for k, v in results.items()}
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(doc, indent=1) + "\n")
