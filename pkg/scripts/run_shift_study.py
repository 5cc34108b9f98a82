"""Accuracy, confidence and A-distance of a source model on increasingly rotated moons."""

from _common import parser

from gradshift import experiments as ex


def main():
    ap = parser(__doc__)
    ap.add_argument("--buckets", type=int, default=12)
    ap.add_argument("--width", type=float, default=5.0)
    args = ap.parse_args()
    t = ex.shift_trends(range(args.seeds), args.buckets, args.width)
    print("r  accuracy  mean_maxprob  a_dis")
    for r, a, c, d in zip(t["r"], t["accuracy"], t["mean_maxprob"], t["a_dis"]):
        print(f"{r:2d}  {a:.4f}    {c:.4f}        {d:.4f}")
    print(f"spearman: accuracy {t['rho_accuracy']:.3f} maxprob {t['rho_maxprob']:.3f} a_dis {t['rho_a_dis']:.3f}")
    if args.out:
        import json
        from pathlib import Path

        keys = ("accuracy", "mean_maxprob", "a_dis")
        doc = {k: t[k].tolist() for k in keys}
        doc.update({k: t[k] for k in ("rho_accuracy", "rho_maxprob", "rho_a_dis")})
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
