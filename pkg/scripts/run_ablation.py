"""Selection and enhancement ablation arms on rotating moons."""

from _common import parser, summarize

from gradshift import experiments as ex
from gradshift import pipeline as pl


def main():
    ap = parser(__doc__)
    ap.add_argument("--arms", default=",".join(pl.ARMS_BY_NAME), help="comma-separated arm names")
    args = ap.parse_args()
    arms = [pl.ARMS_BY_NAME[a.strip()] for a in args.arms.split(",")]
    summarize(ex.ablation(range(args.seeds), arms), args.out)


if __name__ == "__main__":
    main()
