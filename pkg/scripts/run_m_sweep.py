"""Final target accuracy as a function of the number of stages."""

from _common import parser, summarize

from gradshift import experiments as ex


def main():
    ap = parser(__doc__)
    ap.add_argument("--stages", default="1,2,5,10,20,40", help="comma-separated stage counts")
    args = ap.parse_args()
    counts = tuple(int(s) for s in args.stages.split(","))
    summarize({f"M={m}": v for m, v in ex.stage_sweep(range(args.seeds), counts).items()}, args.out)


if __name__ == "__main__":
    main()
