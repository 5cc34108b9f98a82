"""Source-only, unsupervised adaptation and few-label adaptation on the same target rows."""

from _common import parser, summarize

from gradshift import experiments as ex


def main():
    ap = parser(__doc__)
    ap.add_argument("--shots", default="1,3", help="labels per class, comma-separated")
    args = ap.parse_args()
    shots = tuple(int(s) for s in args.shots.split(","))
    summarize(ex.ssda_vs_da(range(args.seeds), shots), args.out)


if __name__ == "__main__":
    main()
