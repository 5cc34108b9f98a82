"""Source-only vs. one-stage self-training vs. the gradual method on rotating moons."""

from _common import parser, summarize

from gradshift import experiments as ex


def main():
    ap = parser(__doc__)
    ap.add_argument("--stages", type=int, default=20)
    args = ap.parse_args()
    summarize(ex.gradual_vs_direct(range(args.seeds), num_stages=args.stages), args.out)


if __name__ == "__main__":
    main()
