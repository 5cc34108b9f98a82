"""Per-step A-distance between consecutive intermediate domains, ours vs. random selection."""

from _common import parser, summarize

from gradshift import experiments as ex


def main():
    args = parser(__doc__).parse_args()
    summarize(ex.consecutive_vs_random(range(args.seeds)), args.out)


if __name__ == "__main__":
    main()
