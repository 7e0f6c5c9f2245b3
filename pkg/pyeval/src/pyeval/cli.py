"""Command-line entry: pyeval --mode {echo,toy} [--seed S] [--steps N] ..."""

from __future__ import annotations

import argparse
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyeval", description=__doc__)
    parser.add_argument("--mode", choices=["echo", "toy"], default="echo")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=300,
                        help="toy mode: training steps per request")
    parser.add_argument("--metrics", default="0.5,0.5,0.5",
                        help="echo mode: fixed miou,mean_acc,fw_iou")
    parser.add_argument("--lookup",
                        help="echo mode: JSON file mapping genotypes to triples")
    parser.add_argument("--shuffle-buffer", type=int, default=0,
                        help="hold N requests and answer them in random order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .serve import EchoScorer, ToyScorer, serve

    if args.mode == "echo":
        triple = tuple(float(v) for v in args.metrics.split(","))
        if len(triple) != 3:
            print("--metrics needs three comma-separated values", file=sys.stderr)
            return 1
        scorer = EchoScorer(triple, args.lookup)
    else:
        import torch

        torch.set_num_threads(1)
        scorer = ToyScorer(args.seed, args.steps)
    return serve(scorer, sys.stdin, sys.stdout,
                 shuffle_buffer=args.shuffle_buffer, shuffle_seed=args.seed)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
