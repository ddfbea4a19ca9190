#!/usr/bin/env python3
"""Run the desk-scale training experiments and write ``experiments.csv``.

    python scripts/run_experiments.py --out runs/experiments
    python scripts/run_experiments.py --iterations 300 --seeds 0   # quick look
"""

import argparse
import os
import sys
from dataclasses import replace

from malleable25d import experiments


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/experiments")
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--variants", nargs="+", default=["learned", "frozen", "standard", "noisy"],
                    choices=["learned", "frozen", "standard", "noisy"])
    args = ap.parse_args(argv)

    cfg = experiments.ExperimentConfig()
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.iterations is not None:
        cfg.train = replace(cfg.train, iterations=args.iterations)

    def show(r):
        extra = "" if r.raw_entropy is None else f" entropy raw {r.raw_entropy:.3f} scaled {r.scaled_entropy:.3f}"
        print(f"{r.variant:9s} seed {r.seed}  acc {100 * r.test_acc:6.2f}  width {r.mean_width:.3f}"
              f"{extra}  ({r.seconds:.0f}s)", flush=True)

    results = experiments.run_all(cfg, tuple(args.variants), progress=show)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "experiments.csv")
    experiments.write_results(path, results)
    for v in args.variants:
        print(f"mean {v:9s} acc {100 * experiments.mean_of(results, v, 'test_acc'):6.2f}"
              f"  width {experiments.mean_of(results, v, 'mean_width'):.3f}")
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
