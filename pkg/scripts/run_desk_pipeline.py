#!/usr/bin/env python3
"""Run atlas-build, both training stages, IPO, decode and eval into one directory."""
import argparse
import sys
import time

from brainroi import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/desk")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    common = ["--out-dir", args.out_dir, "--seed", str(args.seed)]
    if args.config:
        common += ["--config", args.config]
    steps = [["atlas-build", "--synthetic"], ["train", "--stage", "1"], ["train", "--stage", "2"],
             ["ipo"], ["decode"], ["eval"]]
    t0 = time.perf_counter()
    for step in steps:
        print(f"$ brainroi {' '.join(step + common)}", flush=True)
        if cli.main(step + common) != 0:
            return 1
    print(f"done in {time.perf_counter() - t0:.1f}s; artifacts under {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
