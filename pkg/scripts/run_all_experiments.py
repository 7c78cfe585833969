#!/usr/bin/env python3
"""Run every experiment end to end and collect the outputs under results/.

Drives the installed CLI in-process, one subdirectory per experiment:

    results/
      traces/      synthetic corpus + threshold sweep over it
      bandit/      online threshold adaptation log and summary
      compare/     adaptive vs fixed threshold across distortion levels
      ablation/    exit-training loss variants on the toy task
      lambda/      latency-cost sweep
      toy/         two-stage trained toy checkpoint + sweep over its exits

`--quick` shrinks horizons ~100x for a fast smoke pass; default sizes
reproduce the committed experiment numbers in a few minutes.
"""

import argparse
import os
import sys
import time

from exitsim.cli import main as cli


def run(label, argv):
    started = time.monotonic()
    code = cli(argv)
    if code != 0:
        print(f"{label}: FAILED with exit code {code}", file=sys.stderr)
        sys.exit(code)
    print(f"{label}: done in {time.monotonic() - started:.0f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results", help="output root")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument(
        "--quick", action="store_true", help="small horizons, smoke test only"
    )
    args = parser.parse_args()

    seed = ["--seed", str(args.seed)]
    if args.quick:
        bandit_tokens, compare_tokens, oracle = "1000", "2000", "2000"
        stage1, stage2, every = "100", "80", "40"
    else:
        bandit_tokens, compare_tokens, oracle = "100000", "200000", "200000"
        stage1, stage2, every = "800", "600", "200"

    out = lambda name: ["--out-dir", os.path.join(args.out, name)]

    run("gen-traces", ["gen-traces", *seed, *out("traces")])
    run(
        "sweep-threshold",
        [
            "sweep-threshold",
            "--traces",
            os.path.join(args.out, "traces", "traces.txt"),
            *seed,
            *out("traces"),
        ],
    )
    run(
        "bandit",
        [
            "bandit",
            "--tokens", bandit_tokens,
            "--oracle-samples", oracle,
            *seed,
            *out("bandit"),
        ],
    )
    run(
        "compare-distortion",
        [
            "compare-distortion",
            "--tokens", compare_tokens,
            "--oracle-samples", oracle,
            *seed,
            *out("compare"),
        ],
    )
    run(
        "ablation",
        [
            "ablation",
            "--stage1-epochs", stage1,
            "--stage2-epochs", stage2,
            "--decay-every", every,
            *seed,
            *out("ablation"),
        ],
    )
    run(
        "lambda-sweep",
        [
            "lambda-sweep",
            "--tokens", bandit_tokens,
            "--oracle-samples", oracle,
            *seed,
            *out("lambda"),
        ],
    )
    run(
        "train-toy",
        [
            "train-toy",
            "--stage1-epochs", stage1,
            "--stage2-epochs", stage2,
            "--decay-every", every,
            *seed,
            *out("toy"),
        ],
    )
    run(
        "sweep-toy-exits",
        [
            "sweep-threshold",
            "--model",
            os.path.join(args.out, "toy", "toy_cascade.json"),
            *seed,
            *out("toy"),
        ],
    )
    print(f"all outputs under {args.out}/")


if __name__ == "__main__":
    main()
