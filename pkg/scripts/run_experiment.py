#!/usr/bin/env python3
"""The full scaled experiment: 2500 scenes, 4-stage schedule, ~25 min CPU."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dualground.cli import main

OUT = os.environ.get("DUALGROUND_OUT", "out/experiment")


def run():
    corpus = os.path.join(OUT, "corpus")
    run_dir = os.path.join(OUT, "run")
    steps = [
        ["gen-data", "--out", corpus, "--seed", "7", "--scenes", "2500", "--k", "8"],
        ["train", "--corpus", corpus, "--out", run_dir,
         "--epochs", "30,10,15,5", "--batch-size", "16",
         "--inverse-temperature", "20"],
        ["eval", "--checkpoint",
         os.path.join(run_dir, "checkpoint_2_teacher_fine_tune.ckpt"),
         "--corpus", corpus,
         "--out", os.path.join(run_dir, "teacher_metrics.json")],
        ["eval", "--checkpoint",
         os.path.join(run_dir, "checkpoint_4_student_fine_tune.ckpt"),
         "--corpus", corpus,
         "--out", os.path.join(run_dir, "student_metrics.json")],
        ["inspect", "--checkpoint",
         os.path.join(run_dir, "checkpoint_2_teacher_fine_tune.ckpt"),
         "--corpus", corpus, "--description-id", "0",
         "--out", os.path.join(run_dir, "score_dump.csv")],
    ]
    for argv in steps:
        print(f"\n$ dualground {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
