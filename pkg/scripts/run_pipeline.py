#!/usr/bin/env python3
"""Toy-scale end-to-end demo: corpus, schedule, eval, score dump (~2 min)."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dualground.cli import main

OUT = os.environ.get("DUALGROUND_OUT", "out/demo")


def run():
    corpus = os.path.join(OUT, "corpus")
    run_dir = os.path.join(OUT, "run")
    steps = [
        ["gen-data", "--out", corpus, "--seed", "7", "--scenes", "150", "--k", "8"],
        ["train", "--corpus", corpus, "--out", run_dir,
         "--epochs", "6,3,3,2", "--batch-size", "16"],
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
        ["gradcheck", "--sample", "3"],
    ]
    for argv in steps:
        print(f"\n$ dualground {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
