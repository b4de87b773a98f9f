#!/usr/bin/env python3
"""Fusion x substitution ablation grid (teacher-only), small table output.

Rows: R1 concat/no-substitution, R2 add/no-substitution,
      R3 concat/substitution,    R4 add/substitution.
Desk-scale accuracies are not expected to reproduce any published ordering;
the grid exists to make the comparison runnable.
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dualground.cli import main

OUT = os.environ.get("DUALGROUND_OUT", "out/ablation")
SCENES = os.environ.get("ABLATION_SCENES", "800")
EPOCHS = os.environ.get("ABLATION_EPOCHS", "12,6,1,1")

ROWS = [
    ("R1", "concat_project", True),
    ("R2", "add", True),
    ("R3", "concat_project", False),
    ("R4", "add", False),
]


def run():
    corpus = os.path.join(OUT, "corpus")
    code = main(["gen-data", "--out", corpus, "--seed", "7",
                 "--scenes", SCENES, "--k", "8"])
    if code != 0:
        return code
    results = {}
    for name, fusion, no_gtas in ROWS:
        run_dir = os.path.join(OUT, name)
        argv = ["train", "--corpus", corpus, "--out", run_dir,
                "--epochs", EPOCHS, "--batch-size", "16",
                "--inverse-temperature", "20",
                "--fusion", fusion, "--mode", "teacher-only", "--quiet"]
        if no_gtas:
            argv.append("--no-gtas")
        print(f"\n$ dualground {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            return code
        with open(os.path.join(run_dir, "summary.json")) as fh:
            results[name] = json.load(fh)["final"]["teacher"]

    print("\nrow  fusion           substitution  overall  easy   hard")
    for name, fusion, no_gtas in ROWS:
        m = results[name]
        hard = f"{m['hard']:.3f}" if m["hard"] is not None else "  -  "
        print(f"{name}   {fusion:<15}  {'off' if no_gtas else 'on ':<12} "
              f"{m['overall']:.3f}    {m['easy']:.3f}  {hard}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
