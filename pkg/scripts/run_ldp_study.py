#!/usr/bin/env python3
"""Tail-scaling study (the long one: ~20 minutes at the default sizes)."""

import argparse
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(ROOT, "results", "ldp_tail"))
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--config", default=os.path.join(ROOT, "configs", "ldp_tail.cfg"))
    args = parser.parse_args()

    rc = subprocess.call([sys.executable, "-m", "spdelab.cli", "run", args.config,
                          "--workers", str(args.workers), "--output-dir", args.out])
    if rc != 0:
        return rc
    shim = os.path.join(ROOT, "plots", "make_figures")
    manifest = os.path.join(args.out, "manifest.json")
    return subprocess.call([shim, manifest, "--out", os.path.join(args.out, "figures")])


if __name__ == "__main__":
    sys.exit(main())
