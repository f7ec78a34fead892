#!/usr/bin/env python3
"""Full desk-scale reduction study: sweep, rate fit, convergence figure.

Roughly 5-10 minutes at the default sizes.  Results land in
results/reduction/ next to the repository root; pass --out to move them.
"""

import argparse
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(ROOT, "results", "reduction"))
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--config", default=os.path.join(ROOT, "configs", "reduction.cfg"))
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
