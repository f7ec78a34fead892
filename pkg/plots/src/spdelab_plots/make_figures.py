"""CLI: turn one experiment manifest into its figures.

Usage: make_figures <manifest.json> --out DIR [--format png|svg]

The recipe recorded in the manifest decides which figures apply; the CSVs
are located next to the manifest under their documented names.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .figures import FigureSpec, render
from .schema import SchemaError

_RECIPE_FIGURES = {
    "reduction": ("convergence", {"aggregate": "aggregate.csv", "fit": "rate_fit.csv"},
                  "reduction sweep"),
    "normal_deviation": ("paths", {"sample_paths": "sample_paths.csv"},
                         "deviation paths"),
    "ldp_tail": ("ldp_tail", {"tail": "ldp_tail.csv"}, "scaled tail probabilities"),
    "rate_function": ("rate", {"control": "control.csv",
                               "rate_result": "rate_result.csv"},
                      "minimum-energy control"),
}


def figures_for_manifest(manifest_path: str, out_dir: str, fmt: str = "png") -> list[dict]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    outputs = manifest.get("outputs", {})
    recipe = manifest.get("recipe", "")
    if recipe not in _RECIPE_FIGURES:
        raise SchemaError(f"recipe {recipe!r} produces no figures")
    kind, needed, title = _RECIPE_FIGURES[recipe]
    for name in needed.values():
        if name not in outputs:
            raise SchemaError(f"manifest lists no {name!r} for recipe {recipe!r}")
    os.makedirs(out_dir, exist_ok=True)
    spec = FigureSpec(kind=kind,
                      inputs={k: os.path.join(base, v) for k, v in needed.items()},
                      output=os.path.join(out_dir, f"{kind}.{fmt}"),
                      title=title)
    return [render(spec)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="make_figures",
                                     description="spdelab figure pipeline")
    parser.add_argument("manifest", help="path to a run's manifest.json")
    parser.add_argument("--out", required=True, help="output directory for images")
    parser.add_argument("--format", default="png", choices=("png", "svg"))
    args = parser.parse_args(argv)
    try:
        made = figures_for_manifest(args.manifest, args.out, args.format)
    except (OSError, SchemaError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    for info in made:
        print(info["output"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
