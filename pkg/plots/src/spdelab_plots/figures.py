"""The four figure kinds: convergence, paths, ldp_tail, rate.

Each function writes one image and returns the annotation values it drew,
so tests can assert the displayed numbers equal the CSV values exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .schema import SchemaError, read_csv_columns  # noqa: E402

KINDS = ("convergence", "paths", "ldp_tail", "rate")


@dataclass
class FigureSpec:
    """Inputs, kind and output path of one figure."""

    kind: str
    inputs: dict
    output: str
    title: str = ""
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; one of {KINDS}")


def render(spec: FigureSpec) -> dict:
    """Dispatch a FigureSpec after checking the referenced CSVs exist."""
    import os

    for name, path in spec.inputs.items():
        if not os.path.exists(path):
            raise SchemaError(f"figure input {name!r} does not exist: {path}")
    if spec.kind == "convergence":
        return plot_convergence(spec.inputs["aggregate"], spec.inputs["fit"],
                                spec.output, title=spec.title,
                                quantity=spec.options.get("quantity"))
    if spec.kind == "paths":
        return plot_paths(spec.inputs["sample_paths"], spec.output, title=spec.title)
    if spec.kind == "ldp_tail":
        return plot_ldp_tail(spec.inputs["tail"], spec.output, title=spec.title)
    return plot_rate(spec.inputs["control"], spec.inputs["rate_result"],
                     spec.output, title=spec.title)


def _finish(fig, ax, output, title):
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", linewidth=0.4, alpha=0.5)
    fig.tight_layout()
    fig.savefig(output, dpi=150)
    plt.close(fig)


def plot_convergence(aggregate_csv: str, fit_csv: str, output: str,
                     quantity: str | None = None, title: str = "") -> dict:
    """Log-log errorbar sweep with the fitted line read from the fit CSV."""
    fit = read_csv_columns(fit_csv, ["quantity", "slope", "intercept", "r_squared"])
    if quantity is None:
        quantity = fit["quantity"][0]
    try:
        row = fit["quantity"].index(quantity)
    except ValueError:
        raise SchemaError(f"{fit_csv}: no fit row for quantity {quantity!r}")
    slope = float(fit["slope"][row])
    intercept = float(fit["intercept"][row])
    r2 = float(fit["r_squared"][row])

    agg = read_csv_columns(aggregate_csv,
                           ["eps", f"{quantity}_mean", f"{quantity}_stderr"])
    eps = np.asarray(agg["eps"], dtype=float)
    mean = np.asarray(agg[f"{quantity}_mean"], dtype=float)
    stderr = np.asarray(agg[f"{quantity}_stderr"], dtype=float)

    fig, ax = plt.subplots(figsize=(5.2, 3.9))
    ax.errorbar(eps, mean, yerr=1.96 * stderr, fmt="o", capsize=3,
                label="ensemble mean")
    line = np.exp(intercept) * eps ** slope
    ax.loglog(eps, line, "--", label=f"slope {slope:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel(quantity)
    ax.annotate(f"slope = {slope:.2f}, R$^2$ = {r2:.3f}",
                xy=(0.05, 0.05), xycoords="axes fraction")
    ax.legend()
    _finish(fig, ax, output, title)
    return {"output": output, "slope": slope, "r_squared": r2, "quantity": quantity}


def plot_paths(sample_paths_csv: str, output: str, title: str = "") -> dict:
    """Deviation-path envelope: min/max band plus individual traces."""
    cols = read_csv_columns(sample_paths_csv, ["time"])
    t = np.asarray(cols["time"], dtype=float)
    eps_cols = sorted(c for c in cols if c.startswith("v_eps_"))
    lim_cols = sorted(c for c in cols if c.startswith("v_lim_"))
    if not eps_cols:
        raise SchemaError(f"{sample_paths_csv}: no v_eps_* columns")
    eps_paths = np.array([cols[c] for c in eps_cols], dtype=float)

    fig, ax = plt.subplots(figsize=(5.6, 3.9))
    ax.fill_between(t, eps_paths.min(axis=0), eps_paths.max(axis=0),
                    alpha=0.25, label="rescaled-difference envelope")
    for c in eps_cols[:4]:
        ax.plot(t, cols[c], linewidth=0.9)
    for c in lim_cols[:4]:
        ax.plot(t, cols[c], linewidth=0.9, linestyle=":", color="k",
                label="limit process" if c == lim_cols[0] else None)
    ax.set_xlabel("time")
    ax.set_ylabel("boundary trace")
    ax.legend(loc="upper right", fontsize=8)
    _finish(fig, ax, output, title)
    return {"output": output, "n_paths": len(eps_cols)}


def plot_ldp_tail(tail_csv: str, output: str, title: str = "") -> dict:
    """Scaled log-probabilities with confidence bands per epsilon."""
    cols = read_csv_columns(tail_csv, ["eps", "scaled", "ci_low", "ci_high", "usable"])
    eps = np.asarray(cols["eps"], dtype=float)
    scaled = np.asarray(cols["scaled"], dtype=float)
    lo = np.asarray(cols["ci_low"], dtype=float)
    hi = np.asarray(cols["ci_high"], dtype=float)
    usable = np.array([str(u).strip().lower() in ("true", "1", "1.0")
                       for u in cols["usable"]])

    fig, ax = plt.subplots(figsize=(5.2, 3.9))
    ok = usable & np.isfinite(scaled)
    ax.errorbar(eps[ok], scaled[ok],
                yerr=np.vstack([scaled[ok] - lo[ok], hi[ok] - scaled[ok]]),
                fmt="s", capsize=4, label="-eps^(1-2k) log p")
    if (~ok).any():
        ax.plot(eps[~ok], np.zeros((~ok).sum()), "x", color="crimson",
                label="unusable (too few exceedances)")
    if ok.any():
        ax.axhline(scaled[ok].mean(), linestyle="--", linewidth=0.8, color="gray")
    ax.set_xscale("log")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("scaled tail log-probability")
    ax.legend(fontsize=8)
    _finish(fig, ax, output, title)
    return {"output": output, "n_usable": int(ok.sum()),
            "scaled": scaled[ok].tolist()}


def plot_rate(control_csv: str, rate_result_csv: str, output: str,
              title: str = "") -> dict:
    """Recovered control against the generating control, value annotated."""
    res = read_csv_columns(rate_result_csv, ["value", "residual", "iterations"])
    value = float(res["value"][0])
    ctrl = read_csv_columns(control_csv, ["time", "w_star"])
    t = np.asarray(ctrl["time"], dtype=float)

    fig, ax = plt.subplots(figsize=(5.2, 3.9))
    ax.plot(t, ctrl["w_star"], label="recovered control")
    if "w_generator" in ctrl:
        ax.plot(t, ctrl["w_generator"], ":", label="generating control")
    ax.set_xlabel("time")
    ax.set_ylabel("boundary control")
    ax.annotate(f"I(y) = {value:.4g}", xy=(0.05, 0.9), xycoords="axes fraction")
    ax.legend(fontsize=8)
    _finish(fig, ax, output, title)
    return {"output": output, "value": value}
