"""Strict flat key=value experiment configs with echoed defaults.

The grammar is one ``key = value`` pair per line, ``#`` comments, no
sections.  Unknown keys are rejected by name, malformed lines by line
number, and every default the parser fills in is echoed into the spec so
the run manifest can list exactly what was assumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

RECIPES = ("reduction", "normal_deviation", "ldp_tail", "rate_function", "diagnostics")
U0_CHOICES = ("sin_half", "zero")
RATE_TARGETS = ("sine", "constant")


class ConfigError(ValueError):
    """Parse or semantic failure, carrying a line number when available."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


# key -> (parser, default); None default means the key is required
_KEYS: dict[str, tuple] = {
    "recipe": (str, None),
    "master_seed": (int, None),
    "n_nodes": (int, 129),
    "length": (float, 1.0),
    "T": (float, 1.0),
    "dt": (float, 1e-3),
    "epsilon": (float, 0.1),
    "eps_grid": (_parse_float_list, (1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5)),
    "n_paths": (int, 200),
    "sigma1": (float, 0.5),
    "sigma2": (float, 0.5),
    "f_a": (float, 1.0),
    "f_b": (float, 0.0),
    "f_c": (float, 0.0),
    "zero_forcing": (_parse_bool, False),
    "u0": (str, "sin_half"),
    "u0_amplitude": (float, 1.0),
    "blowup_threshold": (float, 1e6),
    "k_trunc": (int, 32),
    "q1_decay": (float, 3.0),
    "q2": (float, 1.0),
    "tail_tol": (float, 0.05),
    "kappa": (float, 0.25),
    "delta": (float, 0.0),
    "ldp_pilot_paths": (int, 2000),
    "ldp_target_p": (float, 0.08),
    "rate_target": (str, "sine"),
    "rate_amplitude": (float, 1.0),
    "rate_tolerance": (float, 1e-6),
    "sample_paths": (int, 8),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully validated experiment description with defaults applied."""

    values: dict
    applied_defaults: tuple[str, ...] = ()
    source: str = field(default="", compare=False)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError as exc:
            raise AttributeError(name) from exc

    def to_text(self) -> str:
        """Serialize every applied key; re-parsing yields an identical spec."""
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _semantic_checks(values: dict) -> None:
    if values["recipe"] not in RECIPES:
        raise ConfigError(f"unknown recipe {values['recipe']!r}; one of {RECIPES}")
    if values["n_nodes"] < 3:
        raise ConfigError("n_nodes must be at least 3")
    if values["length"] <= 0:
        raise ConfigError("length must be positive")
    if not (0.0 < values["epsilon"] <= 1.0):
        raise ConfigError(f"epsilon out of (0,1]: {values['epsilon']}")
    if not (0.0 < values["dt"] < values["T"]):
        raise ConfigError(f"need 0 < dt < T, got dt={values['dt']}, T={values['T']}")
    eps = values["eps_grid"]
    if any(not (0.0 < e <= 1.0) for e in eps):
        raise ConfigError(f"eps_grid entries out of (0,1]: {eps}")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("eps_grid must be strictly decreasing")
    if values["n_paths"] < 1:
        raise ConfigError("n_paths must be at least 1")
    if values["sigma1"] < 0 or values["sigma2"] < 0:
        raise ConfigError("noise amplitudes must be non-negative")
    if not values["zero_forcing"] and values["f_a"] <= 0:
        raise ConfigError("f_a must be positive (cubic leading coefficient)")
    if values["u0"] not in U0_CHOICES:
        raise ConfigError(f"u0 must be one of {U0_CHOICES}")
    if values["k_trunc"] < 1:
        raise ConfigError("k_trunc must be at least 1")
    if values["recipe"] == "ldp_tail" and not (0.0 < values["kappa"] < 0.5):
        raise ConfigError(f"kappa must lie in (0, 1/2), got {values['kappa']}")
    if values["delta"] < 0:
        raise ConfigError("delta must be non-negative")
    if values["rate_target"] not in RATE_TARGETS:
        raise ConfigError(f"rate_target must be one of {RATE_TARGETS}")
    if values["rate_tolerance"] <= 0:
        raise ConfigError("rate_tolerance must be positive")
    if values["sample_paths"] < 0:
        raise ConfigError("sample_paths must be non-negative")


def parse_config(text: str) -> ExperimentSpec:
    """Parse and validate a config document, applying documented defaults."""
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        parser, _ = _KEYS[key]
        try:
            seen[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno) from exc

    values: dict = {}
    defaults: list[str] = []
    for key, (parser, default) in _KEYS.items():
        if key in seen:
            values[key] = seen[key]
        elif default is None:
            raise ConfigError(f"missing required key {key!r}")
        else:
            values[key] = default
            defaults.append(key)
    _semantic_checks(values)
    return ExperimentSpec(values=values, applied_defaults=tuple(defaults), source=text)
