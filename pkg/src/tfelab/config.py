"""Run configuration: a TOML file with dotted sections, strict keys, and overrides."""

from __future__ import annotations

import copy
import math
import shlex
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigurationError
from .spaces import Field


def _pos(v):
    return v > 0


def _ge(n):
    return lambda v: v >= n


def _unit_step(v):
    return 0 < v <= 1


# section -> key -> (types, default, check, description of check)
SCHEMA = {
    "profile": {
        "U0": ((float, int), 1.0, None, ""),
        "ode_tol": ((float,), 1e-12, _pos, "positive"),
        "fit_degree": ((int,), 64, None, ""),
        "residual_tol": ((float,), 1e-8, _pos, "positive"),
        "file": ((str,), "", None, ""),
    },
    "discretization": {
        "basis_dim": ((int,), 64, _ge(8), ">= 8"),
        "quad_n": ((int,), 0, _ge(0), ">= 0 (0 picks the exact rule)"),
        "k_max": ((int,), 12, _ge(4), ">= 4"),
    },
    "spectrum": {
        "m": ((int,), 8, _ge(1), ">= 1"),
        "tol": ((float,), 1e-6, _pos, "positive"),
        "dump_matrices": ((bool,), False, None, ""),
    },
    "linear": {
        "h": ((float,), 0.01, _unit_step, "in (0, 1]"),
        "S": ((float, int), 40.0, _pos, "positive"),
        "V0": ((str,), "const 1", None, ""),
        "F": ((str,), "zero", None, ""),
        "ks": ((list,), [2, 4, 6], None, ""),
        "cell_average": ((bool,), False, None, ""),
        "window": ((list,), [], None, ""),
        "rate_target": ((float,), 0.2, _pos, "positive"),
        "rate_tol": ((float,), 0.01, _pos, "positive"),
    },
    "nonlinear": {
        "h": ((float,), 0.01, _unit_step, "in (0, 1]"),
        "S": ((float, int), 30.0, _pos, "positive"),
        "V0": ((str,), "random seed=1 norm6=0.01", None, ""),
        "margin": ((float,), 0.1, lambda v: 0 < v < 1, "in (0, 1)"),
        "gate": ((float,), 0.05, _pos, "positive"),
        "ks": ((list,), [2, 4, 6], None, ""),
        "window": ((list,), [], None, ""),
        "rate_target": ((float,), 0.2, _pos, "positive"),
        "rate_tol": ((float,), 0.02, _pos, "positive"),
        "snapshots": ((int,), 7, _ge(2), ">= 2"),
        "samples": ((int,), 201, _ge(2), ">= 2"),
    },
    "output": {
        "directory": ((str,), "tfelab-out", None, ""),
        "formats": ((list,), ["csv", "json"], None, ""),
    },
}


def defaults():
    return {sec: {k: copy.deepcopy(entry[1]) for k, entry in keys.items()} for sec, keys in SCHEMA.items()}


def _check_value(sec, key, value):
    types, _, check, what = SCHEMA[sec][key]
    if isinstance(value, bool) and bool not in types:
        raise ConfigurationError(f"{sec}.{key}: expected {types[0].__name__}, got a boolean")
    if not isinstance(value, types):
        if float in types and isinstance(value, int):
            value = float(value)
        else:
            raise ConfigurationError(f"{sec}.{key}: expected {types[0].__name__}, got {value!r}")
    if check is not None and not check(value):
        raise ConfigurationError(f"{sec}.{key} = {value!r} must be {what}")
    return value


def merge(cfg, data, origin="config"):
    """Overlay a nested mapping, rejecting unknown sections and keys."""
    for sec, body in data.items():
        if sec not in SCHEMA:
            raise ConfigurationError(f"{origin}: unknown section [{sec}]")
        if not isinstance(body, dict):
            raise ConfigurationError(f"{origin}: [{sec}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigurationError(f"{origin}: unknown key {sec}.{key}")
            cfg[sec][key] = _check_value(sec, key, value)
    return cfg


def _parse_override(item):
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
    path, raw = item.split("=", 1)
    path = path.strip()
    if path.count(".") != 1:
        raise ConfigurationError(f"override key {path!r} must be section.key")
    sec, key = path.split(".")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw  # bare strings need no quotes on the command line
    return {sec: {key: value}}


def load_config(path=None, overrides=()):
    cfg = defaults()
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"config {path}: {exc}") from exc
        merge(cfg, data, str(path))
    for item in overrides:
        merge(cfg, _parse_override(item), "--set")
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg):
    kmax = cfg["discretization"]["k_max"]
    for sec in ("linear", "nonlinear"):
        ks = cfg[sec]["ks"]
        if not all(isinstance(k, int) and 0 <= k <= kmax for k in ks):
            raise ConfigurationError(f"{sec}.ks entries must be integers in 0..{kmax}")
        w = cfg[sec]["window"]
        if w and (len(w) != 2 or not all(isinstance(v, (int, float)) for v in w) or w[0] >= w[1]):
            raise ConfigurationError(f"{sec}.window must be [s_lo, s_hi] with s_lo < s_hi")
        if cfg[sec]["S"] < cfg[sec]["h"]:
            raise ConfigurationError(f"{sec}.S must be at least {sec}.h")
    bad = set(cfg["output"]["formats"]) - {"csv", "json"}
    if bad:
        raise ConfigurationError(f"output.formats: unknown format(s) {sorted(bad)}")


# ---------------------------------------------------------------------------
# field specifications


def _kv(tokens, allowed):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigurationError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise ConfigurationError(f"unknown option {k!r} (allowed: {', '.join(allowed)})")
        out[k] = v
    return out


def _floats(tokens, what):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ConfigurationError(f"{what}: {exc}") from exc


def parse_field(text, forms):
    """Field from a specification string.

    zero | const c | poly a0 a1 ... (in x) | tpoly a0 a1 ... (in x/ell) |
    random seed=N norm6=r [degree=d] | file PATH (one coefficient per entry)
    """
    from .nonlinear import scaled_random_field

    tokens = shlex.split(text)
    if not tokens:
        raise ConfigurationError("empty field specification")
    kind, rest = tokens[0], tokens[1:]
    basis = forms.basis
    if kind == "zero" and not rest:
        return Field.zero(basis)
    if kind == "const" and len(rest) == 1:
        return Field.constant(basis, _floats(rest, text)[0])
    if kind == "poly" and rest:
        return Field.from_power_series(basis, _floats(rest, text))
    if kind == "tpoly" and rest:
        a = np.array(_floats(rest, text))
        return Field.from_power_series(basis, a / basis.ell ** np.arange(a.size))
    if kind == "random":
        opts = _kv(rest, ("seed", "norm6", "degree"))
        if "seed" not in opts or "norm6" not in opts:
            raise ConfigurationError("random field needs explicit seed= and norm6=")
        try:
            seed, norm6 = int(opts["seed"]), float(opts["norm6"])
            degree = int(opts.get("degree", 9))
        except ValueError as exc:
            raise ConfigurationError(f"{text}: {exc}") from exc
        if not (norm6 > 0 and math.isfinite(norm6)):
            raise ConfigurationError("norm6 must be positive")
        return scaled_random_field(forms, seed, norm6, degree)
    if kind == "file" and len(rest) == 1:
        c = _load_array(rest[0])
        if c.ndim != 1:
            raise ConfigurationError(f"{rest[0]}: expected a single coefficient vector")
        return Field(_fit(c, basis.dim, rest[0]), basis)
    raise ConfigurationError(f"cannot parse field specification {text!r}")


def _load_array(path):
    try:
        return np.loadtxt(path, delimiter=None, ndmin=1, comments="#")
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def _fit(c, dim, where):
    if c.size > dim:
        raise ConfigurationError(f"{where}: {c.size} coefficients exceed basis_dim {dim}")
    out = np.zeros(dim)
    out[: c.size] = c
    return out


def parse_source(text, forms):
    """Forcing F(s): zero | const c | file PATH.

    A file holds either one coefficient vector (time independent) or rows
    ``s c0 c1 ...``; rows act piecewise constant from their s onward.
    """
    tokens = shlex.split(text)
    if tokens == ["zero"]:
        return None
    basis = forms.basis
    if len(tokens) == 2 and tokens[0] == "const":
        G = Field.constant(basis, _floats(tokens[1:], text)[0])
        return lambda s: G
    if len(tokens) == 2 and tokens[0] == "file":
        a = _load_array(tokens[1])
        if a.ndim == 1:
            G = Field(_fit(a, basis.dim, tokens[1]), basis)
            return lambda s: G
        if a.ndim == 2 and a.shape[0] >= 1:
            order = np.argsort(a[:, 0], kind="stable")
            ss = a[order, 0]
            fields = [Field(_fit(row, basis.dim, tokens[1]), basis) for row in a[order, 1:]]

            def F(s):
                i = int(np.searchsorted(ss, s + 1e-12, side="right")) - 1
                return fields[max(i, 0)]

            return F
    raise ConfigurationError(f"cannot parse source specification {text!r}")
