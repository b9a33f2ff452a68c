"""Run-configuration loading, validation and hashing.

The configuration file is TOML with sections mirroring the solver modules.
Every physical bound the model relies on is checked at load time with an
error message naming the violated assumption.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grids import GridConfig

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Configuration rejected, with the offending field in the message."""


_DEFAULTS = {
    "grid": {
        "n_y": 16, "n_z1": 17, "n_z2": 17, "lz1": 1.0, "lz2": 1.0,
        "n_x": 33, "length": 1.0, "n_p": 64, "p_max": 8.0,
    },
    "bloch": {
        "n_bands": 3, "eig_tol": 1e-9, "degeneracy_tol": 1e-8, "seed": 0,
        "potential": {"type": "zero"},
    },
    "physics": {
        "tau": 1.0, "n_b": 0.1, "epsilon": 0.0,
        "v_b": {"type": "zero"},
        "d_override": 0.0,
        "eta_list": [0.5, 0.25, 0.125, 0.0625],
        "kinetic_length": 8.25, "kinetic_n_x": 201, "kinetic_p_max": 7.0,
        "kinetic_t_final": 0.1, "kinetic_bump_halfwidth": 0.4,
        "kinetic_v_amplitude": 0.5, "kinetic_v_width": 0.32,
        "kinetic_energies": [], "kinetic_masses": [],
    },
    "solver": {
        "poisson_tol": 1e-10, "gummel_tol": 1e-8, "max_gummel": 60,
        "dt": 1e-3, "t_final": 0.02, "damping": 1.0, "cadence": 1,
    },
    "output": {
        "directory": "out", "formats": ["csv", "json"],
    },
}

_PROFILE_KEYS = {
    "zero": set(),
    "constant": {"value"},
    "cosine_y": {"offset", "amplitude", "mode"},
    "cosine": {"amplitude", "mode_z1", "mode_z2", "offset"},
    "table": {"path"},
}


@dataclass
class RunConfig:
    """Validated configuration with defaults applied."""

    grid: dict
    bloch: dict
    physics: dict
    solver: dict
    output: dict
    source_path: str = ""
    alpha_bounds: tuple[float, float] | None = None

    def grid_config(self) -> GridConfig:
        g = self.grid
        return GridConfig(n_y=g["n_y"], n_z1=g["n_z1"], n_z2=g["n_z2"],
                          lz1=g["lz1"], lz2=g["lz2"], n_x=g["n_x"],
                          length=g["length"], n_p=g["n_p"], p_max=g["p_max"])

    def to_dict(self) -> dict:
        return {"grid": self.grid, "bloch": self.bloch, "physics": self.physics,
                "solver": self.solver, "output": self.output}

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def lattice_potential_values(self, cell_grid) -> np.ndarray:
        prof = self.bloch["potential"]
        y = cell_grid.y
        kind = prof["type"]
        shape = (cell_grid.n_y, cell_grid.n_z1, cell_grid.n_z2)
        if kind == "zero":
            return np.zeros(shape)
        if kind == "constant":
            return np.full(shape, float(prof["value"]))
        if kind == "cosine_y":
            vals = prof["offset"] + prof["amplitude"] * np.cos(
                2.0 * np.pi * prof["mode"] * (y - y[0]))
            return np.broadcast_to(vals[:, None, None], shape).copy()
        if kind == "table":
            arr = np.load(prof["path"])
            if arr.shape != shape:
                raise ConfigError(
                    f"bloch.potential table shape {arr.shape} mismatches grid {shape}")
            return arr
        raise ConfigError(f"unknown bloch.potential type {kind!r}")

    def boundary_trace(self, dgrid) -> np.ndarray:
        prof = self.physics["v_b"]
        kind = prof["type"]
        shape = (dgrid.n_z1, dgrid.n_z2)
        if kind == "zero":
            return np.zeros(shape)
        if kind == "constant":
            return np.full(shape, float(prof["value"]))
        if kind == "cosine":
            kz1 = int(prof.get("mode_z1", 1))
            kz2 = int(prof.get("mode_z2", 0))
            off = float(prof.get("offset", 0.0))
            c1 = np.cos(np.pi * kz1 * dgrid.z1 / dgrid.lz1)
            c2 = np.cos(np.pi * kz2 * dgrid.z2 / dgrid.lz2)
            return off + float(prof["amplitude"]) * np.outer(c1, c2)
        raise ConfigError(f"unknown physics.v_b type {kind!r}")


def _merge(defaults: dict, given: dict, section: str) -> dict:
    out = dict(defaults)
    for key, val in given.items():
        if key not in defaults and key not in ("alpha_min", "alpha_max"):
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = val
    return out


def _check_profile(section: str, prof, allowed=("zero", "constant", "cosine_y",
                                                "cosine", "table")) -> None:
    if not isinstance(prof, dict) or "type" not in prof:
        raise ConfigError(f"{section} must be a table with a 'type' key")
    kind = prof["type"]
    if kind not in allowed:
        raise ConfigError(f"{section}.type {kind!r} not one of {sorted(allowed)}")
    extra = set(prof) - {"type"} - _PROFILE_KEYS[kind]
    if extra:
        raise ConfigError(f"{section} has unexpected keys {sorted(extra)}")
    missing = _PROFILE_KEYS[kind] - set(prof) - {"offset"}
    if missing:
        raise ConfigError(f"{section} is missing keys {sorted(missing)}")


def load_config(path) -> RunConfig:
    """Parse, default-fill and validate a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"TOML syntax error in {path}: {exc}") from exc

    unknown = set(raw) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")

    merged = {sec: _merge(_DEFAULTS[sec], raw.get(sec, {}), sec)
              for sec in _DEFAULTS}

    g = merged["grid"]
    for key in ("n_y", "n_z1", "n_z2", "n_x", "n_p"):
        if not isinstance(g[key], int) or g[key] < 3:
            raise ConfigError(f"grid.{key} must be an integer >= 3 (stencil width)")
    for key in ("lz1", "lz2", "length", "p_max"):
        if not (float(g[key]) > 0):
            raise ConfigError(f"grid.{key} must be positive")

    b = merged["bloch"]
    if b["n_bands"] < 1:
        raise ConfigError("bloch.n_bands must be >= 1")
    if not (0 < b["eig_tol"] <= 1e-3):
        raise ConfigError("bloch.eig_tol must lie in (0, 1e-3]")
    _check_profile("bloch.potential", b["potential"],
                   allowed=("zero", "constant", "cosine_y", "table"))
    prof = b["potential"]
    if prof["type"] == "constant" and float(prof["value"]) < 0:
        raise ConfigError(
            "bloch.potential is negative; violates the nonnegative-lattice-"
            "potential assumption")
    if prof["type"] == "cosine_y":
        if float(prof["offset"]) < abs(float(prof["amplitude"])):
            raise ConfigError(
                "bloch.potential dips below zero; violates the nonnegative-"
                "lattice-potential assumption")

    p = merged["physics"]
    if float(p["tau"]) <= 0:
        raise ConfigError(
            "physics.tau must be positive; violates the bounded-symmetric-"
            "cross-section assumption")
    alpha_bounds = None
    if "alpha_min" in p or "alpha_max" in p:
        try:
            amin, amax = float(p.pop("alpha_min")), float(p.pop("alpha_max"))
        except KeyError as exc:
            raise ConfigError(
                "physics.alpha_min and physics.alpha_max must be given together"
            ) from exc
        if not (0 < amin <= amax):
            raise ConfigError(
                f"physics cross-section bounds ({amin}, {amax}) are not ordered "
                "positive; violates the bounded-symmetric-cross-section assumption")
        alpha_bounds = (amin, amax)
    if float(p["n_b"]) <= 0:
        raise ConfigError(
            "physics.n_b must be a positive constant; violates the "
            "boundary-data assumption")
    if float(p["epsilon"]) < 0 or float(p["epsilon"]) > 1:
        raise ConfigError("physics.epsilon must lie in [0, 1]")
    if float(p["d_override"]) < 0:
        raise ConfigError(
            "physics.d_override must be positive when set; violates the "
            "bounded-diffusion assumption")
    _check_profile("physics.v_b", p["v_b"], allowed=("zero", "constant", "cosine"))
    etas = list(p["eta_list"])
    if any(e <= 0 for e in etas) or any(b2 >= a for a, b2 in zip(etas, etas[1:])):
        raise ConfigError("physics.eta_list must be positive and strictly decreasing")

    s = merged["solver"]
    for key in ("poisson_tol", "gummel_tol", "dt", "t_final"):
        if float(s[key]) <= 0:
            raise ConfigError(f"solver.{key} must be positive")
    if not (0 < float(s["damping"]) <= 1):
        raise ConfigError("solver.damping must lie in (0, 1]")
    if int(s["max_gummel"]) < 1:
        raise ConfigError("solver.max_gummel must be >= 1")

    return RunConfig(grid=g, bloch=b, physics=p, solver=s,
                     output=merged["output"], source_path=str(path),
                     alpha_bounds=alpha_bounds)
