"""Command-line experiment drivers.

Verbs: ``bloch`` (band-structure artifact), ``poisson`` (single nonlinear
solve), ``dd`` (transport-only transient with a frozen potential),
``kinetic-sweep`` (small-mean-free-path error table), ``run`` (self-consistent
transient with entropy diagnostics), ``convergence`` (grid-refinement study).
All outputs are deterministic for a fixed configuration and seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bloch import LatticePotential, band_truncation_bound, compute_spectrum
from .config import ConfigError, RunConfig, load_config
from .electrostatics import effective_quantities, solve_nonlinear_poisson
from .grids import build_grids, discrete_norms
from .io import write_csv, write_json
from .kinetic import DiffusiveLimitSetup, diffusive_limit_experiment
from .selfconsistent import DeviceParams, gummel_solve, run_transient
from .transport import SurfaceDensityField, advance_density, current, \
    diffusion_constant_alpha

__all__ = ["main"]


def _meta(cfg: RunConfig, seed: int) -> dict:
    g = cfg.grid
    return {
        "config_hash": cfg.content_hash(),
        "grid": (f"n_y={g['n_y']} n_z1={g['n_z1']} n_z2={g['n_z2']} "
                 f"lz1={g['lz1']} lz2={g['lz2']} n_x={g['n_x']} "
                 f"length={g['length']} n_p={g['n_p']} p_max={g['p_max']}"),
        "seed": seed,
    }


def _spectrum(cfg: RunConfig, cell, seed: int, spectrum_path: str | None):
    from .bloch import BlochSpectrum

    if spectrum_path:
        return BlochSpectrum.load(spectrum_path)
    w = LatticePotential(cfg.lattice_potential_values(cell))
    return compute_spectrum(w, cell, n_bands=cfg.bloch["n_bands"],
                            eig_tol=cfg.bloch["eig_tol"],
                            degeneracy_tol=cfg.bloch["degeneracy_tol"],
                            seed=seed)


def _cmd_bloch(cfg: RunConfig, out: Path, seed: int, args) -> None:
    cell, _, _ = build_grids(cfg.grid_config())
    spec = _spectrum(cfg, cell, seed, None)
    spec.save(out / "spectrum.json")
    meta = _meta(cfg, seed)
    rows = [(n, spec.energies[n], spec.free_energies[n], spec.masses[n])
            for n in range(spec.n_bands)]
    write_csv(out / "bands.csv", ["band", "energy", "free_energy", "mass"],
              rows, meta)
    write_json(out / "bloch_summary.json", {
        "energies": spec.energies.tolist(),
        "free_energies": spec.free_energies.tolist(),
        "masses": spec.masses.tolist(),
        "tail_bound_lambda1": band_truncation_bound(spec, 1.0),
        "potential_sup": spec.potential_sup,
    }, meta)


def _cmd_poisson(cfg: RunConfig, out: Path, seed: int, args) -> None:
    cell, dev, _ = build_grids(cfg.grid_config())
    spec = _spectrum(cfg, cell, seed, args.spectrum)
    n_s = np.full(dev.n_x, cfg.physics["n_b"])
    v_b = cfg.boundary_trace(dev)
    fld, info = solve_nonlinear_poisson(
        n_s, spec, v_b, dev, eps=cfg.physics["epsilon"],
        tol=cfg.solver["poisson_tol"], return_info=True)
    meta = _meta(cfg, seed)
    rows = [(dev.x[i], dev.z1[k], dev.z2[l], fld.v[i, k, l])
            for i in range(dev.n_x) for k in range(dev.n_z1)
            for l in range(dev.n_z2)]
    write_csv(out / "potential.csv", ["x", "z1", "z2", "V"], rows, meta)
    write_json(out / "poisson_summary.json", {
        "iterations": info["iterations"],
        "final_grad_norm": info["grad_norms"][-1],
        "j_history": info["j_history"],
    }, meta)


def _cmd_dd(cfg: RunConfig, out: Path, seed: int, args) -> None:
    cell, dev, _ = build_grids(cfg.grid_config())
    spec = _spectrum(cfg, cell, seed, args.spectrum)
    n_b = cfg.physics["n_b"]
    v_b = cfg.boundary_trace(dev)
    n_s = np.full(dev.n_x, n_b)
    fld = solve_nonlinear_poisson(n_s, spec, v_b, dev,
                                  eps=cfg.physics["epsilon"],
                                  tol=cfg.solver["poisson_tol"])
    eq = effective_quantities(fld.v, spec, dev, eps=cfg.physics["epsilon"])
    if cfg.physics["d_override"] > 0:
        from .transport import DiffusionField
        diffusion = DiffusionField(d=np.full(dev.n_x, cfg.physics["d_override"]))
    else:
        diffusion = diffusion_constant_alpha(spec.energies, spec.masses,
                                             eq.v_nn, cfg.physics["tau"])
    density = SurfaceDensityField(n_s=n_s.copy(), n_b=n_b, h_x=dev.h_x)
    dt = cfg.solver["dt"]
    steps = int(round(cfg.solver["t_final"] / dt))
    cadence = int(cfg.solver["cadence"])
    dens_rows, cur_rows = [], []
    x_face = 0.5 * (dev.x[:-1] + dev.x[1:])
    for k in range(steps + 1):
        if k % cadence == 0:
            j = current(density, eq.v_s, diffusion).j
            dens_rows.extend((density.t, dev.x[i], density.n_s[i])
                             for i in range(dev.n_x))
            cur_rows.extend((density.t, x_face[i], j[i])
                            for i in range(dev.n_x - 1))
        if k < steps:
            density = advance_density(density, eq.v_s, diffusion, dt)
    meta = _meta(cfg, seed)
    write_csv(out / "density.csv", ["t", "x", "N_s"], dens_rows, meta)
    write_csv(out / "current.csv", ["t", "x_face", "J"], cur_rows, meta)


def _kinetic_setup(cfg: RunConfig, spec) -> DiffusiveLimitSetup:
    from .grids import MomentumGrid

    p = cfg.physics
    n_x = int(p["kinetic_n_x"])
    length = float(p["kinetic_length"])
    x = np.linspace(0.0, length, n_x)
    c = 0.5 * length
    if p["kinetic_energies"]:
        energies = np.asarray(p["kinetic_energies"], dtype=float)
        masses = np.asarray(p["kinetic_masses"], dtype=float)
    else:
        energies, masses = spec.energies, spec.masses
    v_prof = p["kinetic_v_amplitude"] * np.exp(-(x - c) ** 2 / p["kinetic_v_width"])
    v_nn = np.tile(v_prof, (len(energies), 1))
    hw = p["kinetic_bump_halfwidth"]
    n0 = np.where(np.abs(x - c) < hw,
                  np.cos(np.pi * (x - c) / (2.0 * hw)) ** 2, 0.0)
    pgrid = MomentumGrid(n_p=cfg.grid["n_p"], p_max=float(p["kinetic_p_max"]))
    return DiffusiveLimitSetup(energies=energies, masses=masses, v_nn=v_nn,
                               x=x, pgrid=pgrid, tau=p["tau"], n0=n0,
                               t_final=p["kinetic_t_final"])


def _cmd_kinetic_sweep(cfg: RunConfig, out: Path, seed: int, args) -> None:
    cell, _, _ = build_grids(cfg.grid_config())
    spec = _spectrum(cfg, cell, seed, args.spectrum)
    setup = _kinetic_setup(cfg, spec)
    res = diffusive_limit_experiment(setup, list(cfg.physics["eta_list"]))
    meta = _meta(cfg, seed)
    rows = [(r["eta"], r["error"], r["order"], r["leakage"])
            for r in res["rows"]]
    write_csv(out / "sweep.csv", ["eta", "error", "order", "leakage"], rows, meta)
    write_json(out / "sweep_summary.json", {
        "hilbert_ratio": res["hilbert_ratio"],
        "eta": [r["eta"] for r in res["rows"]],
        "error": [r["error"] for r in res["rows"]],
    }, meta)


def _cmd_run(cfg: RunConfig, out: Path, seed: int, args) -> None:
    cell, dev, _ = build_grids(cfg.grid_config())
    spec = _spectrum(cfg, cell, seed, args.spectrum)
    p, s = cfg.physics, cfg.solver
    params = DeviceParams(
        n_b=p["n_b"], v_b=cfg.boundary_trace(dev), tau=p["tau"],
        eps=p["epsilon"], dt=s["dt"], gummel_tol=s["gummel_tol"],
        max_gummel=int(s["max_gummel"]), damping=s["damping"],
        poisson_tol=s["poisson_tol"],
        d_override=(np.full(dev.n_x, p["d_override"])
                    if p["d_override"] > 0 else None),
    )
    n0 = np.full(dev.n_x, p["n_b"])
    state, report = run_transient(n0, spec, dev, params, s["t_final"])
    meta = _meta(cfg, seed)
    rows = list(zip(report.t, report.w, report.dissipation, report.mass,
                    report.gummel_iters, report.residual))
    write_csv(out / "entropy.csv",
              ["t", "W", "dissipation", "mass", "gummel_iters", "residual"],
              rows, meta)
    write_csv(out / "final_density.csv", ["x", "N_s"],
              list(zip(dev.x, state.n_s.n_s)), meta)
    vrows = [(dev.x[i], dev.z1[k], dev.z2[l], state.v.v[i, k, l])
             for i in range(dev.n_x) for k in range(dev.n_z1)
             for l in range(dev.n_z2)]
    write_csv(out / "final_potential.csv", ["x", "z1", "z2", "V"], vrows, meta)


def _cmd_convergence(cfg: RunConfig, out: Path, seed: int, args) -> None:
    from .bloch import assemble_hamiltonian, solve_bloch
    from .grids import UnitCellGrid

    meta = _meta(cfg, seed)
    rows = []
    for n in (9, 17, 33):
        cell = UnitCellGrid(n_y=n - 1, n_z1=n, n_z2=n, lz1=1.0, lz2=1.0)
        w = LatticePotential(np.zeros((n - 1, n, n)))
        ham = assemble_hamiltonian(w, cell)
        vals, _ = solve_bloch(ham, cell, 1, eig_tol=cfg.bloch["eig_tol"],
                              seed=seed)
        rows.append({"h": 1.0 / (n - 1), "error": abs(vals[0] - np.pi**2)})
    for i in range(len(rows) - 1):
        rows[i]["order"] = float(np.log(rows[i]["error"] / rows[i + 1]["error"])
                                 / np.log(rows[i]["h"] / rows[i + 1]["h"]))
    rows[-1]["order"] = float("nan")
    write_csv(out / "convergence.csv", ["h", "error", "order"],
              [(r["h"], r["error"], r["order"]) for r in rows], meta)
    write_json(out / "convergence_summary.json", {"ground_energy": rows}, meta)


_COMMANDS = {
    "bloch": _cmd_bloch,
    "poisson": _cmd_poisson,
    "dd": _cmd_dd,
    "kinetic-sweep": _cmd_kinetic_sweep,
    "run": _cmd_run,
    "convergence": _cmd_convergence,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nanowire",
        description="Nanowire transport simulation drivers",
    )
    parser.add_argument("verb", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="eigensolver seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="reserved; the solvers run single-threaded")
    parser.add_argument("--spectrum", default=None,
                        help="reuse a saved band-structure artifact")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--version", action="version",
                        version=f"nanowire-sim {__version__}")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        out = Path(args.out if args.out is not None else cfg.output["directory"])
        out.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else int(cfg.bloch["seed"])
        if args.verbose:
            print(f"nanowire {args.verb}: config hash {cfg.content_hash()}",
                  file=sys.stderr)
        _COMMANDS[args.verb](cfg, out, seed, args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
