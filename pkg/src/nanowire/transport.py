"""1d axial drift-diffusion solver in Slotboom form with exponential fitting.

Interface fluxes use the Bernoulli-function discretization, which is exact on
local equilibria N proportional to exp(-V_s) and reduces to central
differencing for a flat effective potential.  Backward-Euler steps solve an
M-matrix tridiagonal system by the Thomas algorithm, whose sweeps only add
and divide nonnegative quantities, so nonnegativity of the density survives
rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SurfaceDensityField",
    "CurrentField",
    "DiffusionField",
    "bernoulli",
    "sg_flux",
    "advance_density",
    "steady_state",
    "current",
    "diffusion_constant_alpha",
]


@dataclass
class SurfaceDensityField:
    """Axial surface density with its boundary value and time stamp."""

    n_s: np.ndarray
    n_b: float
    t: float = 0.0
    h_x: float | None = None

    def __post_init__(self):
        self.n_s = np.asarray(self.n_s, dtype=float)
        if np.any(self.n_s < 0):
            raise ValueError("surface density must be nonnegative")
        if self.n_b < 0:
            raise ValueError("boundary density must be nonnegative")

    @property
    def spacing(self) -> float:
        return self.h_x if self.h_x is not None else 1.0 / (len(self.n_s) - 1)


@dataclass
class CurrentField:
    """Particle current on axial cell interfaces, positive toward +x."""

    j: np.ndarray


@dataclass
class DiffusionField:
    """Nodal diffusion coefficient with its certified bounds."""

    d: np.ndarray
    d_min: float = field(init=False)
    d_max: float = field(init=False)

    def __post_init__(self):
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if np.any(self.d <= 0):
            raise ValueError(
                "diffusion coefficient must be strictly positive; "
                "violates the bounded-diffusion assumption"
            )
        self.d_min = float(self.d.min())
        self.d_max = float(self.d.max())


def bernoulli(s):
    """B(s) = s / (exp(s) - 1) with a series branch for |s| < 1e-4."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-4
    safe = np.where(small, 1.0, s)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = safe / np.expm1(safe)
    series = 1.0 - s / 2.0 + s * s / 12.0 - s**4 / 720.0
    out = np.where(small, series, direct)
    # expm1 overflow at large positive s means B -> 0
    return np.where(np.isfinite(out), out, 0.0)


def _face_diffusion(d: np.ndarray, n: int) -> np.ndarray:
    # harmonic mean keeps flux continuity for rough coefficients
    d = np.broadcast_to(np.asarray(d, dtype=float), (n,))
    return 2.0 * d[:-1] * d[1:] / (d[:-1] + d[1:])


def sg_flux(n_left, n_right, vs_left, vs_right, d_face, h):
    """Exponential-fitting interface flux of D (dN/dx + N dV_s/dx).

    Exact on Slotboom equilibria (zero whenever N exp(V_s) matches across the
    face) and antisymmetric under swapping the two sides.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    delta = np.asarray(vs_right) - np.asarray(vs_left)
    return (np.asarray(d_face) / h) * (bernoulli(-delta) * n_right
                                       - bernoulli(delta) * n_left)


def _sg_coefficients(v_s: np.ndarray, d: np.ndarray, h: float):
    """Per-face transfer coefficients: flux_f = cr[f] N_{f+1} - cl[f] N_f."""
    n = len(v_s)
    d_face = _face_diffusion(d, n)
    delta = v_s[1:] - v_s[:-1]
    coeff_left = d_face / h * bernoulli(delta)
    coeff_right = d_face / h * bernoulli(-delta)
    return coeff_left, coeff_right


def _thomas(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
            rhs: np.ndarray) -> np.ndarray:
    """Tridiagonal solve without pivoting.

    For the M-matrices assembled here pivots stay bounded away from zero and
    a nonnegative right-hand side yields a nonnegative solution even in
    floating point (the sweeps only add products of nonnegative terms).
    """
    n = len(diag)
    d = diag.copy()
    r = rhs.copy()
    for i in range(1, n):
        m = lower[i - 1] / d[i - 1]
        d[i] -= m * upper[i - 1]
        r[i] -= m * r[i - 1]
    x = np.empty(n)
    x[-1] = r[-1] / d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = (r[i] - upper[i] * x[i + 1]) / d[i]
    return x


def advance_density(
    density: SurfaceDensityField,
    v_s: np.ndarray,
    diffusion: DiffusionField,
    dt: float,
    source: np.ndarray | None = None,
    n_b_right: float | None = None,
) -> SurfaceDensityField:
    """One backward-Euler step of the axial conservation law.

    Boundary values stay pinned; ``source`` adds dt * source to the interior
    balance (manufactured-solution hook).  ``n_b_right`` overrides the value
    pinned at the right endpoint.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_s = density.n_s
    v_s = np.asarray(v_s, dtype=float)
    n = len(n_s)
    if len(v_s) != n:
        raise ValueError("effective potential length mismatches density")
    h = density.spacing
    nb_l = density.n_b
    nb_r = density.n_b if n_b_right is None else n_b_right

    cl, cr = _sg_coefficients(v_s, diffusion.d, h)
    lam = dt / h
    diag = 1.0 + lam * (cl[1 : n - 1] + cr[0 : n - 2])
    lower = -lam * cl[1 : n - 2]
    upper = -lam * cr[1 : n - 2]
    rhs = n_s[1:-1].copy()
    if source is not None:
        rhs = rhs + dt * np.asarray(source, dtype=float)[1:-1]
    rhs[0] += lam * cl[0] * nb_l
    rhs[-1] += lam * cr[n - 2] * nb_r

    interior = _thomas(lower, diag, upper, rhs)
    if np.any(interior < 0):
        raise RuntimeError("negative density after an implicit step; invalid inputs")
    out = np.empty(n)
    out[0] = nb_l
    out[-1] = nb_r
    out[1:-1] = interior
    return SurfaceDensityField(n_s=out, n_b=density.n_b, t=density.t + dt,
                               h_x=density.h_x)


def steady_state(
    v_s: np.ndarray,
    diffusion: DiffusionField,
    n_b: float,
    h_x: float | None = None,
    n_b_right: float | None = None,
) -> SurfaceDensityField:
    """Direct solve of the stationary flux balance with pinned boundary values.

    ``n_b_right`` overrides the right endpoint (test hook for driven runs).
    """
    v_s = np.asarray(v_s, dtype=float)
    n = len(v_s)
    h = h_x if h_x is not None else 1.0 / (n - 1)
    nb_l = n_b
    nb_r = n_b if n_b_right is None else n_b_right

    cl, cr = _sg_coefficients(v_s, diffusion.d, h)
    diag = cl[1 : n - 1] + cr[0 : n - 2]
    lower = -cl[1 : n - 2]
    upper = -cr[1 : n - 2]
    rhs = np.zeros(n - 2)
    rhs[0] += cl[0] * nb_l
    rhs[-1] += cr[n - 2] * nb_r

    interior = _thomas(lower, diag, upper, rhs)
    out = np.empty(n)
    out[0] = nb_l
    out[-1] = nb_r
    out[1:-1] = interior
    return SurfaceDensityField(n_s=out, n_b=n_b, h_x=h_x)


def current(
    density: SurfaceDensityField,
    v_s: np.ndarray,
    diffusion: DiffusionField,
) -> CurrentField:
    """Particle current on interfaces; positive values flow toward +x."""
    v_s = np.asarray(v_s, dtype=float)
    n = len(v_s)
    h = density.spacing
    d_face = _face_diffusion(diffusion.d, n)
    flux = sg_flux(density.n_s[:-1], density.n_s[1:], v_s[:-1], v_s[1:], d_face, h)
    return CurrentField(j=-flux)


def diffusion_constant_alpha(energies: np.ndarray, masses: np.ndarray,
                             v_nn: np.ndarray, tau: float) -> DiffusionField:
    """Diffusion coefficient for a constant collision cross-section 1/tau.

    D(x) = tau * sum_n w_n(x) / m_n with softmax band weights, so
    tau / max(m) <= D <= tau / min(m).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    masses = np.asarray(masses, dtype=float)
    if np.any(masses <= 0):
        raise ValueError("effective masses must be positive")
    from .electrostatics import band_weights

    w = band_weights(np.asarray(energies, dtype=float), np.asarray(v_nn, dtype=float))
    d = tau * np.sum(w / masses[:, None], axis=0)
    return DiffusionField(d=d)
