"""Multiband relaxation-kinetic solver and its diffusive-limit harness.

The collision operator exchanges population between bands and momenta toward
band equilibria; gain and loss are accumulated with identical quadrature
weights, so the discrete operator conserves mass structurally.  The time
stepper is IMEX: first-order upwind transport treated explicitly at cost
1/eta, stiff collisions implicitly at 1/eta^2 (closed form for a constant
cross-section, dense per-position solves otherwise).  Positivity must come
from the scheme; any negative node aborts the run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import MomentumGrid
from .transport import DiffusionField, SurfaceDensityField, advance_density

__all__ = [
    "ConstantAlpha",
    "TabulatedAlpha",
    "KineticConfig",
    "DistributionFunction",
    "MaxwellianTable",
    "ThetaField",
    "build_maxwellians",
    "collision_apply",
    "assemble_collision_matrix",
    "solve_theta",
    "advance_boltzmann",
    "moments",
    "kernel_projection",
    "weighted_norm",
    "hilbert_correction",
    "DiffusiveLimitSetup",
    "diffusive_limit_experiment",
]


@dataclass(frozen=True)
class ConstantAlpha:
    """Constant scattering cross-section 1/tau."""

    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def alpha_min(self) -> float:
        return 1.0 / self.tau

    @property
    def alpha_max(self) -> float:
        return 1.0 / self.tau


@dataclass(frozen=True)
class TabulatedAlpha:
    """Tabulated cross-section alpha[n, n', p, p'] with certified bounds."""

    values: np.ndarray
    alpha_min: float = field(init=False)
    alpha_max: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[0] != v.shape[1] or v.shape[2] != v.shape[3]:
            raise ValueError("cross-section table must have shape (nb, nb, np, np)")
        if np.any(v <= 0):
            raise ValueError(
                "cross-section must be strictly positive; violates the "
                "bounded-symmetric-cross-section assumption"
            )
        if not np.allclose(v, v.transpose(1, 0, 3, 2), rtol=0, atol=1e-14):
            raise ValueError(
                "cross-section must be symmetric under (n,p) <-> (n',p'); "
                "violates the bounded-symmetric-cross-section assumption"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "alpha_min", float(v.min()))
        object.__setattr__(self, "alpha_max", float(v.max()))


@dataclass
class KineticConfig:
    """Phase-space discretization and scattering data for one kinetic run."""

    eta: float
    alpha: ConstantAlpha | TabulatedAlpha
    n_bands: int
    pgrid: MomentumGrid
    x: np.ndarray
    boundary: str = "zero_inflow"

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.boundary not in ("zero_inflow", "periodic"):
            raise ValueError(f"unknown boundary policy {self.boundary!r}")
        self.x = np.asarray(self.x, dtype=float)
        dx = np.diff(self.x)
        if len(dx) < 2 or not np.allclose(dx, dx[0], rtol=1e-12):
            raise ValueError("axial grid must be uniform")

    @property
    def h_x(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def n_x(self) -> int:
        return len(self.x)


@dataclass
class DistributionFunction:
    """Nonnegative multiband phase-space distribution at one time."""

    f: np.ndarray          # (n_bands, n_x, n_p)
    t: float = 0.0

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if not np.all(np.isfinite(self.f)):
            raise ValueError("distribution contains non-finite values")
        if np.any(self.f < 0):
            raise ValueError("distribution must be nonnegative")


@dataclass
class MaxwellianTable:
    """Band equilibria on the phase-space grid.

    ``script_m`` carries the partition-normalized equilibria, ``plain_m``
    the un-normalized ones (Z times larger); ``mass`` is the discrete value
    of the full momentum sum, whose deviation from 1 is the truncation
    defect.
    """

    script_m: np.ndarray   # (n_bands, n_x, n_p)
    plain_m: np.ndarray    # (n_bands, n_x, n_p)
    z: np.ndarray          # (n_x,)
    mass: np.ndarray       # (n_x,)
    energies: np.ndarray   # (n_bands,)
    masses: np.ndarray     # (n_bands,)
    v_nn: np.ndarray       # (n_bands, n_x)

    @property
    def truncation_defect(self) -> float:
        return float(np.max(np.abs(1.0 - self.mass)))


@dataclass
class ThetaField:
    """Solution of the constrained collision equation and its first moment."""

    theta: np.ndarray      # (n_bands, n_x, n_p)
    d: np.ndarray          # (n_x,) diffusion coefficient


def build_maxwellians(
    energies: np.ndarray,
    masses: np.ndarray,
    v_nn: np.ndarray,
    pgrid: MomentumGrid,
    defect_threshold: float = 1e-6,
) -> MaxwellianTable:
    """Tabulate band equilibria with max-exponent stabilization.

    Raises when the momentum-truncation defect exceeds ``defect_threshold``
    (the cure is a larger p_max or more momentum nodes).
    """
    from .electrostatics import band_weights, effective_potential

    energies = np.asarray(energies, dtype=float)
    masses = np.asarray(masses, dtype=float)
    v_nn = np.atleast_2d(np.asarray(v_nn, dtype=float))
    if np.any(masses <= 0):
        raise ValueError("effective masses must be positive")

    p = pgrid.p
    gauss = (np.exp(-p[None, :] ** 2 / (2.0 * masses[:, None]))
             / np.sqrt(2.0 * np.pi * masses[:, None]))          # (nb, n_p)
    w = band_weights(energies, v_nn)                            # (nb, n_x)
    z, _ = effective_potential(v_nn, energies)
    script_m = w[:, :, None] * gauss[:, None, :]
    plain_m = z[None, :, None] * script_m
    mass = pgrid.integrate(script_m, axis=-1).sum(axis=0)       # (n_x,)
    table = MaxwellianTable(script_m=script_m, plain_m=plain_m, z=z, mass=mass,
                            energies=energies, masses=masses, v_nn=v_nn)
    if table.truncation_defect > defect_threshold:
        raise ValueError(
            f"momentum truncation defect {table.truncation_defect:.3e} exceeds "
            f"{defect_threshold:.1e}; increase p_max or the momentum resolution"
        )
    return table


def _density(f: np.ndarray, pgrid: MomentumGrid) -> np.ndarray:
    return pgrid.integrate(f, axis=-1).sum(axis=0)


def collision_apply(
    f: np.ndarray,
    table: MaxwellianTable,
    alpha: ConstantAlpha | TabulatedAlpha,
    pgrid: MomentumGrid,
) -> np.ndarray:
    """Relaxation collision operator on a phase-space array.

    Gain and loss use the same weighted momentum sums, so the total mass of
    the output vanishes identically and band equilibria are annihilated
    bitwise.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != table.script_m.shape:
        raise ValueError(f"shape {f.shape} mismatches table {table.script_m.shape}")
    if isinstance(alpha, ConstantAlpha):
        n_f = _density(f, pgrid)
        gain = table.script_m * n_f[None, :, None]
        loss = f * table.mass[None, :, None]
        return (gain - loss) / alpha.tau
    wq = pgrid.w
    mu = np.einsum("nmpq,q,mxq->nxp", alpha.values, wq, f)
    lam = np.einsum("nmpq,q,mxq->nxp", alpha.values, wq, table.script_m)
    return table.script_m * mu - f * lam


def assemble_collision_matrix(
    table: MaxwellianTable,
    alpha: ConstantAlpha | TabulatedAlpha,
    pgrid: MomentumGrid,
    ix: int = 0,
) -> np.ndarray:
    """Dense matrix of the collision operator at one axial position."""
    nb, _, n_p = table.script_m.shape
    wq = pgrid.w
    m_slice = table.script_m[:, ix, :]                          # (nb, n_p)
    if isinstance(alpha, ConstantAlpha):
        gain = np.einsum("np,mq->npmq", m_slice, np.broadcast_to(wq, (nb, n_p)))
        mat = gain.reshape(nb * n_p, nb * n_p) / alpha.tau
        lam = np.full(nb * n_p, table.mass[ix] / alpha.tau)
    else:
        mat = np.einsum("nmpq,np,q->npmq", alpha.values, m_slice,
                        wq).reshape(nb * n_p, nb * n_p)
        lam = np.einsum("nmpq,q,mq->np", alpha.values, wq,
                        m_slice).reshape(nb * n_p)
    mat[np.arange(nb * n_p), np.arange(nb * n_p)] -= lam
    return mat


def solve_theta(
    table: MaxwellianTable,
    alpha: ConstantAlpha | TabulatedAlpha,
    pgrid: MomentumGrid,
    residual_tol: float = 1e-10,
) -> ThetaField:
    """Zero-mean solution of Q(theta) = -(p/m)M and its diffusion moment.

    One dense constrained solve per axial position; the zero-mean constraint
    enters through a Lagrange multiplier on the kernel direction.
    """
    nb, n_x, n_p = table.script_m.shape
    p = pgrid.p
    wq = pgrid.w
    velocity = p[None, :] / table.masses[:, None]               # (nb, n_p)
    theta = np.empty_like(table.script_m)
    d = np.empty(n_x)
    for ix in range(n_x):
        rhs_slice = -velocity * table.script_m[:, ix, :]
        rhs = rhs_slice.reshape(nb * n_p)
        mass_rhs = float(pgrid.integrate(rhs_slice, axis=-1).sum())
        if abs(mass_rhs) > 1e-12 * max(1.0, np.abs(rhs).max()):
            raise RuntimeError(
                f"collision right-hand side is not mean-free ({mass_rhs:.3e}); "
                "momentum grid lost its symmetry"
            )
        a_mat = assemble_collision_matrix(table, alpha, pgrid, ix)
        kkt = np.zeros((nb * n_p + 1, nb * n_p + 1))
        kkt[:-1, :-1] = a_mat
        kkt[:-1, -1] = table.script_m[:, ix, :].reshape(-1)
        kkt[-1, :-1] = np.tile(wq, nb)
        sol = np.linalg.solve(kkt, np.concatenate([rhs, [0.0]]))
        th = sol[:-1]
        res = np.linalg.norm(a_mat @ th - rhs)
        if res > residual_tol * max(1.0, np.linalg.norm(rhs)):
            raise RuntimeError(f"theta solve residual {res:.3e} at x-index {ix}")
        th_slice = th.reshape(nb, n_p)
        theta[:, ix, :] = th_slice
        d[ix] = float(pgrid.integrate(velocity * th_slice, axis=-1).sum())
    return ThetaField(theta=theta, d=d)


def _upwind_divergence(f: np.ndarray, speed: np.ndarray, h: float, axis: int,
                       boundary: str) -> np.ndarray:
    """Conservative first-order upwind divergence of speed * f along axis."""
    s = np.broadcast_to(speed, f.shape)
    f = np.moveaxis(f, axis, -1)
    s = np.moveaxis(s, axis, -1)
    if boundary == "periodic":
        fpad = np.concatenate([f[..., -1:], f, f[..., :1]], axis=-1)
    else:
        zero = np.zeros_like(f[..., :1])
        fpad = np.concatenate([zero, f, zero], axis=-1)
    spad = np.concatenate([s[..., :1], s, s[..., -1:]], axis=-1)
    s_face = spad[..., :-1]  # speed is constant along the advected axis per band
    flux = (np.maximum(s_face, 0.0) * fpad[..., :-1]
            + np.minimum(s_face, 0.0) * fpad[..., 1:])
    div = (flux[..., 1:] - flux[..., :-1]) / h
    return np.moveaxis(div, -1, axis)


def advance_boltzmann(
    state: DistributionFunction,
    table: MaxwellianTable,
    cfg: KineticConfig,
    dt: float,
    transport: bool = True,
    collision: bool = True,
) -> DistributionFunction:
    """One IMEX step: explicit upwind transport, implicit collision relaxation.

    Any negative node aborts: positivity must come from the scheme, not from
    clipping.
    """
    f = state.f
    nb, n_x, n_p = f.shape
    p = cfg.pgrid.p
    h_p = cfg.pgrid.h_p
    velocity = p[None, :] / table.masses[:, None]               # (nb, n_p)
    dv_dx = np.gradient(table.v_nn, cfg.h_x, axis=1)            # (nb, n_x)
    accel = -dv_dx

    v_max = float(np.abs(velocity).max())
    a_max = float(np.abs(accel).max())
    limit = cfg.eta * min(
        cfg.h_x / v_max if v_max > 0 else np.inf,
        h_p / a_max if a_max > 0 else np.inf,
    )
    if dt > limit * (1.0 + 1e-12):
        raise ValueError(f"dt={dt:.3e} violates the transport CFL limit {limit:.3e}")

    fnew = f
    if transport:
        div_x = _upwind_divergence(f, velocity[:, None, :], cfg.h_x, axis=1,
                                   boundary=cfg.boundary)
        div_p = _upwind_divergence(f, accel[:, :, None], h_p, axis=2,
                                   boundary="zero_inflow")
        fnew = f - (dt / cfg.eta) * (div_x + div_p)

    if collision:
        c = dt / cfg.eta**2
        if isinstance(cfg.alpha, ConstantAlpha):
            n_star = _density(fnew, cfg.pgrid)
            fnew = ((fnew + (c / cfg.alpha.tau) * n_star[None, :, None]
                     * table.script_m)
                    / (1.0 + (c / cfg.alpha.tau) * table.mass[None, :, None]))
        else:
            n_dof = nb * n_p
            eye = np.eye(n_dof)
            out = np.empty_like(fnew)
            for ix in range(n_x):
                a_mat = assemble_collision_matrix(table, cfg.alpha, cfg.pgrid, ix)
                out[:, ix, :] = np.linalg.solve(
                    eye - c * a_mat, fnew[:, ix, :].reshape(-1)
                ).reshape(nb, n_p)
            fnew = out

    if np.any(fnew < 0):
        raise RuntimeError(
            "negative distribution value after a step; the scheme must "
            "preserve positivity (check the CFL margin)"
        )
    return DistributionFunction(f=fnew, t=state.t + dt)


def moments(
    state: DistributionFunction,
    table: MaxwellianTable,
    cfg: KineticConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Density and rescaled current of the kinetic state."""
    p = cfg.pgrid.p
    velocity = p[None, :] / table.masses[:, None]
    n_s = _density(state.f, cfg.pgrid)
    j = cfg.pgrid.integrate(velocity[:, None, :] * state.f, axis=-1).sum(axis=0) / cfg.eta
    return n_s, j


def kernel_projection(f: np.ndarray, table: MaxwellianTable,
                      pgrid: MomentumGrid) -> np.ndarray:
    """Orthogonal projection onto the span of the band equilibria."""
    n_f = _density(f, pgrid)
    return (n_f / table.mass)[None, :, None] * table.script_m


def weighted_norm(f: np.ndarray, table: MaxwellianTable, h_x: float,
                  pgrid: MomentumGrid) -> float:
    """Equilibrium-weighted L2 norm over bands, position and momentum."""
    integrand = f * f / table.script_m
    per_x = pgrid.integrate(integrand, axis=-1).sum(axis=0)
    return float(np.sqrt(h_x * per_x.sum()))


def hilbert_correction(
    theta: ThetaField,
    n_s: np.ndarray,
    v_s: np.ndarray,
    h_x: float,
) -> np.ndarray:
    """First-order correction -theta (dN/dx + N dV_s/dx) of the expansion."""
    drive = np.gradient(n_s, h_x) + n_s * np.gradient(v_s, h_x)
    return -theta.theta * drive[None, :, None]


@dataclass
class DiffusiveLimitSetup:
    """Scenario description for the small-mean-free-path verification runs."""

    energies: np.ndarray
    masses: np.ndarray
    v_nn: np.ndarray           # (n_bands, n_x) given smooth potential
    x: np.ndarray
    pgrid: MomentumGrid
    tau: float
    n0: np.ndarray             # compactly supported initial density
    t_final: float
    cfl_safety: float = 0.9
    dd_steps: int = 2000

    @property
    def h_x(self) -> float:
        return float(self.x[1] - self.x[0])


def _run_kinetic(setup: DiffusiveLimitSetup, eta: float, collision: bool = True):
    cfg = KineticConfig(eta=eta, alpha=ConstantAlpha(setup.tau),
                        n_bands=len(setup.energies), pgrid=setup.pgrid,
                        x=setup.x, boundary="zero_inflow")
    table = build_maxwellians(setup.energies, setup.masses, setup.v_nn, setup.pgrid)
    state = DistributionFunction(f=setup.n0[None, :, None] * table.script_m)

    velocity = setup.pgrid.p[None, :] / setup.masses[:, None]
    accel = -np.gradient(setup.v_nn, setup.h_x, axis=1)
    rate = (np.abs(velocity).max() / setup.h_x
            + (np.abs(accel).max() / setup.pgrid.h_p if np.abs(accel).max() > 0 else 0.0))
    dt = setup.cfl_safety * eta / rate
    n_steps = int(np.ceil(setup.t_final / dt))
    dt = setup.t_final / n_steps

    def total_mass(arr: np.ndarray) -> float:
        return float(setup.h_x * setup.pgrid.integrate(arr, axis=-1).sum())

    mass0 = total_mass(state.f)
    for _ in range(n_steps):
        state = advance_boltzmann(state, table, cfg, dt, collision=collision)
    leakage = abs(total_mass(state.f) - mass0) / mass0
    return state, table, cfg, leakage


def _run_drift_diffusion(setup: DiffusiveLimitSetup) -> np.ndarray:
    from .electrostatics import effective_potential

    table = build_maxwellians(setup.energies, setup.masses, setup.v_nn, setup.pgrid)
    theta = solve_theta(table, ConstantAlpha(setup.tau), setup.pgrid)
    _, v_s = effective_potential(setup.v_nn, setup.energies)
    density = SurfaceDensityField(n_s=setup.n0.copy(), n_b=0.0, h_x=setup.h_x)
    diffusion = DiffusionField(d=theta.d)
    dt = setup.t_final / setup.dd_steps
    for _ in range(setup.dd_steps):
        density = advance_density(density, v_s, diffusion, dt)
    return density.n_s


def diffusive_limit_experiment(
    setup: DiffusiveLimitSetup,
    eta_list: list[float],
) -> dict:
    """Kinetic-versus-diffusion error table over a ladder of mean free paths.

    For each eta the kinetic solver runs to the fixed final time on the
    truncated domain with zero-inflow boundaries; the reference is the
    drift-diffusion solution with the diffusion coefficient taken from the
    constrained collision solve.  Also reports the measured deviation from
    local equilibrium against the first-order expansion term at the smallest
    eta.
    """
    if any(b >= a for a, b in zip(eta_list, eta_list[1:])):
        raise ValueError("eta_list must be strictly decreasing")

    from .electrostatics import effective_potential

    n_dd = _run_drift_diffusion(setup)
    rows = []
    hilbert_ratio = None
    for i, eta in enumerate(eta_list):
        state, table, cfg, leakage = _run_kinetic(setup, eta)
        n_eta, _ = moments(state, table, cfg)
        err = float(np.sqrt(setup.h_x * np.sum((n_eta - n_dd) ** 2)))
        rows.append({"eta": eta, "error": err, "leakage": leakage})
        if i == len(eta_list) - 1:
            theta = solve_theta(table, ConstantAlpha(setup.tau), setup.pgrid)
            _, v_s = effective_potential(setup.v_nn, setup.energies)
            f1 = hilbert_correction(theta, n_eta, v_s, setup.h_x)
            deviation = state.f - kernel_projection(state.f, table, setup.pgrid)
            num = weighted_norm(deviation, table, setup.h_x, setup.pgrid)
            den = weighted_norm(eta * f1, table, setup.h_x, setup.pgrid)
            hilbert_ratio = num / den if den > 0 else np.inf

    for i in range(len(rows) - 1):
        rows[i]["order"] = float(
            np.log(rows[i]["error"] / rows[i + 1]["error"])
            / np.log(rows[i]["eta"] / rows[i + 1]["eta"])
        )
    rows[-1]["order"] = np.nan
    return {"rows": rows, "hilbert_ratio": hilbert_ratio, "n_dd": n_dd}
