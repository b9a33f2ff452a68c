"""Effective potentials, charge profiles, regularization and the Poisson solve.

The nonlinear Poisson step is posed as minimization of the convex functional
J(V) = 1/2 int |grad V|^2 + int N_s ln Z[V] over potentials matching the
boundary trace, and solved by Newton iterations with an Armijo line search.
The regularization operator is a discrete convolution with a symmetric
nonnegative mass-one kernel acting on the zero-extension of the field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import convolve1d
from scipy.sparse.linalg import LinearOperator, cg, splu

from .grids import DeviceGrid

__all__ = [
    "PotentialField",
    "EffectiveQuantities",
    "ChargeDensity",
    "LineSearchError",
    "project_potential",
    "band_weights",
    "effective_potential",
    "charge_profile",
    "effective_quantities",
    "compute_charge",
    "mollifier_kernel",
    "mollifier_matrix",
    "mollify",
    "assemble_poisson",
    "charge_source",
    "solve_nonlinear_poisson",
]


class LineSearchError(RuntimeError):
    """Raised when the Armijo search cannot decrease J (signals a bug)."""

    def __init__(self, message: str, v_last: np.ndarray, j_history: list[float]):
        super().__init__(message)
        self.v_last = v_last
        self.j_history = j_history


@dataclass
class PotentialField:
    """Electrostatic potential on the device grid with its boundary trace."""

    v: np.ndarray          # (n_x, n_z1, n_z2)
    v_b: np.ndarray        # (n_z1, n_z2), applied at both axial ends


@dataclass
class EffectiveQuantities:
    """Band-projected potential data derived from a device potential."""

    v_nn: np.ndarray       # (n_bands, n_x)
    z: np.ndarray          # (n_x,) partition function
    v_s: np.ndarray        # (n_x,) effective potential -log Z
    s: np.ndarray          # (n_x, n_z1, n_z2) normalized charge profile
    epsilon: float


@dataclass
class ChargeDensity:
    """Charge density and per-band axial densities for a given surface density."""

    rho: np.ndarray        # (n_x, n_z1, n_z2)
    n_band: np.ndarray     # (n_bands, n_x)
    slotboom: np.ndarray   # (n_x,) u = N_s / Z
    fermi: np.ndarray      # (n_x,) log u, NaN where N_s == 0


def project_potential(v: np.ndarray, g: np.ndarray, dgrid: DeviceGrid) -> np.ndarray:
    """Cross-section projections of the potential onto each confinement density."""
    v = np.asarray(v)
    if v.shape != (dgrid.n_x, dgrid.n_z1, dgrid.n_z2):
        raise ValueError(f"potential shape {v.shape} does not match device grid")
    if g.shape[-2:] != (dgrid.n_z1, dgrid.n_z2):
        raise ValueError(f"confinement density shape {g.shape} mismatches cross-section")
    wz = np.outer(dgrid.wz1, dgrid.wz2)
    return np.einsum("ikl,nkl,kl->ni", v, g, wz)


def band_weights(energies: np.ndarray, v_nn: np.ndarray) -> np.ndarray:
    """Softmax weights exp(-(E_n + V_nn)) / Z, max exponent subtracted."""
    expo = -(np.asarray(energies, dtype=float)[:, None] + v_nn)
    m = expo.max(axis=0)
    unnorm = np.exp(expo - m)
    return unnorm / unnorm.sum(axis=0)


def effective_potential(v_nn: np.ndarray, energies: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partition function and effective potential from band projections.

    Band sums subtract the max exponent so deep bands cannot underflow.
    """
    energies = np.asarray(energies, dtype=float)
    if energies.size < 1:
        raise ValueError("need at least one band")
    expo = -(energies[:, None] + v_nn)
    m = expo.max(axis=0)
    ssum = np.sum(np.exp(expo - m), axis=0)
    z = np.exp(m) * ssum
    log_z = m + np.log(ssum)
    return z, -log_z


def charge_profile(v_nn: np.ndarray, energies: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Normalized cross-section charge profile S = sum_n w_n(x) g_n(z)."""
    w = band_weights(energies, v_nn)
    return np.einsum("ni,nkl->ikl", w, g)


def effective_quantities(
    v: np.ndarray,
    spectrum,
    dgrid: DeviceGrid,
    eps: float = 0.0,
) -> EffectiveQuantities:
    """Project a (possibly regularized) potential and build Z, V_s and S."""
    v_reg = mollify(v, dgrid, eps, direction="both") if eps > 0 else np.asarray(v, dtype=float)
    v_nn = project_potential(v_reg, spectrum.g, dgrid)
    z, v_s = effective_potential(v_nn, spectrum.energies)
    s = charge_profile(v_nn, spectrum.energies, spectrum.g)
    return EffectiveQuantities(v_nn=v_nn, z=z, v_s=v_s, s=s, epsilon=eps)


def compute_charge(n_s: np.ndarray, eq: EffectiveQuantities, energies: np.ndarray) -> ChargeDensity:
    """Charge density rho = N_s S and the Slotboom/Fermi quantities."""
    n_s = np.asarray(n_s, dtype=float)
    rho = n_s[:, None, None] * eq.s
    w = band_weights(energies, eq.v_nn)
    n_band = w * n_s[None, :]
    u = n_s / eq.z
    with np.errstate(divide="ignore"):
        fermi = np.where(n_s > 0, np.log(np.where(n_s > 0, u, 1.0)), np.nan)
    return ChargeDensity(rho=rho, n_band=n_band, slotboom=u, fermi=fermi)


def mollifier_kernel(eps: float, h: float) -> np.ndarray:
    """Symmetric nonnegative mass-one bump kernel with support radius eps."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    r = int(np.floor(eps / h + 1e-12))
    if eps == 0 or r == 0:
        return np.array([1.0])
    s = np.arange(-r, r + 1) / (r + 1.0)
    k = np.exp(-1.0 / (1.0 - s * s))
    return k / k.sum()


def mollifier_matrix(n: int, eps: float, h: float) -> np.ndarray:
    """Dense matrix of the 1d zero-extension convolution (symmetric Toeplitz)."""
    k = mollifier_kernel(eps, h)
    r = (len(k) - 1) // 2
    mat = np.zeros((n, n))
    for off in range(-r, r + 1):
        mat += k[off + r] * np.eye(n, k=off)
    return mat


def mollify(field: np.ndarray, dgrid: DeviceGrid, eps: float, direction: str = "both") -> np.ndarray:
    """Apply the regularization operator along the requested directions.

    eps = 0 is the identity.  The convolution acts on the zero-extension of
    the field, so the operator's matrix is symmetric Toeplitz per direction.
    """
    field = np.asarray(field, dtype=float)
    if direction not in ("x", "z", "both"):
        raise ValueError(f"unknown direction {direction!r}")
    if eps == 0:
        return field
    out = field
    if direction in ("x", "both"):
        if eps > 0.5 * dgrid.length:
            raise ValueError(f"eps={eps} exceeds half the axial extent {dgrid.length}")
        k = mollifier_kernel(eps, dgrid.h_x)
        out = convolve1d(out, k, axis=0, mode="constant", cval=0.0)
    if direction in ("z", "both"):
        if field.ndim != 3:
            raise ValueError("z-direction regularization needs a 3d field")
        if eps > 0.5 * min(dgrid.lz1, dgrid.lz2):
            raise ValueError(f"eps={eps} exceeds half the cross-section extent")
        k1 = mollifier_kernel(eps, dgrid.h_z1)
        k2 = mollifier_kernel(eps, dgrid.h_z2)
        out = convolve1d(out, k1, axis=1, mode="constant", cval=0.0)
        out = convolve1d(out, k2, axis=2, mode="constant", cval=0.0)
    return out


def _stiffness_1d(n: int, h: float, dirichlet: bool) -> sp.csr_matrix:
    """1d face-difference stiffness; the Dirichlet variant keeps interior rows."""
    main = np.full(n, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    off = np.full(n - 1, -1.0 / h)
    full = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    if dirichlet:
        return full[1:-1, 1:-1].tocsr()
    return full


@dataclass
class PoissonOperator:
    """Assembled symmetric operator data for the device Poisson problem.

    ``stiffness`` acts on interior-axial-plane unknowns with the full
    cross-section retained (Neumann sides enter through the face-difference
    form, equivalent to ghost-node reflection); ``mass`` is the lumped
    quadrature mass on the same unknowns.
    """

    grid: DeviceGrid
    stiffness: sp.csr_matrix
    mass: np.ndarray           # diagonal entries, reduced space
    _coupling: sp.csr_matrix   # maps v_b cross-section values to the lifting vector

    @property
    def n_reduced(self) -> int:
        return (self.grid.n_x - 2) * self.grid.n_z1 * self.grid.n_z2

    def reduce(self, v_full: np.ndarray) -> np.ndarray:
        return v_full[1:-1].ravel()

    def expand(self, v_red: np.ndarray, v_b: np.ndarray) -> np.ndarray:
        g = self.grid
        full = np.empty((g.n_x, g.n_z1, g.n_z2))
        full[1:-1] = v_red.reshape(g.n_x - 2, g.n_z1, g.n_z2)
        full[0] = v_b
        full[-1] = v_b
        return full

    def lifting(self, v_b: np.ndarray) -> np.ndarray:
        return self._coupling @ v_b.ravel()

    def dirichlet_energy(self, v_full: np.ndarray) -> float:
        g = self.grid
        wz = np.outer(g.wz1, g.wz2)
        ex = np.sum(np.diff(v_full, axis=0) ** 2 * wz[None, :, :]) / g.h_x
        ez1 = np.sum(np.diff(v_full, axis=1) ** 2
                     * (g.wx[:, None, None] * g.wz2[None, None, :])) / g.h_z1
        ez2 = np.sum(np.diff(v_full, axis=2) ** 2
                     * (g.wx[:, None, None] * g.wz1[None, :, None])) / g.h_z2
        return 0.5 * float(ex + ez1 + ez2)


def assemble_poisson(dgrid: DeviceGrid) -> PoissonOperator:
    """Assemble the reduced SPD stiffness, lumped mass and Dirichlet coupling."""
    nx, n1, n2 = dgrid.n_x, dgrid.n_z1, dgrid.n_z2
    kx = _stiffness_1d(nx, dgrid.h_x, dirichlet=True)
    k1 = _stiffness_1d(n1, dgrid.h_z1, dirichlet=False)
    k2 = _stiffness_1d(n2, dgrid.h_z2, dirichlet=False)
    w1 = sp.diags(dgrid.wz1)
    w2 = sp.diags(dgrid.wz2)
    wx = sp.identity(nx - 2) * dgrid.h_x
    stiff = (
        sp.kron(kx, sp.kron(w1, w2))
        + sp.kron(wx, sp.kron(k1, w2))
        + sp.kron(wx, sp.kron(w1, k2))
    ).tocsr()

    mass = (np.full(nx - 2, dgrid.h_x)[:, None, None]
            * dgrid.wz1[None, :, None] * dgrid.wz2[None, None, :]).ravel()

    # interior planes adjacent to a Dirichlet plane pick up V_b / h_x
    nz = n1 * n2
    wz_diag = np.outer(dgrid.wz1, dgrid.wz2).ravel() / dgrid.h_x
    coupling = sp.lil_matrix(((nx - 2) * nz, nz))
    idx = np.arange(nz)
    coupling[idx, idx] = wz_diag
    coupling[(nx - 3) * nz + idx, idx] += wz_diag
    return PoissonOperator(grid=dgrid, stiffness=stiff, mass=mass,
                           _coupling=coupling.tocsr())


def charge_source(
    v_full: np.ndarray,
    n_s: np.ndarray,
    spectrum,
    dgrid: DeviceGrid,
    eps: float = 0.0,
) -> np.ndarray:
    """Right-hand-side field R[N_s S[V]] of the potential equation."""
    eq = effective_quantities(v_full, spectrum, dgrid, eps=eps)
    rho = np.asarray(n_s)[:, None, None] * eq.s
    return mollify(rho, dgrid, eps, direction="both") if eps > 0 else rho


def _full_mass(dgrid: DeviceGrid) -> np.ndarray:
    return (dgrid.wx[:, None, None] * dgrid.wz1[None, :, None]
            * dgrid.wz2[None, None, :])


def charge_rhs(
    v_full: np.ndarray,
    n_s: np.ndarray,
    spectrum,
    dgrid: DeviceGrid,
    op: PoissonOperator,
    eps: float = 0.0,
) -> np.ndarray:
    """Reduced discrete load vector of the charge term.

    This is the exact gradient contribution of the band-sum part of J: the
    convolution's adjoint applied to the quadrature-weighted charge.  For
    eps = 0 it reduces to mass-weighting of N_s S[V].
    """
    eq = effective_quantities(v_full, spectrum, dgrid, eps=eps)
    rho = np.asarray(n_s)[:, None, None] * eq.s
    weighted = _full_mass(dgrid) * rho
    if eps > 0:
        weighted = mollify(weighted, dgrid, eps, direction="both")
    return op.reduce(weighted)


def _functional(
    v_full: np.ndarray,
    n_s: np.ndarray,
    spectrum,
    dgrid: DeviceGrid,
    op: PoissonOperator,
    eps: float,
) -> float:
    v_reg = mollify(v_full, dgrid, eps, direction="both") if eps > 0 else v_full
    v_nn = project_potential(v_reg, spectrum.g, dgrid)
    _, v_s = effective_potential(v_nn, spectrum.energies)
    j1 = float(np.sum(dgrid.wx * np.asarray(n_s) * (-v_s)))
    return op.dirichlet_energy(v_full) + j1


def solve_nonlinear_poisson(
    n_s: np.ndarray,
    spectrum,
    v_b: np.ndarray,
    dgrid: DeviceGrid,
    eps: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 60,
    return_info: bool = False,
):
    """Newton minimization of the convex potential functional.

    Returns the PotentialField whose first-order optimality residual is below
    ``tol`` in the stiffness dual norm.  The Jacobian of the charge term is
    applied matrix-free per axial slice (two weighted-covariance terms);
    linear solves use conjugate gradients preconditioned by a factorization
    of the linear stiffness.
    """
    n_s = np.asarray(n_s, dtype=float)
    if np.any(n_s < 0):
        raise ValueError("surface density must be nonnegative")
    v_b = np.asarray(v_b, dtype=float)
    if v_b.shape != (dgrid.n_z1, dgrid.n_z2):
        raise ValueError(f"boundary trace shape {v_b.shape} mismatches cross-section")

    op = assemble_poisson(dgrid)
    lu = splu(op.stiffness.tocsc())
    b_dir = op.lifting(v_b)
    g_tab = spectrum.g
    energies = spectrum.energies
    m_full = _full_mass(dgrid)

    def gradient(v_red: np.ndarray) -> np.ndarray:
        v_full = op.expand(v_red, v_b)
        return op.stiffness @ v_red - b_dir - charge_rhs(v_full, n_s, spectrum,
                                                         dgrid, op, eps)

    def hessian_charge(v_red: np.ndarray):
        # weights frozen at the current iterate
        v_full = op.expand(v_red, v_b)
        v_reg = mollify(v_full, dgrid, eps, direction="both") if eps > 0 else v_full
        w = band_weights(energies, project_potential(v_reg, g_tab, dgrid))

        def apply(phi_red: np.ndarray) -> np.ndarray:
            phi_full = op.expand(phi_red, np.zeros_like(v_b))
            phi_reg = (mollify(phi_full, dgrid, eps, direction="both")
                       if eps > 0 else phi_full)
            dv_nn = project_potential(phi_reg, g_tab, dgrid)
            mean = np.sum(w * dv_nn, axis=0)
            dw = -w * (dv_nn - mean[None, :])
            ds = np.einsum("ni,nkl->ikl", dw, g_tab)
            drho = m_full * (n_s[:, None, None] * ds)
            if eps > 0:
                drho = mollify(drho, dgrid, eps, direction="both")
            return -op.reduce(drho)

        return apply

    v_red = op.reduce(np.broadcast_to(v_b, (dgrid.n_x, dgrid.n_z1, dgrid.n_z2)).copy())
    j_history = [_functional(op.expand(v_red, v_b), n_s, spectrum, dgrid, op, eps)]
    grad_norms: list[float] = []

    n_red = op.n_reduced
    precond = LinearOperator((n_red, n_red), matvec=lu.solve)

    converged = False
    for _ in range(max_iter):
        g_vec = gradient(v_red)
        dual = float(np.sqrt(abs(g_vec @ lu.solve(g_vec))))
        grad_norms.append(dual)
        if dual <= tol:
            converged = True
            break
        h_charge = hessian_charge(v_red)
        hess = LinearOperator(
            (n_red, n_red),
            matvec=lambda q: op.stiffness @ q + h_charge(q),
        )
        delta, info = cg(hess, -g_vec, rtol=1e-12, atol=0.0, M=precond, maxiter=400)
        if info != 0:
            delta = lu.solve(-g_vec)  # fall back to a preconditioned descent step
        t = 1.0
        slope = float(g_vec @ delta)
        j_cur = j_history[-1]
        j_new = j_cur
        for _ in range(60):
            j_new = _functional(op.expand(v_red + t * delta, v_b),
                                n_s, spectrum, dgrid, op, eps)
            if j_new <= j_cur + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise LineSearchError(
                "line search failed to decrease the potential functional",
                op.expand(v_red, v_b), j_history,
            )
        v_red = v_red + t * delta
        j_history.append(j_new)

    if not converged:
        g_vec = gradient(v_red)
        dual = float(np.sqrt(abs(g_vec @ lu.solve(g_vec))))
        grad_norms.append(dual)
        if dual > tol:
            raise RuntimeError(
                f"Newton did not reach tolerance {tol:.1e}; last dual norm {dual:.3e}"
            )

    field = PotentialField(v=op.expand(v_red, v_b), v_b=v_b)
    if return_info:
        return field, {"j_history": j_history, "grad_norms": grad_norms,
                       "iterations": len(j_history) - 1}
    return field
