"""Tensor-product grids and discrete calculus for the unit cell, device and momentum space.

All grids are uniform per axis.  Quadrature is the trapezoid rule on bounded
axes and plain uniform weights on the periodic axis.  Momentum integrals pair
the +p and -p terms before summing so that odd integrands cancel exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridConfig",
    "UnitCellGrid",
    "DeviceGrid",
    "MomentumGrid",
    "build_grids",
    "discrete_norms",
]


@dataclass(frozen=True)
class GridConfig:
    """Node counts and extents for all three grids."""

    n_y: int = 16
    n_z1: int = 17
    n_z2: int = 17
    lz1: float = 1.0
    lz2: float = 1.0
    n_x: int = 33
    length: float = 1.0
    n_p: int = 64
    p_max: float = 8.0


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    return w


def paired_sum(terms: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` pairing the first and last entries inward.

    With symmetric weights the i-th and (n-1-i)-th terms of an odd integrand
    are exact negations, so each pair contributes a bitwise zero.
    """
    t = np.moveaxis(np.asarray(terms), axis, -1)
    n = t.shape[-1]
    half = n // 2
    paired = t[..., :half] + t[..., n - 1 : n - 1 - half : -1]
    total = paired.sum(axis=-1)
    if n % 2 == 1:
        total = total + t[..., half]
    return total


@dataclass(frozen=True)
class UnitCellGrid:
    """Discretization of the cell (-1/2,1/2) x (0,lz1) x (0,lz2).

    The y axis is periodic (node n_y wraps to node 0); the z boundary nodes
    are Dirichlet and carry no unknowns.
    """

    n_y: int
    n_z1: int
    n_z2: int
    lz1: float
    lz2: float
    h_y: float = field(init=False)
    h_z1: float = field(init=False)
    h_z2: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "h_y", 1.0 / self.n_y)
        object.__setattr__(self, "h_z1", self.lz1 / (self.n_z1 - 1))
        object.__setattr__(self, "h_z2", self.lz2 / (self.n_z2 - 1))

    @property
    def y(self) -> np.ndarray:
        return -0.5 + self.h_y * np.arange(self.n_y)

    @property
    def z1(self) -> np.ndarray:
        return self.h_z1 * np.arange(self.n_z1)

    @property
    def z2(self) -> np.ndarray:
        return self.h_z2 * np.arange(self.n_z2)

    @property
    def wy(self) -> np.ndarray:
        return np.full(self.n_y, self.h_y)

    @property
    def wz1(self) -> np.ndarray:
        return _trapezoid_weights(self.n_z1, self.h_z1)

    @property
    def wz2(self) -> np.ndarray:
        return _trapezoid_weights(self.n_z2, self.h_z2)

    @property
    def n_interior(self) -> int:
        return self.n_y * (self.n_z1 - 2) * (self.n_z2 - 2)

    def cell_volume(self) -> float:
        return self.wy.sum() * self.wz1.sum() * self.wz2.sum()

    def integrate_cell(self, f: np.ndarray) -> float:
        """Quadrature of a nodal field over the full unit cell."""
        if f.shape != (self.n_y, self.n_z1, self.n_z2):
            raise ValueError(f"field shape {f.shape} does not match unit cell grid")
        w = self.wy[:, None, None] * self.wz1[None, :, None] * self.wz2[None, None, :]
        return float(np.sum(w * f))

    def integrate_cross_section(self, f: np.ndarray) -> np.ndarray:
        """Quadrature over (z1, z2), keeping any leading axes."""
        if f.shape[-2:] != (self.n_z1, self.n_z2):
            raise ValueError(f"field shape {f.shape} does not match cross-section grid")
        return np.tensordot(f, np.outer(self.wz1, self.wz2), axes=([-2, -1], [0, 1]))


@dataclass(frozen=True)
class DeviceGrid:
    """Discretization of the device [0,L] x (0,lz1) x (0,lz2).

    Axial endpoints are Dirichlet nodes; the cross-section discretization
    matches the unit cell's.
    """

    n_x: int
    length: float
    n_z1: int
    n_z2: int
    lz1: float
    lz2: float
    h_x: float = field(init=False)
    h_z1: float = field(init=False)
    h_z2: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "h_x", self.length / (self.n_x - 1))
        object.__setattr__(self, "h_z1", self.lz1 / (self.n_z1 - 1))
        object.__setattr__(self, "h_z2", self.lz2 / (self.n_z2 - 1))

    @property
    def x(self) -> np.ndarray:
        return self.h_x * np.arange(self.n_x)

    @property
    def z1(self) -> np.ndarray:
        return self.h_z1 * np.arange(self.n_z1)

    @property
    def z2(self) -> np.ndarray:
        return self.h_z2 * np.arange(self.n_z2)

    @property
    def wx(self) -> np.ndarray:
        return _trapezoid_weights(self.n_x, self.h_x)

    @property
    def wz1(self) -> np.ndarray:
        return _trapezoid_weights(self.n_z1, self.h_z1)

    @property
    def wz2(self) -> np.ndarray:
        return _trapezoid_weights(self.n_z2, self.h_z2)

    def integrate_axial(self, f: np.ndarray) -> np.ndarray:
        if f.shape[-1] != self.n_x:
            raise ValueError(f"field shape {f.shape} does not match axial grid")
        return np.tensordot(f, self.wx, axes=([-1], [0]))

    def integrate_cross_section(self, f: np.ndarray) -> np.ndarray:
        if f.shape[-2:] != (self.n_z1, self.n_z2):
            raise ValueError(f"field shape {f.shape} does not match cross-section grid")
        return np.tensordot(f, np.outer(self.wz1, self.wz2), axes=([-2, -1], [0, 1]))

    def integrate_device(self, f: np.ndarray) -> float:
        if f.shape != (self.n_x, self.n_z1, self.n_z2):
            raise ValueError(f"field shape {f.shape} does not match device grid")
        w = self.wx[:, None, None] * self.wz1[None, :, None] * self.wz2[None, None, :]
        return float(np.sum(w * f))


@dataclass(frozen=True)
class MomentumGrid:
    """Uniform momentum grid symmetric about 0 on [-p_max, p_max]."""

    n_p: int
    p_max: float
    h_p: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "h_p", 2.0 * self.p_max / (self.n_p - 1))

    @property
    def p(self) -> np.ndarray:
        # built from integer offsets so p[i] == -p[n-1-i] bitwise
        k = np.arange(self.n_p) - (self.n_p - 1) / 2.0
        return k * self.h_p

    @property
    def w(self) -> np.ndarray:
        return _trapezoid_weights(self.n_p, self.h_p)

    def integrate(self, f: np.ndarray, axis: int = -1) -> np.ndarray:
        """Momentum quadrature with symmetric pairing (odd integrands give 0)."""
        f = np.asarray(f)
        w_shape = [1] * f.ndim
        w_shape[axis] = self.n_p
        return paired_sum(f * self.w.reshape(w_shape), axis=axis)


def build_grids(config: GridConfig) -> tuple[UnitCellGrid, DeviceGrid, MomentumGrid]:
    """Validate a grid configuration and construct all three grids."""
    for name, n in (("n_y", config.n_y), ("n_z1", config.n_z1), ("n_z2", config.n_z2),
                    ("n_x", config.n_x), ("n_p", config.n_p)):
        if n < 3:
            raise ValueError(f"{name}={n} is below the stencil width (need >= 3)")
    for name, v in (("lz1", config.lz1), ("lz2", config.lz2),
                    ("length", config.length), ("p_max", config.p_max)):
        if v <= 0:
            raise ValueError(f"{name}={v} must be positive")
    cell = UnitCellGrid(config.n_y, config.n_z1, config.n_z2, config.lz1, config.lz2)
    device = DeviceGrid(config.n_x, config.length, config.n_z1, config.n_z2,
                        config.lz1, config.lz2)
    momentum = MomentumGrid(config.n_p, config.p_max)
    return cell, device, momentum


def _gradient_axes(f: np.ndarray, spacings: tuple[float, ...]) -> list[np.ndarray]:
    # centered differences inside, one-sided at the ends
    return [np.gradient(f, h, axis=i) for i, h in enumerate(spacings)]


def discrete_norms(f: np.ndarray, grid, which: str) -> float:
    """Quadrature-based norm of a nodal field.

    1d fields live on the axial grid of a DeviceGrid; 3d fields on the full
    device grid.  ``which`` is one of L1, L2, H1, LinfXL2z.
    """
    f = np.asarray(f, dtype=float)
    if isinstance(grid, DeviceGrid):
        if f.ndim == 1:
            if f.shape != (grid.n_x,):
                raise ValueError(f"field shape {f.shape} does not match axial grid")
            w = grid.wx
            spacings = (grid.h_x,)
        elif f.ndim == 3:
            if f.shape != (grid.n_x, grid.n_z1, grid.n_z2):
                raise ValueError(f"field shape {f.shape} does not match device grid")
            w = (grid.wx[:, None, None] * grid.wz1[None, :, None]
                 * grid.wz2[None, None, :])
            spacings = (grid.h_x, grid.h_z1, grid.h_z2)
        else:
            raise ValueError(f"unsupported field rank {f.ndim}")
    elif isinstance(grid, UnitCellGrid):
        if f.shape != (grid.n_y, grid.n_z1, grid.n_z2):
            raise ValueError(f"field shape {f.shape} does not match unit cell grid")
        w = grid.wy[:, None, None] * grid.wz1[None, :, None] * grid.wz2[None, None, :]
        spacings = (grid.h_y, grid.h_z1, grid.h_z2)
    else:
        raise TypeError(f"unsupported grid type {type(grid).__name__}")

    if which == "L1":
        return float(np.sum(w * np.abs(f)))
    if which == "L2":
        return float(np.sqrt(np.sum(w * f * f)))
    if which == "H1":
        grad = _gradient_axes(f, spacings)
        val = np.sum(w * f * f) + sum(np.sum(w * g * g) for g in grad)
        return float(np.sqrt(val))
    if which == "LinfXL2z":
        if f.ndim != 3 or not isinstance(grid, DeviceGrid):
            raise ValueError("LinfXL2z requires a 3d device field")
        wz = grid.wz1[:, None] * grid.wz2[None, :]
        slab = np.sqrt(np.sum(wz[None] * f * f, axis=(1, 2)))
        return float(slab.max())
    raise ValueError(f"unknown norm {which!r}")
