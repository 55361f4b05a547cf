"""Periodic-grid fields, Fourier utilities and Biot-Savart velocity recovery.

FFT convention: the forward transform is unnormalized (``numpy.fft.fft2``)
and the inverse carries the ``1/(nx*ny)`` factor. With this convention

    sum(|f|**2) == sum(|f_hat|**2) / (nx*ny)

and therefore ``sum(|f|**2) * hx * hy == lx * ly * sum(|f_hat|**2) / (nx*ny)**2``.

Coefficient arrays are stored in numpy FFT order: index ``i`` along axis 0
holds integer wavenumber ``fftfreq(nx, 1/nx)[i]`` in ``[-nx/2, nx/2)``.
Array axis 0 is x, axis 1 is y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "Grid2D",
    "ScalarField2D",
    "SpectralField2D",
    "VelocityField2D",
    "Trajectory",
    "FieldError",
    "fft_forward",
    "fft_inverse",
    "spectral_derivative",
    "laplacian",
    "dealias_two_thirds",
    "dealias_mask",
    "velocity_from_vorticity",
    "curl",
    "divergence_spectral",
]

TWO_PI = 2.0 * np.pi
SYMMETRY_TOL = 1e-8


class FieldError(ValueError):
    """Raised for malformed fields or inconsistent grids."""


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = TWO_PI
    ly: float = TWO_PI

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise FieldError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.nx % 2 or self.ny % 2:
            raise FieldError(f"grid sizes must be even, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise FieldError(f"domain lengths must be positive, got {self.lx}, {self.ly}")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid ``(X, Y)`` with ``X[i, j] = i*hx`` and ``Y[i, j] = j*hy``."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def mode_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer wavenumber indices broadcastable to the coefficient shape."""
        mx = np.fft.fftfreq(self.nx, 1.0 / self.nx)
        my = np.fft.fftfreq(self.ny, 1.0 / self.ny)
        return mx[:, None], my[None, :]

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical wavenumbers ``2*pi*m/L``, broadcastable to ``(nx, ny)``."""
        mx, my = self.mode_indices()
        return mx * (TWO_PI / self.lx), my * (TWO_PI / self.ly)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "lx": self.lx, "ly": self.ly}


@dataclass
class ScalarField2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.shape:
            raise FieldError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FieldError("field contains non-finite values")

    @classmethod
    def from_function(cls, grid: Grid2D, fn) -> "ScalarField2D":
        X, Y = grid.coords()
        return cls(grid, np.asarray(fn(X, Y), dtype=np.float64) + np.zeros(grid.shape))

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField2D":
        return cls(grid, np.zeros(grid.shape))

    def mean(self) -> float:
        return float(self.values.mean())

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.values**2)))


@dataclass
class SpectralField2D:
    grid: Grid2D
    coeffs: np.ndarray

    def coeff(self, kx: int, ky: int) -> complex:
        """Coefficient at integer wavevector ``(kx, ky)``."""
        return complex(self.coeffs[kx % self.grid.nx, ky % self.grid.ny])

    def symmetry_violation(self) -> tuple[float, tuple[int, int]]:
        """Largest ``|c(k) - conj(c(-k))|`` relative to ``max|c|``, and its mode."""
        c = self.coeffs
        mirrored = np.conj(np.roll(np.flip(c, axis=(0, 1)), shift=(1, 1), axis=(0, 1)))
        diff = np.abs(c - mirrored)
        scale = max(float(np.abs(c).max()), np.finfo(float).tiny)
        i, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
        mx, my = self.grid.mode_indices()
        return float(diff[i, j]) / scale, (int(mx[i, 0]), int(my[0, j]))


@dataclass
class VelocityField2D:
    grid: Grid2D
    u: np.ndarray
    v: np.ndarray


@dataclass
class Trajectory:
    """Fixed-cadence sequence of fields; ``frames`` has shape ``(T, nx, ny)``."""

    grid: Grid2D
    dt: float
    frames: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.grid.shape:
            raise FieldError(
                f"frames shape {self.frames.shape} incompatible with grid {self.grid.shape}"
            )
        if len(self.frames) < 1:
            raise FieldError("trajectory needs at least one frame")
        if not self.dt > 0:
            raise FieldError(f"dt must be positive, got {self.dt}")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> ScalarField2D:
        return ScalarField2D(self.grid, self.frames[index])

    @property
    def last(self) -> ScalarField2D:
        return self.frame(-1)


def fft_forward(field: ScalarField2D) -> SpectralField2D:
    values = np.asarray(field.values)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise FieldError(f"non-finite input at grid index {tuple(int(b) for b in bad)}")
    return SpectralField2D(field.grid, np.fft.fft2(values))


def fft_inverse(spec: SpectralField2D) -> ScalarField2D:
    violation, mode = spec.symmetry_violation()
    if violation > SYMMETRY_TOL:
        raise FieldError(
            f"coefficients are not conjugate-symmetric: relative violation "
            f"{violation:.3e} at mode {mode}"
        )
    return ScalarField2D(spec.grid, np.fft.ifft2(spec.coeffs).real)


def _derivative_factor(grid: Grid2D, axis: str, order: int) -> np.ndarray:
    if order < 1:
        raise ValueError(f"derivative order must be >= 1, got {order}")
    kx, ky = grid.wavenumbers()
    if axis == "x":
        k, n, nyq_pos = kx, grid.nx, 0
    elif axis == "y":
        k, n, nyq_pos = ky, grid.ny, 1
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    factor = (1j * k) ** order
    if order % 2:
        # the i*k factor at -n/2 has no consistent sign for a real field
        factor = factor.copy()
        idx = [slice(None), slice(None)]
        idx[nyq_pos] = n // 2
        factor[tuple(idx)] = 0.0
    return factor


def spectral_derivative(spec: SpectralField2D, axis: str, order: int = 1) -> SpectralField2D:
    """Multiply coefficients by ``(i*k_axis)**order``; odd orders drop the Nyquist mode."""
    return SpectralField2D(spec.grid, spec.coeffs * _derivative_factor(spec.grid, axis, order))


def laplacian(spec: SpectralField2D) -> SpectralField2D:
    kx, ky = spec.grid.wavenumbers()
    return SpectralField2D(spec.grid, -(kx**2 + ky**2) * spec.coeffs)


def dealias_mask(grid: Grid2D) -> np.ndarray:
    mx, my = grid.mode_indices()
    return (np.abs(mx) <= grid.nx / 3) & (np.abs(my) <= grid.ny / 3)


def dealias_two_thirds(spec: SpectralField2D) -> SpectralField2D:
    """Zero every mode with ``|kx| > nx/3`` or ``|ky| > ny/3``."""
    return SpectralField2D(spec.grid, np.where(dealias_mask(spec.grid), spec.coeffs, 0.0))


def _velocity_hat(grid: Grid2D, omega_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kx, ky = grid.wavenumbers()
    k2 = kx**2 + ky**2
    k2[0, 0] = 1.0
    psi_hat = omega_hat / k2
    psi_hat[0, 0] = 0.0
    u_hat = _derivative_factor(grid, "y", 1) * psi_hat
    v_hat = -_derivative_factor(grid, "x", 1) * psi_hat
    return u_hat, v_hat


def velocity_from_vorticity(omega: ScalarField2D) -> VelocityField2D:
    """Solve ``lap(psi) = -omega`` and return ``(u, v) = (psi_y, -psi_x)``.

    The mean mode of ``psi`` is fixed to zero, so the returned flow has no
    mean velocity and its curl reproduces ``omega - mean(omega)`` (modes in
    the Nyquist row/column are lost with the odd-derivative convention).
    """
    grid = omega.grid
    u_hat, v_hat = _velocity_hat(grid, np.fft.fft2(omega.values))
    return VelocityField2D(grid, np.fft.ifft2(u_hat).real, np.fft.ifft2(v_hat).real)


def curl(vel: VelocityField2D) -> ScalarField2D:
    """Scalar vorticity ``v_x - u_y``."""
    grid = vel.grid
    v_x = np.fft.ifft2(_derivative_factor(grid, "x", 1) * np.fft.fft2(vel.v)).real
    u_y = np.fft.ifft2(_derivative_factor(grid, "y", 1) * np.fft.fft2(vel.u)).real
    return ScalarField2D(grid, v_x - u_y)


def divergence_spectral(vel: VelocityField2D) -> np.ndarray:
    """Per-mode ``i*kx*u_hat + i*ky*v_hat`` (complex array)."""
    grid = vel.grid
    return (
        _derivative_factor(grid, "x", 1) * np.fft.fft2(vel.u)
        + _derivative_factor(grid, "y", 1) * np.fft.fft2(vel.v)
    )
