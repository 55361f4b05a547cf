"""Pseudospectral integration of the 2D vorticity equation.

    d(omega)/dt + (u . grad) omega = nu * lap(omega) + forcing

Time stepping is integrating-factor RK4: the viscous term is integrated
exactly through ``exp(-nu k^2 dt)`` and the advection + forcing terms by
classical RK4 in the transformed variable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .field import (
    Grid2D,
    ScalarField2D,
    Trajectory,
    _velocity_hat,
    _derivative_factor,
    dealias_mask,
)
from .storage import file_checksum, save_trajectory

__all__ = [
    "ForcingSpec",
    "SolverConfig",
    "InitialConditionSpec",
    "SolverBlowUp",
    "kolmogorov_source",
    "sample_initial_vorticity",
    "rhs",
    "step",
    "simulate",
    "generate_dataset",
    "cfl_number",
    "config_hash",
    "load_manifest",
]

log = logging.getLogger(__name__)


class SolverBlowUp(RuntimeError):
    def __init__(self, message: str, step: int, time: float):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass(frozen=True)
class ForcingSpec:
    kind: str = "none"
    amplitude: float = 4.0
    wavenumber: int = 4
    interpretation: str = "vorticity_source"

    def __post_init__(self):
        if self.kind not in ("none", "kolmogorov"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if self.interpretation not in ("vorticity_source", "velocity_curl"):
            raise ValueError(f"unknown forcing interpretation {self.interpretation!r}")
        if not math.isfinite(self.amplitude):
            raise ValueError("forcing amplitude must be finite")
        if self.wavenumber < 1:
            raise ValueError("forcing wavenumber must be positive")


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    dt: float
    t_end: float
    save_every: int = 1
    dealias: bool = True
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    # integrated before the first saved frame; 0 keeps frame 0 == ic
    t_spinup: float = 0.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be non-negative, got {self.t_end}")
        if self.save_every < 1:
            raise ValueError("save_every must be a positive integer")
        if self.t_spinup < 0:
            raise ValueError(f"t_spinup must be non-negative, got {self.t_spinup}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        d["forcing"] = ForcingSpec(**d.get("forcing", {}))
        return cls(**d)


@dataclass(frozen=True)
class InitialConditionSpec:
    kind: str = "gaussian_random_field"
    k0: float = 4.0
    rms_vorticity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_random_field", "analytic_taylor_green", "zero"):
            raise ValueError(f"unknown initial condition kind {self.kind!r}")
        if not self.k0 > 0:
            raise ValueError("k0 must be positive")
        if not self.rms_vorticity > 0:
            raise ValueError("rms_vorticity must be positive")


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def kolmogorov_source(grid: Grid2D, spec: ForcingSpec) -> ScalarField2D:
    if spec.kind != "kolmogorov":
        raise ValueError(f"kolmogorov_source needs kind='kolmogorov', got {spec.kind!r}")
    if spec.wavenumber > min(grid.nx, grid.ny) / 3:
        raise ValueError(
            f"forcing wavenumber {spec.wavenumber} does not survive dealiasing on "
            f"{grid.nx}x{grid.ny}"
        )
    _, Y = grid.coords()
    k = spec.wavenumber
    if spec.interpretation == "vorticity_source":
        values = spec.amplitude * np.cos(k * Y)
    else:
        # curl of the body force (A cos(k y), 0) is -d/dy(A cos(k y))
        values = spec.amplitude * k * np.sin(k * Y)
    return ScalarField2D(grid, values)


def _forcing_hat(grid: Grid2D, spec: ForcingSpec) -> np.ndarray:
    if spec.kind == "none":
        return np.zeros(grid.shape, dtype=complex)
    return np.fft.fft2(kolmogorov_source(grid, spec).values)


def sample_initial_vorticity(grid: Grid2D, spec: InitialConditionSpec) -> ScalarField2D:
    if spec.kind == "zero":
        return ScalarField2D.zeros(grid)
    if spec.kind == "analytic_taylor_green":
        return ScalarField2D.from_function(grid, lambda x, y: 2.0 * np.sin(x) * np.sin(y))
    if spec.k0 >= min(grid.nx, grid.ny) / 3:
        raise ValueError(
            f"peak wavenumber k0={spec.k0} lies outside the dealiased band of "
            f"{grid.nx}x{grid.ny}"
        )
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    mx, my = grid.mode_indices()
    k = np.sqrt(mx**2 + my**2)
    envelope = k * np.exp(-0.5 * (k / spec.k0) ** 2)
    coeffs = noise * envelope * dealias_mask(grid)
    coeffs[0, 0] = 0.0
    # taking the real part is the conjugate symmetrization (c(k) + conj c(-k))/2
    values = np.fft.ifft2(coeffs).real
    values -= values.mean()
    values *= spec.rms_vorticity / np.sqrt(np.mean(values**2))
    return ScalarField2D(grid, values)


class _Integrator:
    """Precomputed spectral operators for one (grid, config) pair."""

    def __init__(self, grid: Grid2D, cfg: SolverConfig):
        self.grid = grid
        self.cfg = cfg
        kx, ky = grid.wavenumbers()
        self.k2 = kx**2 + ky**2
        self.dx = _derivative_factor(grid, "x", 1)
        self.dy = _derivative_factor(grid, "y", 1)
        self.mask = dealias_mask(grid) if cfg.dealias else None
        self.f_hat = _forcing_hat(grid, cfg.forcing)
        self.E = np.exp(-cfg.nu * self.k2 * cfg.dt)
        self.E2 = np.exp(-cfg.nu * self.k2 * cfg.dt / 2)

    def velocity(self, w_hat):
        u_hat, v_hat = _velocity_hat(self.grid, w_hat)
        return np.fft.ifft2(u_hat).real, np.fft.ifft2(v_hat).real

    def nonlinear(self, w_hat):
        u, v = self.velocity(w_hat)
        wx = np.fft.ifft2(self.dx * w_hat).real
        wy = np.fft.ifft2(self.dy * w_hat).real
        adv_hat = np.fft.fft2(u * wx + v * wy)
        if self.mask is not None:
            adv_hat = adv_hat * self.mask
        return -adv_hat + self.f_hat

    def rhs_hat(self, w_hat):
        return self.nonlinear(w_hat) - self.cfg.nu * self.k2 * w_hat

    def step(self, w_hat):
        dt, E, E2, N = self.cfg.dt, self.E, self.E2, self.nonlinear
        a = dt * N(w_hat)
        b = dt * N(E2 * (w_hat + a / 2))
        c = dt * N(E2 * w_hat + b / 2)
        d = dt * N(E * w_hat + E2 * c)
        return E * w_hat + (E * a + 2 * E2 * (b + c) + d) / 6

    def cfl(self, w_hat) -> float:
        u, v = self.velocity(w_hat)
        vmax = max(float(np.abs(u).max()), float(np.abs(v).max()))
        return self.cfg.dt * vmax / min(self.grid.hx, self.grid.hy)


def cfl_number(omega: ScalarField2D, cfg: SolverConfig) -> float:
    """Advective Courant number ``dt * max|u| / min(h)``; stable below 0.5."""
    return _Integrator(omega.grid, cfg).cfl(np.fft.fft2(omega.values))


def rhs(omega: ScalarField2D, cfg: SolverConfig) -> ScalarField2D:
    integ = _Integrator(omega.grid, cfg)
    w_hat = np.fft.fft2(omega.values)
    if integ.cfl(w_hat) > 0.5:
        log.warning("CFL bound exceeded for dt=%g", cfg.dt)
    return ScalarField2D(omega.grid, np.fft.ifft2(integ.rhs_hat(w_hat)).real)


def step(omega: ScalarField2D, cfg: SolverConfig) -> ScalarField2D:
    integ = _Integrator(omega.grid, cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.fft.ifft2(integ.step(np.fft.fft2(omega.values))).real
    if not np.all(np.isfinite(out)):
        raise SolverBlowUp("solver blow-up at step 1", step=1, time=cfg.dt)
    return ScalarField2D(omega.grid, out)


def simulate(ic: ScalarField2D, cfg: SolverConfig, meta: dict | None = None) -> Trajectory:
    """Integrate from ``ic`` to ``cfg.t_end`` saving every ``save_every`` steps."""
    integ = _Integrator(ic.grid, cfg)
    w_hat = np.fft.fft2(ic.values)
    n_spin = int(round(cfg.t_spinup / cfg.dt))

    def advance(w, n, t):
        with np.errstate(over="ignore", invalid="ignore"):
            w = integ.step(w)
        if not np.isfinite(w).all():
            raise SolverBlowUp(f"solver blow-up at step {n} (t={t:.6g})", step=n, time=t)
        return w

    for n in range(1, n_spin + 1):
        w_hat = advance(w_hat, n, (n - n_spin) * cfg.dt)
    first = np.fft.ifft2(w_hat).real if n_spin else np.array(ic.values, dtype=np.float64)
    frames = [first]
    cfl_violations = 0
    for n in range(1, cfg.n_steps + 1):
        w_hat = advance(w_hat, n, n * cfg.dt)
        if n % cfg.save_every == 0:
            if integ.cfl(w_hat) > 0.5:
                cfl_violations += 1
            frames.append(np.fft.ifft2(w_hat).real)
    if cfl_violations:
        log.warning("%d saved frames exceeded the CFL bound", cfl_violations)
    info = {
        "nu": cfg.nu,
        "solver_dt": cfg.dt,
        "save_every": cfg.save_every,
        "t_spinup": cfg.t_spinup,
        "dealias": cfg.dealias,
        "forcing": asdict(cfg.forcing),
        "cfl_violations": cfl_violations,
    }
    info.update(meta or {})
    return Trajectory(ic.grid, cfg.dt * cfg.save_every, np.stack(frames), info)


def _generate_one(args):
    i, grid, cfg, ic_spec, out_dir, run_hash = args
    spec = InitialConditionSpec(ic_spec.kind, ic_spec.k0, ic_spec.rms_vorticity, ic_spec.seed + i)
    path = Path(out_dir) / f"traj_{i:05d}.dinotrj"
    meta = {"seed": spec.seed, "ic": asdict(spec), "index": i, "config_hash": run_hash}
    try:
        traj = simulate(sample_initial_vorticity(grid, spec), cfg, meta)
    except SolverBlowUp as exc:
        return {"index": i, "seed": spec.seed, "status": "failed", "error": str(exc)}
    save_trajectory(traj, path)
    return {
        "index": i,
        "seed": spec.seed,
        "status": "ok",
        "file": path.name,
        "checksum": file_checksum(path),
        "frames": len(traj),
    }


def generate_dataset(
    n_traj: int,
    cfg: SolverConfig,
    ic_spec: InitialConditionSpec,
    out_dir,
    grid: Grid2D,
    workers: int | None = None,
    extra: dict | None = None,
) -> dict:
    """Simulate ``n_traj`` trajectories with seeds ``ic_spec.seed + i``.

    Writes one ``.dinotrj`` file per successful trajectory and ``manifest.json``.
    Failed trajectories stay in the manifest with ``status == "failed"``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    if workers is None:
        workers = int(os.environ.get("DINO_THREADS", "1"))
    config = {"grid": grid.to_dict(), "solver": cfg.to_dict(), "ic": asdict(ic_spec)}
    run_hash = (extra or {}).get("run_hash", config_hash(config))
    jobs = [(i, grid, cfg, ic_spec, out_dir, run_hash) for i in range(n_traj)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_generate_one, jobs))
    else:
        entries = [_generate_one(job) for job in jobs]
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "files": [e.get("file") for e in entries],
        "seeds": [e["seed"] for e in entries],
        "checksums": [e.get("checksum") for e in entries],
        "status": [e["status"] for e in entries],
        "errors": {str(e["index"]): e["error"] for e in entries if e["status"] == "failed"},
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(path) -> tuple[dict, list[Trajectory]]:
    """Read a dataset manifest and every successful trajectory it lists."""
    from .storage import load_trajectory

    path = Path(path)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        files, statuses = manifest["files"], manifest["status"]
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt dataset manifest {path}: {exc}") from exc
    root = path.parent
    trajs = []
    for name, status in zip(files, statuses):
        if status != "ok":
            continue
        trajs.append(load_trajectory(root / name))
    return manifest, trajs
