"""Forecast metrics, enstrophy spectra and Jacobian stability probes.

The stability probes only need Jacobian products, obtained from the
autodiff engine: ``jvp`` for ``J v`` and ``vjp`` for ``J^T w``. Each probe
accepts either a model (and builds the relevant map from it) or an explicit
stand-in callable, which is how the estimators are calibrated on linear maps
with known answers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigs, eigsh

from .autodiff import Tensor, jvp, no_grad, vjp
from .field import ScalarField2D, Trajectory

__all__ = [
    "SpectrumCurve",
    "MetricSeries",
    "StabilityReport",
    "relative_l2",
    "correlation_series",
    "high_correlation_time",
    "enstrophy_spectrum",
    "spectrum_slope",
    "operator_norm",
    "rayleigh_extremes",
    "spectral_radius",
    "estimate_int_operator_norm",
    "estimate_diff_dissipativity",
    "estimate_spectral_radius",
    "stability_report",
]

MapFn = Callable[[Tensor], Tensor]


# --- forecast metrics ----------------------------------------------------

def _values(f) -> np.ndarray:
    return np.asarray(f.values if isinstance(f, ScalarField2D) else f, dtype=np.float64)


def relative_l2(pred, truth) -> float:
    """``||pred - truth||_2 / ||truth||_2`` over all grid points."""
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    norm = np.linalg.norm(t)
    if norm == 0.0:
        raise ValueError("relative L2 error is undefined for an all-zero reference field")
    return float(np.linalg.norm(p - t) / norm)


@dataclass
class MetricSeries:
    rel_l2: np.ndarray
    corr: np.ndarray

    def __len__(self) -> int:
        return len(self.corr)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0.0:
        return math.nan
    return float(np.clip(np.dot(a.ravel(), b.ravel()) / den, -1.0, 1.0))


def correlation_series(rollout: Trajectory, truth: Trajectory) -> MetricSeries:
    """Per-step Pearson correlation and relative L2; NaN marks undefined steps."""
    if len(rollout) != len(truth) or rollout.grid.shape != truth.grid.shape:
        raise ValueError("rollout and truth must have equal lengths and grids")
    rel, corr = [], []
    for p, t in zip(rollout.frames, truth.frames):
        corr.append(_pearson(np.asarray(p, float), np.asarray(t, float)))
        norm = np.linalg.norm(t)
        rel.append(float(np.linalg.norm(p - t) / norm) if norm > 0 else math.nan)
    return MetricSeries(np.array(rel), np.array(corr))


def high_correlation_time(series: MetricSeries, threshold: float = 0.8) -> int:
    """First step whose correlation is below ``threshold`` (undefined counts as below)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    for i, c in enumerate(series.corr):
        if not (c >= threshold):
            return i
    return len(series.corr)


# --- spectra -------------------------------------------------------------

@dataclass
class SpectrumCurve:
    shells: np.ndarray
    enstrophy: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.enstrophy.sum() + self.meta.get("mean_mode", 0.0) + self.meta.get("outside", 0.0))


def enstrophy_spectrum(omega) -> SpectrumCurve:
    """Shell sums of ``|w_hat|^2 / (nx*ny)^2`` over ``round(|k|) = 1 .. min(n)/2 - 1``.

    With this normalization the shells, the mean mode and the corner modes
    beyond ``k_max`` add up to ``mean(omega**2)``.
    """
    w = _values(omega)
    nx, ny = w.shape
    power = np.abs(np.fft.fft2(w)) ** 2 / float(nx * ny) ** 2
    mx = np.fft.fftfreq(nx, 1.0 / nx)[:, None]
    my = np.fft.fftfreq(ny, 1.0 / ny)[None, :]
    shell = np.rint(np.sqrt(mx**2 + my**2)).astype(int)
    k_max = min(nx, ny) // 2 - 1
    sums = np.bincount(shell.ravel(), weights=power.ravel())
    sums = np.pad(sums, (0, max(0, k_max + 1 - len(sums))))
    ens = sums[1 : k_max + 1]
    meta = {
        "normalization": "sum over shell of |w_hat|^2/(nx*ny)^2",
        "binning": "round(|k|)",
        "mean_mode": float(sums[0]),
        "outside": float(sums[k_max + 1 :].sum()),
    }
    curve = SpectrumCurve(np.arange(1, k_max + 1), ens, meta)
    parseval = float(np.mean(w**2))
    if not math.isclose(curve.total, parseval, rel_tol=1e-10, abs_tol=1e-300):
        raise AssertionError(f"spectrum total {curve.total} violates Parseval ({parseval})")
    return curve


def spectrum_slope(curve: SpectrumCurve, k_range: tuple[float, float]) -> float:
    """Least-squares slope of ``log E`` against ``log k`` over ``k_lo <= k <= k_hi``."""
    lo, hi = k_range
    sel = (curve.shells >= lo) & (curve.shells <= hi) & (curve.enstrophy > 0)
    if sel.sum() < 3:
        raise ValueError(f"need at least 3 positive shells in {k_range}, found {int(sel.sum())}")
    return float(np.polyfit(np.log(curve.shells[sel]), np.log(curve.enstrophy[sel]), 1)[0])


# --- Jacobian probes -----------------------------------------------------

@dataclass
class ProbeResult:
    value: float
    residual: float
    iterations: int
    converged: bool
    method: str


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v)


def operator_norm(fn: MapFn, x: np.ndarray, iters: int = 50, tol: float = 1e-8, seed: int = 0) -> ProbeResult:
    """Largest singular value of ``J_fn(x)`` by power iteration on ``J^T J``.

    ``residual`` is ``||J^T J v - s^2 v|| / s^2`` at the final iterate. When the
    power iteration has not reached ``tol``, Lanczos (ARPACK) on the same
    matrix-free operator refines the estimate.
    """
    if iters < 1:
        raise ValueError("iters must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = _unit(rng, x.shape)

    def gram(vec):
        return vjp(fn, x, jvp(fn, x, vec))

    lam, res, it = 0.0, math.inf, 0
    for it in range(1, iters + 1):
        w = gram(v)
        lam = float(np.vdot(v, w))
        res = float(np.linalg.norm(w - lam * v) / max(abs(lam), 1e-300))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return ProbeResult(0.0, 0.0, it, True, "power")
        v = w / nw
        if res < tol:
            return ProbeResult(math.sqrt(max(lam, 0.0)), res, it, True, "power")
    n = x.size
    if n > 2:
        op = LinearOperator((n, n), matvec=lambda q: gram(q.reshape(x.shape)).ravel(), dtype=np.float64)
        try:
            vals, vecs = eigsh(op, k=1, which="LA", v0=v.ravel(), tol=tol, maxiter=max(10 * iters, 300))
            q = vecs[:, 0].reshape(x.shape)
            lam = float(vals[0])
            res = float(np.linalg.norm(gram(q) - lam * q) / max(abs(lam), 1e-300))
            return ProbeResult(math.sqrt(max(lam, 0.0)), res, iters, res < 1e-3, "lanczos")
        except ArpackNoConvergence:
            pass
    return ProbeResult(math.sqrt(max(lam, 0.0)), res, iters, res < 1e-3, "power")


@dataclass
class RayleighResult:
    min: float
    max: float
    sampled_min: float
    sampled_max: float
    high_freq_min: float
    high_freq_max: float
    n_samples: int
    n_high_freq: int
    residual: float


def _fourier_directions(shape, n: int, rng) -> list[np.ndarray]:
    """Unit cosine modes in the upper half of the resolved band, random channel."""
    H, W = shape[-2:]
    X, Y = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    out = []
    lo = max(H, W) // 4
    for _ in range(n):
        while True:
            kx = int(rng.integers(-(H // 2) + 1, H // 2)) if H > 2 else 0
            ky = int(rng.integers(-(W // 2) + 1, W // 2)) if W > 2 else 0
            if math.hypot(kx, ky) >= lo:
                break
        phase = rng.uniform(0, 2 * np.pi)
        v = np.zeros(shape)
        lead = tuple(int(rng.integers(0, s)) for s in shape[:-2])
        v[lead] = np.cos(2 * np.pi * (kx * X + ky * Y) + phase)
        out.append(v / np.linalg.norm(v))
    return out


def rayleigh_extremes(
    fn: MapFn, x: np.ndarray, n_samples: int = 100, high_freq_fraction: float = 0.25,
    refine: bool = True, seed: int = 0,
) -> RayleighResult:
    """Extremes of ``v^T J v`` over unit ``v`` for ``J = J_fn(x)``.

    Random Gaussian directions plus a designated subset of high-frequency
    Fourier modes are sampled. Sampling alone underestimates the range, so
    with ``refine`` the extremes of the symmetric part ``(J + J^T) / 2`` are
    also found by Lanczos; the reported min/max cover both.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n_hf = int(round(n_samples * high_freq_fraction)) if x.ndim >= 2 else 0
    dirs = [_unit(rng, x.shape) for _ in range(n_samples - n_hf)]
    hf_dirs = _fourier_directions(x.shape, n_hf, rng) if n_hf else []
    vals = [float(np.vdot(v, jvp(fn, x, v))) for v in dirs]
    hf_vals = [float(np.vdot(v, jvp(fn, x, v))) for v in hf_dirs]
    allv = vals + hf_vals
    lo, hi = min(allv), max(allv)
    residual = 0.0
    n = x.size
    if refine:
        def sym(q):
            q = q.reshape(x.shape)
            return (0.5 * (jvp(fn, x, q) + vjp(fn, x, q))).ravel()

        if n <= 64:
            S = np.stack([sym(e) for e in np.eye(n)], axis=1)
            ev = np.linalg.eigvalsh(0.5 * (S + S.T))
            lo, hi = min(lo, float(ev[0])), max(hi, float(ev[-1]))
        else:
            op = LinearOperator((n, n), matvec=sym, dtype=np.float64)
            residuals = []
            for which in ("SA", "LA"):
                try:
                    ev, vec = eigsh(op, k=1, which=which, tol=1e-8, maxiter=3000)
                except ArpackNoConvergence as exc:
                    if len(exc.eigenvalues) == 0:
                        residuals.append(math.inf)
                        continue
                    ev, vec = exc.eigenvalues, exc.eigenvectors
                q = vec[:, 0]
                residuals.append(float(np.linalg.norm(sym(q) - ev[0] * q) / max(abs(ev[0]), 1e-12)))
                lo, hi = min(lo, float(ev[0])), max(hi, float(ev[0]))
            residual = max(residuals)
    return RayleighResult(
        min=lo, max=hi,
        sampled_min=min(allv), sampled_max=max(allv),
        high_freq_min=min(hf_vals) if hf_vals else math.nan,
        high_freq_max=max(hf_vals) if hf_vals else math.nan,
        n_samples=n_samples, n_high_freq=n_hf, residual=residual,
    )


def spectral_radius(fn: MapFn, x: np.ndarray, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> ProbeResult:
    """Dominant ``|lambda|`` of ``J_fn(x)``: power iteration, then Arnoldi if needed.

    Power iteration only converges when a single real eigenvalue dominates;
    for complex-pair dominated spectra the residual stays large and
    ARPACK's implicitly restarted Arnoldi (same ``jvp`` matvec) takes over.
    """
    if iters < 1:
        raise ValueError("iters must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = _unit(rng, x.shape)
    lam, res = 0.0, math.inf
    for it in range(1, iters + 1):
        w = jvp(fn, x, v)
        lam = float(np.vdot(v, w))
        res = float(np.linalg.norm(w - lam * v) / max(abs(lam), 1e-300))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return ProbeResult(0.0, 0.0, it, True, "power")
        v = w / nw
        if res < tol:
            return ProbeResult(abs(lam), res, it, True, "power")
    n = x.size
    if n > 2:
        op = LinearOperator((n, n), matvec=lambda q: jvp(fn, x, q.reshape(x.shape)).ravel(), dtype=np.float64)
        try:
            vals, vecs = eigs(op, k=1, which="LM", v0=v.ravel(), tol=tol, maxiter=max(10 * iters, 500))
        except ArpackNoConvergence as exc:
            if len(exc.eigenvalues) == 0:
                return ProbeResult(abs(lam), res, iters, False, "power")
            vals, vecs = exc.eigenvalues, exc.eigenvectors
        q = vecs[:, 0]
        Jq = jvp(fn, x, q.real.reshape(x.shape)).ravel() + 1j * jvp(fn, x, q.imag.reshape(x.shape)).ravel()
        res = float(np.linalg.norm(Jq - vals[0] * q) / max(abs(vals[0]) * np.linalg.norm(q), 1e-300))
        return ProbeResult(float(abs(vals[0])), res, iters, res < 1e-3, "arnoldi")
    # tiny systems: dense eigensolve from unit vectors
    J = np.stack([jvp(fn, x, e.reshape(x.shape)).ravel() for e in np.eye(n)], axis=1)
    return ProbeResult(float(np.abs(np.linalg.eigvals(J)).max()), 0.0, n, True, "dense")


# --- model-level probes ----------------------------------------------------

def _diag_model(model):
    return model.to_dtype(np.float64) if model.dtype != np.float64 else model


def _state(u) -> np.ndarray:
    return _values(u)[None]


def estimate_int_operator_norm(model, u, iters: int = 50, branch: MapFn | None = None) -> ProbeResult:
    """``||J||_2`` of the integral branch at ``lift(u)`` (or of a stand-in ``branch``)."""
    if iters < 20:
        raise ValueError("iters must be >= 20")
    if branch is not None:
        return operator_norm(branch, np.asarray(u, dtype=np.float64), iters)
    m = _diag_model(model)
    with no_grad():
        x = m.lift(Tensor(_state(u))).data
    return operator_norm(m.integral, x, iters)


def estimate_diff_dissipativity(model, u, n_samples: int = 100, branch: MapFn | None = None) -> RayleighResult:
    """Rayleigh quotients of the differential branch Jacobian at its actual input."""
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    if branch is not None:
        return rayleigh_extremes(branch, np.asarray(u, dtype=np.float64), n_samples)
    m = _diag_model(model)
    with no_grad():
        x = m.integral(m.lift(Tensor(_state(u)))).data
    return rayleigh_extremes(m.differential, x, n_samples)


def estimate_spectral_radius(model, u, iters: int = 100, fn: MapFn | None = None) -> ProbeResult:
    """Spectral radius of the full one-step Jacobian at ``u``."""
    if iters < 50:
        raise ValueError("iters must be >= 50")
    if fn is not None:
        return spectral_radius(fn, np.asarray(u, dtype=np.float64), iters)
    m = _diag_model(model)
    return spectral_radius(m.apply, _state(u), iters)


@dataclass
class StabilityReport:
    sigma_int: float
    rayleigh_diff: tuple[float, float]
    rho_full: float
    residuals: dict
    iterations: dict
    samples: dict
    converged: dict
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rayleigh_diff"] = list(self.rayleigh_diff)
        return d

    def to_json(self, path=None, **extra) -> str:
        payload = {**self.to_dict(), **extra}
        text = json.dumps(payload, indent=2, sort_keys=True, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def stability_report(model, u, iters: int = 100, n_samples: int = 100) -> StabilityReport:
    """All three probes at one ground-truth state ``u``."""
    norm = estimate_int_operator_norm(model, u, max(iters, 20))
    ray = estimate_diff_dissipativity(model, u, n_samples)
    rho = estimate_spectral_radius(model, u, max(iters, 50))
    return StabilityReport(
        sigma_int=norm.value,
        rayleigh_diff=(ray.min, ray.max),
        rho_full=rho.value,
        residuals={"sigma_int": norm.residual, "rayleigh_diff": ray.residual, "rho_full": rho.residual},
        iterations={"sigma_int": norm.iterations, "rho_full": rho.iterations},
        samples={"rayleigh_diff": ray.n_samples, "high_freq": ray.n_high_freq},
        converged={"sigma_int": norm.converged, "rho_full": rho.converged},
        details={
            "sigma_int_method": norm.method,
            "rho_full_method": rho.method,
            "rayleigh_sampled": [ray.sampled_min, ray.sampled_max],
            "rayleigh_high_freq": [ray.high_freq_min, ray.high_freq_max],
        },
    )
