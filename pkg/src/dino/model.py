"""The residual operator ``G(u) = u + P(Diff(Int(L(u))))`` and its persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Parameter, Tensor, add, as_tensor, gelu, linear, no_grad, reshape, transpose
from .autodiff.optim import AdamState
from .field import Grid2D, ScalarField2D, Trajectory
from .opdiff import DiffBranchConfig, diff_branch_forward, init_diff_params
from .opint import AttentionConfig, init_int_params, int_branch_forward
from .solver import config_hash

__all__ = [
    "DinoConfig",
    "DinoModel",
    "RolloutCollapse",
    "CheckpointError",
    "forward_step",
    "rollout",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"DINOCKPT"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class RolloutCollapse(FloatingPointError):
    """A rollout produced a non-finite frame; ``partial`` holds the finite prefix."""

    def __init__(self, message: str, last_finite_step: int, partial: Trajectory):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.partial = partial


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DinoConfig:
    grid: Grid2D
    lift_channels: int = 16
    diff: DiffBranchConfig = field(default_factory=DiffBranchConfig)
    attn: AttentionConfig = field(default_factory=AttentionConfig)
    derivative_scale_h: float | None = None
    dtype: str = "float32"
    seed: int = 42

    def __post_init__(self):
        if self.diff.channels != self.lift_channels:
            raise ValueError(
                f"diff branch width {self.diff.channels} must equal lift_channels "
                f"{self.lift_channels}"
            )
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.grid.nx % self.attn.patch or self.grid.ny % self.attn.patch:
            raise ValueError(f"patch {self.attn.patch} does not divide the grid")

    @property
    def h(self) -> float:
        return self.grid.hx if self.derivative_scale_h is None else self.derivative_scale_h

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "lift_channels": self.lift_channels,
            "diff": self.diff.to_dict(),
            "attn": self.attn.to_dict(),
            "derivative_scale_h": self.derivative_scale_h,
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DinoConfig":
        return cls(
            grid=Grid2D(**d["grid"]),
            lift_channels=d["lift_channels"],
            diff=DiffBranchConfig(**d["diff"]),
            attn=AttentionConfig(**d["attn"]),
            derivative_scale_h=d.get("derivative_scale_h"),
            dtype=d.get("dtype", "float32"),
            seed=d.get("seed", 42),
        )

    def hash(self) -> str:
        return config_hash(self.to_dict())


class DinoModel:
    """Parameter bundle plus the forward map.

    The last projection layer starts at zero, so a fresh model is exactly
    the identity operator (the persistence forecast).
    """

    def __init__(self, config: DinoConfig, params: dict[str, Parameter] | None = None):
        self.config = config
        self.dtype = _DTYPES[config.dtype].newbyteorder("=")
        self.params = params if params is not None else self._init_params()
        self.step = 0
        self.metrics: dict = {}
        self.optimizer_state: AdamState | None = None

    def _init_params(self) -> dict[str, Parameter]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        c = cfg.lift_channels
        dt = self.dtype
        params = {
            "lift.w": Parameter(rng.normal(0.0, 1.0, size=(1, c)), "lift.w", dtype=dt),
            "lift.b": Parameter(rng.normal(0.0, 0.1, size=(c,)), "lift.b", dtype=dt),
        }
        params.update(init_int_params(cfg.attn, c, cfg.grid.shape, rng, dtype=dt))
        params.update(init_diff_params(cfg.diff, rng, cfg.h, dtype=dt))
        params.update({
            "proj.w1": Parameter(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c)), "proj.w1", dtype=dt),
            "proj.b1": Parameter(np.zeros(c), "proj.b1", dtype=dt),
            "proj.w2": Parameter(np.zeros((c, 1)), "proj.w2", dtype=dt),
            "proj.b2": Parameter(np.zeros(1), "proj.b2", dtype=dt),
        })
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def to_dtype(self, dtype) -> "DinoModel":
        """Copy of the model with parameters cast to ``dtype``."""
        name = np.dtype(dtype).name
        cfg = replace(self.config, dtype=name)
        params = {k: Parameter(p.data.astype(dtype), k) for k, p in self.params.items()}
        return DinoModel(cfg, params)

    # --- stages, all on batched tensors ---------------------------------
    def lift(self, u: Tensor) -> Tensor:
        """``(B, H, W) -> (B, C, H, W)``: pointwise 1 -> C map and gelu."""
        u = as_tensor(u)
        B, H, W = u.shape
        z = gelu(linear(reshape(u, (B, H, W, 1)), self.params["lift.w"], self.params["lift.b"]))
        return transpose(z, (0, 3, 1, 2))

    def integral(self, z: Tensor) -> Tensor:
        return int_branch_forward(z, self.config.attn, self.params)

    def differential(self, z: Tensor) -> Tensor:
        return diff_branch_forward(z, self.config.diff, self.params, self.config.h)

    def project(self, z: Tensor) -> Tensor:
        """``(B, C, H, W) -> (B, H, W)`` pointwise two-layer map."""
        z = transpose(as_tensor(z), (0, 2, 3, 1))
        hid = gelu(linear(z, self.params["proj.w1"], self.params["proj.b1"]))
        out = linear(hid, self.params["proj.w2"], self.params["proj.b2"])
        return reshape(out, out.shape[:-1])

    def increment(self, u: Tensor, check: bool = False) -> Tensor:
        z = u
        for stage in (self.lift, self.integral, self.differential, self.project):
            z = stage(z)
            if check and not np.all(np.isfinite(z.data)):
                raise FloatingPointError(f"non-finite values after the {stage.__name__} stage")
        return z

    def apply(self, u: Tensor, check: bool = False) -> Tensor:
        """``u + increment(u)`` for ``(B, H, W)`` or ``(H, W)`` tensors."""
        u = as_tensor(u)
        if u.ndim == 2:
            out = self.apply(reshape(u, (1,) + u.shape), check)
            return reshape(out, out.shape[1:])
        if u.shape[1:] != self.config.grid.shape:
            raise ValueError(f"input grid {u.shape[1:]} does not match model grid {self.config.grid.shape}")
        return add(u, self.increment(u, check))

    __call__ = apply


def forward_step(model: DinoModel, u: ScalarField2D) -> ScalarField2D:
    if u.grid.shape != model.config.grid.shape:
        raise ValueError(f"field grid {u.grid.shape} does not match model grid {model.config.grid.shape}")
    with no_grad():
        x = Tensor(u.values[None].astype(model.dtype))
        inc = model.increment(x, check=True).data[0]
    return ScalarField2D(u.grid, u.values + inc.astype(u.values.dtype))


def rollout(model: DinoModel, u0: ScalarField2D, steps: int) -> Trajectory:
    """Iterate ``forward_step`` ``steps`` times; frame 0 is ``u0``."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    frames = [np.array(u0.values)]
    u = u0
    for k in range(steps):
        try:
            u = forward_step(model, u)
        except (FloatingPointError, ValueError) as exc:
            partial = Trajectory(u0.grid, 1.0, np.stack(frames), {"collapsed_at": k + 1})
            raise RolloutCollapse(
                f"rollout collapsed at step {k + 1} (last finite step {k}): {exc}", k, partial
            ) from exc
        frames.append(u.values)
    return Trajectory(u0.grid, 1.0, np.stack(frames), {"model_config_hash": model.config.hash()})


def save_checkpoint(model: DinoModel, path, extra: dict | None = None) -> Path:
    """Write ``DINOCKPT | u64 manifest length | JSON manifest | payload``."""
    path = Path(path)
    entries, blobs, offset = [], [], 0

    def push(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.params.items():
        push(name, p.data)
    opt = None
    st = model.optimizer_state
    if st is not None:
        opt = {"t": st.t, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        for name in st.m:
            push(f"adam.m/{name}", st.m[name])
            push(f"adam.v/{name}", st.v[name])
    manifest = {
        "format": 1,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "params": entries,
        "step": model.step,
        "metrics": model.metrics,
        "optimizer": opt,
        "payload_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in blobs:
            fh.write(raw)
    return path


def read_checkpoint_manifest(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    return json.loads(raw[16 : 16 + mlen].decode("utf-8"))


def load_checkpoint(path, expected_config: DinoConfig | None = None) -> DinoModel:
    raw = Path(path).read_bytes()
    manifest = read_checkpoint_manifest(path)
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    payload = memoryview(raw)[16 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload length mismatch ({len(payload)} bytes, expected "
            f"{manifest['payload_bytes']})"
        )
    stored = DinoConfig.from_dict(manifest["config"])
    if stored.hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch inside the checkpoint")
    if expected_config is not None and expected_config.hash() != manifest["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {manifest['config_hash'][:12]}, "
            f"expected {expected_config.hash()[:12]})"
        )
    arrays = {}
    for e in manifest["params"]:
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))
    reference = DinoModel(stored)
    params = {}
    for name, p in reference.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name!r} missing")
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: {arrays[name].shape} vs {p.shape}"
            )
        params[name] = Parameter(arrays[name], name)
    model = DinoModel(stored, params)
    model.step = manifest["step"]
    model.metrics = manifest["metrics"]
    opt = manifest.get("optimizer")
    if opt is not None:
        st = AdamState(t=opt["t"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
        for name in params:
            if f"adam.m/{name}" in arrays:
                st.m[name] = arrays[f"adam.m/{name}"]
                st.v[name] = arrays[f"adam.v/{name}"]
        model.optimizer_state = st
    return model
