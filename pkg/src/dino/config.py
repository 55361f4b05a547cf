"""Strict JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .field import Grid2D
from .model import DinoConfig
from .opdiff import DiffBranchConfig
from .opint import AttentionConfig
from .solver import ForcingSpec, InitialConditionSpec, SolverConfig, config_hash
from .trainer import TrainConfig

__all__ = ["ConfigError", "EvalConfig", "RunConfig", "load_config", "desk_config"]

SECTIONS = ("grid", "solver", "ic", "model", "train", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    rollout_steps: int = 10
    corr_threshold: float = 0.8
    stability_iters: int = 100
    rayleigh_samples: int = 100
    spectrum_k_range: tuple[int, int] = (6, 16)
    n_states: int = 1

    def __post_init__(self):
        object.__setattr__(self, "spectrum_k_range", tuple(self.spectrum_k_range))
        if self.rollout_steps < 0:
            raise ValueError("rollout_steps must be non-negative")


@dataclass(frozen=True)
class DataSpec:
    """Initial-condition family plus the number of trajectories to draw."""

    n_traj: int = 64
    kind: str = "gaussian_random_field"
    k0: float = 4.0
    rms_vorticity: float = 1.0
    seed: int = 0

    def spec(self) -> InitialConditionSpec:
        return InitialConditionSpec(self.kind, self.k0, self.rms_vorticity, self.seed)


def _check_keys(section: str, given: dict, cls) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _build(section: str, cls, given: dict, nested: dict | None = None):
    _check_keys(section, given, cls)
    kwargs = dict(given)
    for key, sub in (nested or {}).items():
        if key in kwargs:
            _check_keys(f"{section}.{key}", kwargs[key], sub)
            kwargs[key] = sub(**kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


@dataclass(frozen=True)
class RunConfig:
    grid: Grid2D
    solver: SolverConfig
    ic: DataSpec = field(default_factory=DataSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown top-level section(s): {', '.join(unknown)}")
        for name in ("grid", "solver"):
            if name not in d:
                raise ConfigError(f"missing required section {name!r}")
        grid = _build("grid", Grid2D, d["grid"])
        solver = _build("solver", SolverConfig, d["solver"], {"forcing": ForcingSpec})
        ic = _build("ic", DataSpec, d.get("ic", {}))
        model_d = d.get("model", {})
        _check_keys("model", model_d, _ModelSection)
        for key, sub in (("diff", DiffBranchConfig), ("attn", AttentionConfig)):
            _check_keys(f"model.{key}", model_d.get(key, {}), sub)
        cfg = cls(grid, solver, ic, dict(model_d),
                  _build("train", TrainConfig, d.get("train", {})),
                  _build("eval", EvalConfig, d.get("eval", {})))
        cfg.dino_config()
        return cfg

    def dino_config(self) -> DinoConfig:
        m = dict(self.model)
        channels = m.get("lift_channels", 16)
        diff = DiffBranchConfig(**{"channels": channels, **m.get("diff", {})})
        try:
            return DinoConfig(
                grid=self.grid,
                lift_channels=channels,
                diff=diff,
                attn=AttentionConfig(**m.get("attn", {})),
                derivative_scale_h=m.get("derivative_scale_h"),
                dtype=m.get("dtype", self.train.precision),
                seed=m.get("seed", self.train.seed),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'model' section: {exc}") from exc

    def to_dict(self) -> dict:
        return {name: _plain(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed (IC family, model init, shuffling) from one integer."""
        model = {**self.model, "seed": seed}
        return replace(self, ic=replace(self.ic, seed=seed), model=model,
                       train=replace(self.train, seed=seed))


@dataclass(frozen=True)
class _ModelSection:
    lift_channels: int = 16
    diff: dict = field(default_factory=dict)
    attn: dict = field(default_factory=dict)
    derivative_scale_h: float | None = None
    dtype: str = "float32"
    seed: int = 42


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def desk_config() -> dict:
    """The desk-scale Kolmogorov setup used by the forecasting acceptance run."""
    return {
        "grid": {"nx": 32, "ny": 32},
        "solver": {
            "nu": 1e-3, "dt": 0.01, "t_end": 1.98, "save_every": 2, "t_spinup": 5.0,
            "forcing": {"kind": "kolmogorov", "amplitude": 4.0, "wavenumber": 4,
                        "interpretation": "vorticity_source"},
        },
        "ic": {"n_traj": 64, "k0": 4.0, "rms_vorticity": 1.0, "seed": 0},
        "model": {"lift_channels": 8, "attn": {"n_layers": 8, "d_z": 32, "n_heads": 4, "patch": 4}},
        "train": {"lr": 1e-3, "epochs": 20, "batch": 16, "seed": 42},
        "eval": {"rollout_steps": 10},
    }
