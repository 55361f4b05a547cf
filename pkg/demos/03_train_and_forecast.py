"""A small end-to-end run: data, one-step training, rollout, stability probes.

Smaller than the acceptance run (16 trajectories, 3 epochs) so it finishes in
a few minutes on one core.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from dino.config import RunConfig, desk_config
from dino.diagnostics import correlation_series, high_correlation_time, relative_l2, stability_report
from dino.model import DinoModel, rollout
from dino.solver import generate_dataset, load_manifest
from dino.trainer import evaluate_one_step, split_train_val, train

raw = desk_config()
raw["ic"]["n_traj"] = 16
raw["train"]["epochs"] = 3
cfg = RunConfig.from_dict(raw)
work = Path(tempfile.mkdtemp(prefix="dino-demo-"))

# %%
generate_dataset(cfg.ic.n_traj, cfg.solver, cfg.ic.spec(), work, cfg.grid)
_, trajs = load_manifest(work / "manifest.json")
train_set, held = split_train_val(trajs, val_fraction=0.25)
print(f"{len(train_set)} training and {len(held)} held-out trajectories of {len(trajs[0])} frames")

# %% [markdown]
# A fresh model is the identity, i.e. the persistence forecast. Training
# only has to learn the increment.

# %%
model = DinoModel(cfg.dino_config())
print(f"{model.n_parameters()} parameters; one-step rel L2 before training {evaluate_one_step(model, held):.4f}")
model, report = train(model, train_set, cfg.train,
                      on_epoch=lambda e, loss: print(f"  epoch {e}: loss {loss:.4e}"))
print(f"one-step rel L2 after training {evaluate_one_step(model, held):.4f}")

# %%
steps = cfg.eval.rollout_steps
for t in held:
    truth = type(t)(t.grid, t.dt, t.frames[: steps + 1])
    series = correlation_series(rollout(model, t.frame(0), steps), truth)
    persist = relative_l2(t.frames[0], t.frames[steps])
    print(f"step {steps}: model {series.rel_l2[-1]:.3f}  persistence {persist:.3f}  "
          f"high-correlation time {high_correlation_time(series)}")

# %% [markdown]
# The stability probes linearize the trained operator at a real state.

# %%
rep = stability_report(model, held[0].frames[0])
print(f"sigma_int {rep.sigma_int:.3f}  rayleigh_diff {np.round(rep.rayleigh_diff, 3)}  rho_full {rep.rho_full:.4f}")
print("residuals", {k: f"{v:.1e}" for k, v in rep.residuals.items()})
