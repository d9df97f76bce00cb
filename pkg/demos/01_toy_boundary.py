#!/usr/bin/env python3
"""
Fit a sparse classifier to two overlapping blobs and export its decision surface.

Run from the repository root:  python3 demos/01_toy_boundary.py
Writes demo_out/toy_grid.csv (x0, x1, p_plus) for plotting with any tool.
"""

from pathlib import Path

import numpy as np

from sepgp import TrainConfig, make_blobs, train_batch

# %% data: 400 training points, a separate test draw
train_set = make_blobs(400, seed=0)
test_set = make_blobs(1000, seed=1)
print("training rows:", train_set.n, " positives:", int((train_set.y > 0).sum()))

# %% ten inducing points, 100 iterations of sweep + hyper-parameter step
model, curve = train_batch(train_set, TrainConfig(m=10, iterations=100, seed=0, eval_every=10),
                           test=test_set)
for it, lz, err in zip(curve.iteration, curve.log_zq, curve.test_error):
    if it % 20 == 0:
        print(f"iter {it:3d}  log Z_q {lz:9.3f}  test error {err:.3f}")

# %% where did the inducing points end up? (raw input units)
Z = model.standardization.invert(model.hyper.inducing_points)
print("inducing points:\n", np.round(Z, 2))
print("lengthscales:", np.round(model.hyper.lengthscales, 3))

# %% probability surface on a grid
xs = np.linspace(-4, 4, 41)
gx, gy = np.meshgrid(xs, xs)
grid = np.column_stack([gx.ravel(), gy.ravel()])
p = model.predict_proba(grid)

out = Path("demo_out")
out.mkdir(exist_ok=True)
np.savetxt(out / "toy_grid.csv", np.column_stack([grid, p]), delimiter=",",
           header="x0,x1,p_plus", comments="")
print("wrote", out / "toy_grid.csv")
