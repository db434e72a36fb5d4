"""Objective landscapes over the pendulum length for both methods.

The least-squares loss of the simulated trajectory has many local minima in
L.  So does the marginal likelihood at small diffusion, where the prior is
nearly the ODE solution itself; at a large diffusion the posterior can follow
the data and almost all of them disappear.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fenrir import ParamSpace, get_problem
from fenrir.bench import generate_data, nll_sweep
from fenrir.estimate import FENRIR, RK, Objective, scan_diffusion

out = Path("results/demos")
out.mkdir(parents=True, exist_ok=True)

p = get_problem("pendulum", fit_init=False)
obs = generate_data(p, p.noise("low"), 0)
space = ParamSpace.from_problem(p, FENRIR)
sigma2 = p.noise("low")


def local_minima(v):
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


# the diffusion the staged fit starts from when it is given L = 5
x = scan_diffusion(Objective(p, obs, FENRIR, space), space.assemble([5.0], sigma2=sigma2, kappa=1.0))
print(f"diffusion chosen at L = 5: {x[-1]:.3g}")

lengths = np.geomspace(0.1, 10.0, 200)
curves = {}
for kappa in (1.0, 1e22, x[-1]):
    curves[f"fenrir, kappa = {kappa:.0e}"] = nll_sweep(p, obs, space, [5.0, sigma2, kappa], "L", lengths)
curves["rk squared error"] = nll_sweep(p, obs, ParamSpace.from_problem(p, RK), [1.0], "L", lengths, method=RK)
for name, v in curves.items():
    print(f"{name:>24}: {local_minima(v):2d} local minima, lowest at L = {lengths[np.argmin(v)]:.3f}")

fig, axes = plt.subplots(len(curves), 1, figsize=(6, 7), sharex=True)
for ax, (name, v) in zip(axes, curves.items()):
    ax.plot(lengths, v, lw=1)
    ax.axvline(1.0, color="k", ls="--", lw=0.8)
    ax.set_title(name, fontsize=9)
axes[-1].set_xscale("log")
axes[-1].set_xlabel("L")
fig.tight_layout()
fig.savefig(out / "pendulum_landscape.png", dpi=120)
print(f"wrote {out / 'pendulum_landscape.png'}")
