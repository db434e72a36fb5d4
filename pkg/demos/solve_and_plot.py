"""Probabilistic solve of the Lotka-Volterra system and its error against RK."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fenrir import GaussMarkovPrior, get_problem, make_grid, smoothed_moments, solve_ivp
from fenrir.estimate import true_trajectory

out = Path("results/demos")
out.mkdir(parents=True, exist_ok=True)

p = get_problem("lotka-volterra")
prior = GaussMarkovPrior(nu=3, d=p.d)

# one solve at the benchmark step, with posterior standard deviations
grid = make_grid(p.t0, p.data_times[-1], p.dt)
chain, diag = solve_ivp(p.field, p.true_params, p.true_y0, prior, grid)
means, sqrts = smoothed_moments(chain)
sd = np.sqrt(np.einsum("nij,nij->ni", sqrts, sqrts)[:, : p.d])
print(f"{len(chain)} nodes, largest ODE residual {diag.residual_norms.max():.2e}")

# error at the data times shrinks with the step
truth = true_trajectory(p)
for dt in (0.1, 0.05, 0.025, 0.0125):
    g = make_grid(p.t0, p.data_times[-1], dt, p.data_times)
    ch, _ = solve_ivp(p.field, p.true_params, p.true_y0, prior, g)
    m, _ = smoothed_moments(ch)
    rows = np.searchsorted(ch.grid, p.data_times)
    print(f"dt = {dt:<7} max error {np.abs(m[rows, : p.d] - truth).max():.2e}")

fig, ax = plt.subplots(figsize=(6, 3))
for i in range(p.d):
    ax.plot(chain.grid, means[:, i], lw=1, label=f"y{i + 1}")
    ax.fill_between(chain.grid, means[:, i] - 2 * sd[:, i], means[:, i] + 2 * sd[:, i], alpha=0.3, lw=0)
    ax.plot(p.data_times, truth[:, i], "k.", ms=3)
ax.set_xlabel("t")
ax.legend()
fig.tight_layout()
fig.savefig(out / "lv_solution.png", dpi=120)
print(f"wrote {out / 'lv_solution.png'}")
