"""Fit Lotka-Volterra parameters from noisy data with both objectives."""

import numpy as np

from fenrir import ParamSpace, fit, get_problem, init_params, trmse
from fenrir.bench import generate_data
from fenrir.estimate import FENRIR, JOINT_STAGE, RK, Objective, schedule_for

p = get_problem("lotka-volterra")
seed = 0
obs = generate_data(p, p.noise("low"), seed)
print("truth ", np.round(p.true_params, 3), p.true_y0)

for method in (FENRIR, RK):
    space = ParamSpace.from_problem(p, method)
    objective = Objective(p, obs, method, space)
    x0 = init_params(space, seed, obs, p.t0)
    # the marginal-likelihood fit first tunes noise and diffusion, then everything
    schedule = schedule_for(p) if method == FENRIR else [JOINT_STAGE]
    res = fit(objective, space, x0, schedule, seed=seed)
    print(f"{method:>6}  {res.status}  objective {res.nll:.3f}  tRMSE {trmse(p, res, space):.4f}  "
          f"{res.wall_time:.1f} s")
    for name, value in zip(res.names, res.params):
        print(f"        {name:>7} = {value:.4g}")
