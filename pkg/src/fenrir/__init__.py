"""Parameter inference for ODEs with a probabilistic-solver prior.

The ODE is first solved by an extended Kalman filter under an integrated
Wiener process prior.  The resulting backward Gauss--Markov chain acts as a
prior over trajectories, and regression of the data against it gives the
marginal likelihood that is optimised over parameters, noise and diffusion.
"""

from .linearize import EK0, EK1, VectorField, information_residual, linearize
from .prior import GaussMarkovPrior, iwp_transition, preconditioner, taylor_init
from .pnsolver import (
    BackwardMarkovChain,
    GaussianBelief,
    SolverDivergence,
    make_grid,
    predict,
    smooth,
    smoothed_moments,
    solve_ivp,
    update,
)
from .regression import ObservationSet, RegressionResult, fenrir_nll, fenrir_posterior
from .rk import RkFailure, RkSolution, rk_lsq_loss, rk_solve
from .models import BenchmarkProblem, get_problem, model_selection_candidates
from .estimate import FitResult, ParamSpace, fit, init_params, make_objective, trmse

__version__ = "0.1.0"
