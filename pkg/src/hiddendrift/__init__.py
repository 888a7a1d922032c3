"""Portfolio selection when stock appreciation rates are not observed.

Bayesian drift filters, optimal log and power utility strategies, Markov
embeddings with a backward pricing solver, and a verification harness.
"""

__version__ = "0.1.0"

from .filters import (ConstantDriftFilter, KalmanBucyFilter, LaggedFilter, MixtureFilter,
                      PowerEquivalenceFilter, TiltedPrior, WonhamFilter, build_tilted_prior,
                      kalman_step, mixture_posterior_mean, riccati_integrate, wonham_step)
from .likelihood import LikelihoodState, log_z_increment, mixture_density, zbar_exponential
from .market import EllipticityError, MarketSpec, PathBundle, iter_bundles, simulate_paths
from .priors import (DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior, gauss_hermite_prior,
                     gaussian_grid_prior)
from .strategies import (CertaintyEquivalentPortfolio, GenericUtility, LogUtility, LogUtilityPortfolio,
                         PowerUtility, PowerUtilityPortfolio, log_strategy, optimal_claim,
                         power_strategy, solve_lambda, wealth_step)
