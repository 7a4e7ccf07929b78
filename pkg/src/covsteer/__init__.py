"""Chance-constrained covariance steering for discrete-time Markov jump
linear systems."""
from .model import (ChanceConstraintSet, Halfplane, MarkovChain, MjlsModel, ModeDynamics,
                    NormBound, TubeBound, benchmark_instance, load_model, save_model, validate)
from .propagation import (CovarianceTrajectory, MeanTrajectory, Policy, evaluate_cost,
                          extract_policy, propagate_covariance, propagate_mean,
                          propagate_mode_distribution)

__version__ = "0.1.0"
