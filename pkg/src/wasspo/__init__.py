"""Wasserstein-geometric policy optimization on small control benchmarks.

Modules
-------
numerics     dense solves, conjugate gradient, ridge, 1-D W2, finite differences
autodiff     reverse-mode tape over numpy arrays
envs         scalar regulator, pendulum, coupled Duffing oscillators
grid         grid policy iteration with action particles
policy       MLP policies, Jacobian products, pullback Gram operator
trajopt      differentiable-rollout policy optimization (Adam / natural gradient)
world_model  learned dynamics with a ridge-solved head, joint training
verify       numerical checks of the transport geometry
estimators   scikit-learn style wrappers
cli          command-line runner
"""
from .envs import make_env
from .estimators import (GridPolicyIteration, ModelBasedPolicy, TrajectoryOptimizer,
                         VarProWorldModel)

__version__ = "0.1.0"

__all__ = ["make_env", "GridPolicyIteration", "TrajectoryOptimizer",
           "VarProWorldModel", "ModelBasedPolicy", "__version__"]
