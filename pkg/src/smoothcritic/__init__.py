"""Desk-scale actor-critic RL with spectral normalization.

SAC and DDPG agents over swappable head architectures (plain MLPs or
pre-norm residual feedforward stacks), with power-iteration spectral
normalization of the intermediate linear layers and instrumentation for
training-stability diagnostics.
"""

from .agents import Agent
from .envs import env_ids, make_env
from .layers import NetworkSpec, build_actor_head, build_critic_head
from .runner import AgentConfig, run_experiment, run_matrix
from .specnorm import exact_sigma_max, lipschitz_bound

__all__ = [
    "Agent", "AgentConfig", "NetworkSpec", "build_actor_head",
    "build_critic_head", "env_ids", "exact_sigma_max", "lipschitz_bound",
    "make_env", "run_experiment", "run_matrix",
]

__version__ = "0.1.0"
