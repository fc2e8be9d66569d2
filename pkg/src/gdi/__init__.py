"""Learned behaviour-policy sampling for off-policy training on tabular MDPs.

Modules: ``envs`` (tabular MDPs and DP oracles), ``policy`` (mixture policy space),
``bandits`` (index controller), ``learner`` (off-policy targets and losses),
``orchestrator`` (actor/learner loop), ``theory`` (transport checks),
``metrics`` (normalized scores) and ``cli``.
"""
from .envs import TabularMdp, make_chain_env, make_grid_env, make_random_mdp
from .policy import IndexPoint, PolicyParams, mixture_policy, tempered_softmax
from .orchestrator import RunConfig, run_gdi, run_fixed_lambda, state_coverage

__version__ = "0.1.0"

__all__ = [
    "TabularMdp", "make_chain_env", "make_grid_env", "make_random_mdp",
    "IndexPoint", "PolicyParams", "mixture_policy", "tempered_softmax",
    "RunConfig", "run_gdi", "run_fixed_lambda", "state_coverage",
]
