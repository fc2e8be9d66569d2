"""Tabular MDPs, trajectory sampling and exact dynamic-programming oracles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

PROB_TOL = 1e-12

Policy = Union[np.ndarray, Callable[[int], np.ndarray]]


@dataclass
class TabularMdp:
    """Finite MDP ``(S, A, P, r, gamma, rho0)`` with absorbing terminal states.

    ``transition[s, a, s']`` is ``P(s'|s, a)`` and ``reward[s, a]`` the
    deterministic reward for taking ``a`` in ``s``.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal: np.ndarray
    gamma: float = 0.99
    name: str = "mdp"
    _cum_transition: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        n_s, n_a = self.reward.shape
        if self.transition.shape != (n_s, n_a, n_s):
            raise ValueError(f"transition shape {self.transition.shape} != {(n_s, n_a, n_s)}")
        if self.initial_dist.shape != (n_s,) or self.terminal.shape != (n_s,):
            raise ValueError("initial_dist and terminal must have one entry per state")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if (self.transition < 0).any() or (self.initial_dist < 0).any():
            raise ValueError("probabilities must be non-negative")
        if np.abs(self.transition.sum(axis=2) - 1.0).max() > PROB_TOL:
            raise ValueError("transition rows must sum to 1")
        if abs(self.initial_dist.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial_dist must sum to 1")
        self._cum_transition = np.cumsum(self.transition, axis=2)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    behavior_probs: np.ndarray
    final_state: int

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def __len__(self):
        return len(self.actions)


def reset(env: TabularMdp, rng: np.random.Generator) -> int:
    return int(rng.choice(env.n_states, p=env.initial_dist))


def step(env: TabularMdp, state: int, action: int, rng: np.random.Generator):
    """Advance one transition; returns ``(next_state, reward, done)``."""
    if not 0 <= action < env.n_actions:
        raise ValueError(f"action {action} out of range [0, {env.n_actions})")
    if env.terminal[state]:
        raise ValueError(f"state {state} is terminal")
    cum = env._cum_transition[state, action]
    next_state = int(min(np.searchsorted(cum, rng.random(), side="right"), env.n_states - 1))
    return next_state, float(env.reward[state, action]), bool(env.terminal[next_state])


def _policy_row(policy: Policy, state: int) -> np.ndarray:
    if callable(policy):
        return np.asarray(policy(state), dtype=float)
    return np.asarray(policy[state], dtype=float)


def rollout(env: TabularMdp, policy: Policy, max_steps: int, rng: np.random.Generator) -> Trajectory:
    """Run one episode from ``rho0`` until termination or ``max_steps``."""
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    s = reset(env, rng)
    states, actions, rewards, dones, probs = [], [], [], [], []
    for _ in range(max_steps):
        p = _policy_row(policy, s)
        a = int(rng.choice(env.n_actions, p=p))
        s2, r, done = step(env, s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        dones.append(done)
        probs.append(p)
        s = s2
        if done:
            break
    return Trajectory(
        states=np.array(states, dtype=int),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards, dtype=float),
        dones=np.array(dones, dtype=bool),
        behavior_probs=np.array(probs, dtype=float),
        final_state=s,
    )


def discounted_return(rewards, gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return float(g)


def _policy_matrix(env: TabularMdp, policy: Policy) -> np.ndarray:
    if callable(policy):
        pi = np.array([policy(s) for s in range(env.n_states)], dtype=float)
    else:
        pi = np.asarray(policy, dtype=float)
    if pi.shape != (env.n_states, env.n_actions):
        raise ValueError(f"policy shape {pi.shape} != {(env.n_states, env.n_actions)}")
    if (pi < 0).any() or np.abs(pi.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("policy rows must be distributions")
    return pi


def policy_dynamics(env: TabularMdp, policy: Policy):
    """State-to-state kernel ``P_pi`` and reward vector ``r_pi`` under ``policy``."""
    pi = _policy_matrix(env, policy)
    p_pi = np.einsum("sa,sat->st", pi, env.transition)
    r_pi = (pi * env.reward).sum(axis=1)
    return p_pi, r_pi


def exact_policy_value(env: TabularMdp, policy: Policy) -> np.ndarray:
    """``V = (I - gamma P_pi)^{-1} r_pi``."""
    p_pi, r_pi = policy_dynamics(env, policy)
    return np.linalg.solve(np.eye(env.n_states) - env.gamma * p_pi, r_pi)


def exact_policy_q(env: TabularMdp, policy: Policy) -> np.ndarray:
    v = exact_policy_value(env, policy)
    return env.reward + env.gamma * env.transition @ v


def discounted_visitation(env: TabularMdp, policy: Policy, start_dist) -> np.ndarray:
    """``d = (1 - gamma) (I - gamma P_pi^T)^{-1} rho``."""
    start = np.asarray(start_dist, dtype=float)
    if abs(start.sum() - 1.0) > 1e-10 or (start < 0).any():
        raise ValueError("start_dist must be a distribution")
    p_pi, _ = policy_dynamics(env, policy)
    d = np.linalg.solve(np.eye(env.n_states) - env.gamma * p_pi.T, start)
    return (1.0 - env.gamma) * d


def bellman_residual(env: TabularMdp, policy: Policy, values: np.ndarray) -> float:
    p_pi, r_pi = policy_dynamics(env, policy)
    return float(np.abs(values - (r_pi + env.gamma * p_pi @ values)).max())


def make_chain_env(
    length: int,
    slip: float = 0.0,
    *,
    goal_reward: float = 10.0,
    trap_reward: float = 0.0,
    gamma: float = 0.997,
) -> TabularMdp:
    """Chain ``0 - 1 - ... - length``; state ``length`` is an absorbing terminal.

    Action 0 moves left, action 1 moves right.  Between interior states a move
    slips the other way with probability ``slip`` (a slip that would enter the
    terminal stays put instead).  Stepping right from ``length - 1`` always
    ends the episode and is the only move paying ``goal_reward``.  A non-zero
    ``trap_reward`` turns "left" at state 0 into an exit paying that amount.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    n_s = length + 1
    end = length
    P = np.zeros((n_s, 2, n_s))
    R = np.zeros((n_s, 2))
    terminal = np.zeros(n_s, dtype=bool)
    terminal[end] = True
    for s in range(end):
        left, right = max(s - 1, 0), s + 1
        for a, (main, other) in enumerate([(left, right), (right, left)]):
            if main == end:
                P[s, a, end] = 1.0
                R[s, a] = goal_reward
                continue
            P[s, a, main] += 1.0 - slip
            P[s, a, s if other == end else other] += slip
    if trap_reward != 0.0:
        P[0, 0] = 0.0
        P[0, 0, end] = 1.0
        R[0, 0] = trap_reward
    P[end, :, end] = 1.0
    rho0 = np.zeros(n_s)
    rho0[0] = 1.0
    return TabularMdp(P, R, rho0, terminal, gamma=gamma, name=f"chain{length}")


def make_grid_env(width: int, height: int, *, goal_reward: float = 1.0, gamma: float = 0.99) -> TabularMdp:
    """Deterministic ``width x height`` grid; acting in the far corner terminates with ``goal_reward``."""
    if width < 1 or height < 1:
        raise ValueError("grid sizes must be >= 1")
    n_cells = width * height
    end = n_cells
    P = np.zeros((n_cells + 1, 4, n_cells + 1))
    R = np.zeros((n_cells + 1, 4))
    moves = [(0, -1), (1, 0), (0, 1), (-1, 0)]  # up, right, down, left
    goal = n_cells - 1
    for cell in range(n_cells):
        x, y = cell % width, cell // width
        for a, (dx, dy) in enumerate(moves):
            if cell == goal:
                P[cell, a, end] = 1.0
                R[cell, a] = goal_reward
                continue
            nx = min(max(x + dx, 0), width - 1)
            ny = min(max(y + dy, 0), height - 1)
            P[cell, a, ny * width + nx] = 1.0
    P[end, :, end] = 1.0
    terminal = np.zeros(n_cells + 1, dtype=bool)
    terminal[end] = True
    rho0 = np.zeros(n_cells + 1)
    rho0[0] = 1.0
    return TabularMdp(P, R, rho0, terminal, gamma=gamma, name=f"grid{width}x{height}")


def make_random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, *, gamma: float = 0.9) -> TabularMdp:
    """Dense random MDP with Dirichlet transitions and uniform rewards in [-1, 1]."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("sizes must be >= 1")
    P = rng.random((n_states, n_actions, n_states)) + 1e-3
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.random(n_states) + 1e-3
    rho0 /= rho0.sum()
    return TabularMdp(P, R, rho0, np.zeros(n_states, dtype=bool), gamma=gamma, name="random")


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    pi = rng.random((n_states, n_actions)) + 1e-3
    return pi / pi.sum(axis=1, keepdims=True)
