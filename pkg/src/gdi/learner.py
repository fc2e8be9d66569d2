"""Off-policy targets (V-trace, ReTrace), the combined actor-critic loss and SGD.

Segment-level targets use backward recursions.  The ``*_operator`` functions
apply the same corrections in exact expectation on a tabular MDP and are the
oracles for fixed-point and contraction checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .envs import TabularMdp
from .policy import IndexPoint, PolicyParams, inverse_temperature, softmax

LOG_FLOOR = 1e-300


def reward_shape_log(r):
    r = np.asarray(r, dtype=float)
    out = np.log1p(np.abs(r)) * np.where(r >= 0, 1.0, -1.0)
    return float(out) if out.ndim == 0 else out


def reward_shape_pow(r):
    r = np.asarray(r, dtype=float)
    out = np.sign(r) * ((np.abs(r) + 1.0) ** 0.25 - 1.0) + 0.001 * r
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossWeights:
    v_scale: float = 1.0       # xi
    q_scale: float = 10.0      # alpha
    pi_scale: float = 10.0     # beta
    is_clip_rho: float = 1.05
    is_clip_c: float = 1.05
    gamma: float = 0.997

    def __post_init__(self):
        if not self.is_clip_rho >= self.is_clip_c > 0:
            raise ValueError("need rho_bar >= c_bar > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class SampleSegment:
    """Fixed-length slice of experience.  ``rewards`` hold the log-shaped stream."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    dones: np.ndarray
    behavior_probs: np.ndarray
    bootstrap_state: int
    lam: Optional[IndexPoint] = None
    version: int = 0
    actor_id: int = 0
    step_versions: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=int)
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.raw_rewards = np.asarray(self.raw_rewards, dtype=float)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.behavior_probs = np.asarray(self.behavior_probs, dtype=float)
        n = len(self.actions)
        if n == 0:
            raise ValueError("segment must contain at least one step")
        if any(len(x) != n for x in (self.states, self.rewards, self.raw_rewards, self.dones, self.behavior_probs)):
            raise ValueError("segment arrays must be aligned")

    @classmethod
    def from_raw(cls, states, actions, raw_rewards, dones, behavior_probs, bootstrap_state, **kw):
        raw = np.asarray(raw_rewards, dtype=float)
        return cls(states, actions, reward_shape_log(raw), raw, dones, behavior_probs, bootstrap_state, **kw)

    def __len__(self):
        return len(self.actions)

    def taken_behavior_probs(self) -> np.ndarray:
        mu = self.behavior_probs[np.arange(len(self)), self.actions]
        if (mu <= 0).any():
            raise ValueError("behavior probability of a taken action is zero")
        return mu


def vtrace_target_policy(pi, mu, rho_bar: float) -> np.ndarray:
    """Normalized ``min(rho_bar * mu, pi)``."""
    clipped = np.minimum(rho_bar * np.asarray(mu, dtype=float), np.asarray(pi, dtype=float))
    return clipped / clipped.sum(axis=-1, keepdims=True)


def _ratios(segment: SampleSegment, pi: np.ndarray) -> np.ndarray:
    mu = segment.taken_behavior_probs()
    return pi[np.arange(len(segment)), segment.actions] / mu


def vtrace_values(segment: SampleSegment, pi, values, weights: LossWeights, rewards=None):
    """Return ``(vs, pg_advantages)``.

    ``pi`` is ``(T, A)`` at the segment states and ``values`` is ``(T+1,)``
    with the bootstrap state's value last.
    """
    pi = np.asarray(pi, dtype=float)
    values = np.asarray(values, dtype=float)
    r = segment.rewards if rewards is None else np.asarray(rewards, dtype=float)
    n = len(segment)
    ratio = _ratios(segment, pi)
    rho = np.minimum(weights.is_clip_rho, ratio).tolist()
    c = np.minimum(weights.is_clip_c, ratio).tolist()
    gamma = weights.gamma
    v = values.tolist()
    rr = r.tolist()
    dones = segment.dones.tolist()
    vs = [0.0] * (n + 1)
    vs[n] = v[n]
    adv = [0.0] * n
    for t in range(n - 1, -1, -1):
        if dones[t]:
            vs[t] = (1.0 - rho[t]) * v[t] + rho[t] * rr[t]
            adv[t] = rho[t] * (rr[t] - v[t])
        else:
            vs[t] = (1.0 - rho[t]) * v[t] + rho[t] * rr[t] + gamma * ((rho[t] - c[t]) * v[t + 1] + c[t] * vs[t + 1])
            adv[t] = rho[t] * (rr[t] + gamma * vs[t + 1] - v[t])
    return np.array(vs[:n]), np.array(adv)


def retrace_values(segment: SampleSegment, pi, q, weights: LossWeights, rewards=None) -> np.ndarray:
    """Q targets for the taken actions.

    ``q`` is ``(T+1,)``: ``Q(s_t, a_t)`` along the segment, then the bootstrap
    value at the final state.
    """
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float).tolist()
    r = (segment.rewards if rewards is None else np.asarray(rewards, dtype=float)).tolist()
    n = len(segment)
    c = np.minimum(weights.is_clip_c, _ratios(segment, pi)).tolist()
    gamma = weights.gamma
    dones = segment.dones.tolist()
    out = [0.0] * n
    nxt = q[n]
    for t in range(n - 1, -1, -1):
        if dones[t]:
            out[t] = r[t]
        elif t == n - 1:
            out[t] = r[t] + gamma * q[n]
        else:
            out[t] = r[t] + gamma * (c[t + 1] * nxt + (1.0 - c[t + 1]) * q[t + 1])
        nxt = out[t]
    return np.array(out)


def _live_transition(env: TabularMdp) -> np.ndarray:
    p = env.transition * (~env.terminal)[None, None, :]
    p[env.terminal] = 0.0
    return p


def vtrace_operator(env: TabularMdp, pi, mu, values, weights: LossWeights) -> np.ndarray:
    """One application of the V-trace operator in exact expectation."""
    pi, mu = np.asarray(pi, dtype=float), np.asarray(mu, dtype=float)
    ratio = pi / mu
    rho = np.minimum(weights.is_clip_rho, ratio)
    c = np.minimum(weights.is_clip_c, ratio)
    p = _live_transition(env)
    g = weights.gamma
    td = env.reward + g * p @ values - values[:, None]
    b = (mu * rho * td).sum(axis=1)
    C = g * np.einsum("sa,sat->st", mu * c, p)
    b[env.terminal] = 0.0
    C[env.terminal] = 0.0
    return values + np.linalg.solve(np.eye(env.n_states) - C, b)


def retrace_operator(env: TabularMdp, pi, mu, q, weights: LossWeights) -> np.ndarray:
    """One application of the sampled-next-action ReTrace operator in exact expectation."""
    pi, mu = np.asarray(pi, dtype=float), np.asarray(mu, dtype=float)
    c = np.minimum(weights.is_clip_c, pi / mu)
    p = _live_transition(env)
    g = weights.gamma
    n_s, n_a = env.n_states, env.n_actions
    td = env.reward + g * p @ (mu * q).sum(axis=1) - q
    M = g * np.einsum("sat,tb->satb", p, mu * c).reshape(n_s * n_a, n_s * n_a)
    d = np.linalg.solve(np.eye(n_s * n_a) - M, td.ravel())
    return q + d.reshape(n_s, n_a)


@dataclass
class Targets:
    vs: np.ndarray
    pg_adv: np.ndarray
    q_targets: np.ndarray


@dataclass
class LossResult:
    loss: float
    grads: list                     # [(g_adv, g_value)] per parameter head
    components: dict = field(default_factory=dict)


class _Batch:
    """Segments laid end to end; each segment contributes its steps plus one bootstrap row."""

    def __init__(self, segments: Sequence[SampleSegment], lams: Sequence[IndexPoint]):
        if len(segments) != len(lams) or not segments:
            raise ValueError("need one index point per segment")
        self.segments = list(segments)
        sizes = [len(s) for s in segments]
        self.states = np.concatenate([np.append(s.states, s.bootstrap_state) for s in segments])
        starts = np.cumsum([0] + [n + 1 for n in sizes])
        self.starts = starts[:-1]
        self.step_rows = np.concatenate([np.arange(a, a + n) for a, n in zip(self.starts, sizes)])
        self.boot_rows = self.starts + np.array(sizes)
        self.actions = np.concatenate([s.actions for s in segments])
        reps = np.array(sizes) + 1
        self.k1 = np.repeat([inverse_temperature(l.tau1) for l in lams], reps)[:, None]
        self.k2 = np.repeat([inverse_temperature(l.tau2) for l in lams], reps)[:, None]
        self.eps = np.repeat([l.epsilon for l in lams], reps)[:, None]
        # each segment's loss is a mean over its steps; the batch averages segments
        self.row_weight = np.repeat([1.0 / (n * len(sizes)) for n in sizes], sizes)


def _mixture_rows(adv, k1, k2, eps):
    p1 = softmax(adv * k1)
    p2 = softmax(adv * k2)
    return eps * p1 + (1.0 - eps) * p2, p1, p2


def _batch_targets(params: PolicyParams, batch: _Batch, weights: LossWeights) -> List[Targets]:
    phi = params.features[batch.states]
    out = []
    for k, head in enumerate(params.heads):
        adv = phi @ head.adv
        val = phi @ head.value
        p = softmax(adv)
        pi = _mixture_rows(adv, batch.k1, batch.k2, batch.eps)[0] if params.isomorphic else p
        q_all = adv - (p * adv).sum(axis=1, keepdims=True) + val[:, None]
        parts = ([], [], [])
        for seg, start in zip(batch.segments, batch.starts):
            n = len(seg)
            rows = slice(start, start + n + 1)
            seg_pi = pi[rows]
            seg_q = q_all[rows]
            q = np.empty(n + 1)
            q[:-1] = seg_q[np.arange(n), seg.actions]
            q[-1] = float(seg_pi[-1] @ seg_q[-1])
            values = val[rows].copy()
            if seg.dones[-1]:
                values[-1] = 0.0
                q[-1] = 0.0
            if params.isomorphic or k == 0:
                rewards = seg.rewards
            else:
                rewards = reward_shape_pow(seg.raw_rewards)
            vs, pg_adv = vtrace_values(seg, seg_pi[:-1], values, weights, rewards)
            parts[0].append(vs)
            parts[1].append(pg_adv)
            parts[2].append(retrace_values(seg, seg_pi[:-1], q, weights, rewards))
        out.append(Targets(*(np.concatenate(x) for x in parts)))
    return out


def _batch_losses(params: PolicyParams, batch: _Batch, targets: Sequence[Targets],
                  weights: LossWeights) -> LossResult:
    heads = params.heads
    if len(targets) != len(heads):
        raise ValueError("need one Targets per parameter head")
    rows = batch.step_rows
    phi = params.features[batch.states[rows]]
    n = len(rows)
    idx = np.arange(n)
    acts = batch.actions
    wt = batch.row_weight
    onehot = np.zeros((n, heads[0].adv.shape[1]))
    onehot[idx, acts] = 1.0
    total = 0.0
    grads = []
    comps = {}
    for k, (head, tg) in enumerate(zip(heads, targets)):
        adv = phi @ head.adv
        val = phi @ head.value
        p = softmax(adv)
        m = (p * adv).sum(axis=1)
        q_taken = adv[idx, acts] - m + val
        if params.isomorphic:
            k1, k2, eps = batch.k1[rows], batch.k2[rows], batch.eps[rows]
            pi, p1, p2 = _mixture_rows(adv, k1, k2, eps)
        else:
            k1 = k2 = eps = np.ones((n, 1))
            pi = p1 = p2 = p
        pi_a = np.maximum(pi[idx, acts], LOG_FLOOR)
        # d log pi(a) / d A_j for the two-component mixture (both parts share A)
        w1 = eps * k1 * p1[idx, acts][:, None] / pi_a[:, None]
        w2 = (1.0 - eps) * k2 * p2[idx, acts][:, None] / pi_a[:, None]
        dlogp = w1 * (onehot - p1) + w2 * (onehot - p2)
        v_err = val - tg.vs
        q_err = q_taken - tg.q_targets
        pg = -float(wt @ (tg.pg_adv * np.log(pi_a)))
        v_loss = 0.5 * float(wt @ v_err ** 2)
        q_loss = 0.5 * float(wt @ q_err ** 2)
        total += weights.pi_scale * pg + weights.v_scale * v_loss + weights.q_scale * q_loss
        # d A_bar[a] / d A_j = [a == j] - p_j (1 + A_j - m)
        dabar = onehot - p * (1.0 + adv - m[:, None])
        g_a = wt[:, None] * (-weights.pi_scale * tg.pg_adv[:, None] * dlogp
                             + weights.q_scale * q_err[:, None] * dabar)
        g_v = wt * (weights.v_scale * v_err + weights.q_scale * q_err)
        grads.append((phi.T @ g_a, phi.T @ g_v))
        comps[f"head{k + 1}"] = {"pg": pg, "v": v_loss, "q": q_loss}
    return LossResult(float(total), grads, comps)


def compute_targets(params: PolicyParams, segment: SampleSegment, lam: IndexPoint,
                    weights: LossWeights) -> List[Targets]:
    """V-trace and ReTrace targets for every parameter head (stop-gradient).

    Isomorphic heads learn the acting mixture; heterogeneous heads each learn
    their own temperature-1 softmax, head 2 on the power-shaped rewards.
    """
    return _batch_targets(params, _Batch([segment], [lam]), weights)


def compute_losses(params: PolicyParams, segment: SampleSegment, lam: IndexPoint,
                   targets: Sequence[Targets], weights: LossWeights) -> LossResult:
    """Mean-over-steps loss ``beta*PG + xi*value + alpha*Q`` with analytic gradients."""
    return _batch_losses(params, _Batch([segment], [lam]), targets, weights)


def batch_loss(params: PolicyParams, segments: Sequence[SampleSegment], weights: LossWeights,
               lams: Optional[Sequence[IndexPoint]] = None) -> LossResult:
    """Targets and loss for a batch; the loss is the mean of per-segment losses."""
    batch = _Batch(segments, lams or [s.lam for s in segments])
    return _batch_losses(params, batch, _batch_targets(params, batch, weights), weights)


def apply_sgd(params: PolicyParams, grads, step_size: float) -> int:
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    if len(grads) != len(params.heads):
        raise ValueError("need one gradient pair per parameter head")
    for g_a, g_v in grads:
        if not (np.isfinite(g_a).all() and np.isfinite(g_v).all()):
            raise ValueError("non-finite gradient")
    for head, (g_a, g_v) in zip(params.heads, grads):
        head.adv -= step_size * g_a
        head.value -= step_size * g_v
    params.version += 1
    return params.version
