"""Finite-instance checks of the exponential-tilt improvement results.

Everything here is discrete: a measure is a finite weighted support, the tilt
reweights it by ``exp(eta * g)``, and an upper-triangular coupling moves mass
only towards points with larger (or equal) ``g``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .envs import TabularMdp, discounted_visitation, exact_policy_q, exact_policy_value

MASS_TOL = 1e-12
MAX_SUPPORT = 200


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray   # (n, p)
    masses: np.ndarray   # (n,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        m = np.asarray(self.masses, dtype=float)
        if len(pts) != len(m) or len(m) == 0:
            raise ValueError("need one mass per support point")
        if len(m) > MAX_SUPPORT:
            raise ValueError(f"support is capped at {MAX_SUPPORT} points")
        if (m < 0).any() or abs(m.sum() - 1.0) > MASS_TOL:
            raise ValueError("masses must be non-negative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)

    def __len__(self):
        return len(self.masses)

    def expect(self, values) -> float:
        return float(self.masses @ np.asarray(values, dtype=float))


@dataclass(frozen=True)
class Coupling:
    mass: np.ndarray     # (n, n): rows follow the source, columns the target

    @property
    def source_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def target_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=0)


@dataclass(frozen=True)
class CouplingReport:
    marginal_residual: float
    violating_mass: float

    def ok(self, tol: float = 1e-9) -> bool:
        return self.marginal_residual < tol and self.violating_mass == 0.0


def exp_tilt(measure: DiscreteMeasure, g, eta: float) -> DiscreteMeasure:
    if eta < 0:
        raise ValueError("eta must be >= 0")
    g = np.asarray(g, dtype=float)
    if not np.isfinite(g).all():
        raise ValueError("g must be finite on the support")
    with np.errstate(divide="ignore"):
        logw = np.log(measure.masses) + eta * g
    w = np.exp(logw - logsumexp(logw))
    return DiscreteMeasure(measure.points, w / w.sum())


def uttc_coupling(measure: DiscreteMeasure, g) -> Coupling:
    """Coupling of ``measure`` with its unit tilt that never moves mass down in ``g``.

    Points are grouped by equal ``g`` and the groups are matched in increasing
    order (north-west corner rule).  Inside a pair of groups mass is split in
    proportion to the point masses.
    """
    g = np.asarray(g, dtype=float)
    tilted = exp_tilt(measure, g, 1.0)
    levels, group = np.unique(g, return_inverse=True)
    k = len(levels)
    mu_g = np.bincount(group, weights=measure.masses, minlength=k)
    beta_g = np.bincount(group, weights=tilted.masses, minlength=k)
    flow = np.zeros((k, k))
    i = j = 0
    rem_i, rem_j = mu_g[0], beta_g[0]
    while i < k and j < k:
        if j < i:
            # rounding dust left on a lower target group; never route mass downwards
            j += 1
            rem_j = beta_g[j] if j < k else 0.0
            continue
        m = min(rem_i, rem_j)
        flow[i, j] += m
        rem_i -= m
        rem_j -= m
        if rem_i <= rem_j:
            i += 1
            rem_i = mu_g[i] if i < k else 0.0
        else:
            j += 1
            rem_j = beta_g[j] if j < k else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        row_share = np.where(mu_g[group] > 0, measure.masses / mu_g[group], 0.0)
        col_share = np.where(beta_g[group] > 0, tilted.masses / beta_g[group], 0.0)
    mass = flow[group][:, group] * row_share[:, None] * col_share[None, :]
    return Coupling(mass)


def verify_coupling(coupling: Coupling, measure: DiscreteMeasure, tilted: DiscreteMeasure, g) -> CouplingReport:
    g = np.asarray(g, dtype=float)
    gm = coupling.mass
    if gm.shape != (len(measure), len(tilted)):
        raise ValueError("coupling shape does not match the marginals")
    resid = max(np.abs(coupling.source_marginal - measure.masses).max(),
                np.abs(coupling.target_marginal - tilted.masses).max())
    down = g[:, None] > g[None, :]
    return CouplingReport(float(resid), float(np.abs(gm[down]).sum()))


def is_comonotone(f, g, tol: float = 0.0) -> bool:
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    return bool(((f[:, None] - f[None, :]) * (g[:, None] - g[None, :]) >= -tol).all())


def tilt_inequality_check(measure: DiscreteMeasure, f, g, eta: float):
    """Return ``(E_mu f, E_beta f, holds)`` for ``beta = exp_tilt(mu, g, eta)``."""
    if not is_comonotone(f, g):
        raise ValueError("f and g are not co-monotone on the support")
    base = measure.expect(f)
    tilted = exp_tilt(measure, g, eta).expect(f)
    return base, tilted, base <= tilted + 1e-12


def superior_target_check(prior, l_e, f, eta: float = 1.0):
    """Tilting a finite index distribution by ``l_e`` cannot lower the mean of ``f``."""
    prior = np.asarray(prior, dtype=float)
    measure = DiscreteMeasure(np.arange(len(prior), dtype=float), prior)
    if not is_comonotone(f, l_e):
        raise ValueError("improvement values are not co-monotone with the target")
    base = measure.expect(f)
    improved = exp_tilt(measure, l_e, eta).expect(f)
    return base, improved, improved >= base - 1e-12


def perf_diff_residual(env: TabularMdp, pi, pi_prime, start_state: int) -> float:
    """``|V^pi(s0) - V^pi'(s0) - E_{d^pi} E_pi [A^pi'] / (1 - gamma)|``."""
    v = exact_policy_value(env, pi)
    v_p = exact_policy_value(env, pi_prime)
    adv_p = exact_policy_q(env, pi_prime) - v_p[:, None]
    start = np.zeros(env.n_states)
    start[start_state] = 1.0
    d = discounted_visitation(env, pi, start)
    rhs = float(d @ (np.asarray(pi) * adv_p).sum(axis=1)) / (1.0 - env.gamma)
    return abs(float(v[start_state] - v_p[start_state]) - rhs)


# -- random instance generators shared by tests, scripts and the CLI ------

def random_measure(rng: np.random.Generator, n: int, p: int) -> DiscreteMeasure:
    m = rng.random(n) + 1e-3
    return DiscreteMeasure(rng.random((n, p)), m / m.sum())


def random_comonotone(rng: np.random.Generator, n: int, p: int):
    """A measure with a smooth ``g`` and ``f = phi(g)`` for a random monotone ``phi``."""
    mu = random_measure(rng, n, p)
    coef = rng.normal(size=p)
    g = mu.points @ coef
    if rng.random() < 0.3:
        g = np.round(g, 1)      # force ties
    phi = rng.integers(3)
    if phi == 0:
        f = np.tanh(3.0 * g) + rng.random() * g
    elif phi == 1:
        f = np.floor(4.0 * g)
    else:
        f = np.exp(g)
    return mu, f, g


def run_suite(rng: np.random.Generator, *, n_coupling: int = 200, n_tilt: int = 500,
              n_target: int = 500, n_perf: int = 100,
              coupling_fn: Optional[Callable] = None) -> dict:
    """Run every property sweep and return summary statistics plus ``passed``."""
    from .envs import make_random_mdp, random_policy

    build = coupling_fn or uttc_coupling
    resid = viol = 0.0
    for _ in range(n_coupling):
        mu = random_measure(rng, int(rng.integers(1, 21)), int(rng.integers(1, 3)))
        g = mu.points @ rng.normal(size=mu.points.shape[1])
        if rng.random() < 0.3:
            g = np.round(g, 1)
        rep = verify_coupling(build(mu, g), mu, exp_tilt(mu, g, 1.0), g)
        resid = max(resid, rep.marginal_residual)
        viol = max(viol, rep.violating_mass)
    tilt_fail = 0
    for _ in range(n_tilt):
        mu, f, g = random_comonotone(rng, int(rng.integers(1, 31)), int(rng.integers(1, 4)))
        tilt_fail += not tilt_inequality_check(mu, f, g, float(rng.choice([0.1, 1.0, 10.0])))[2]
    target_fail = 0
    for _ in range(n_target):
        n = int(rng.integers(1, 21))
        prior = rng.dirichlet(np.ones(n))
        l_e = rng.normal(size=n)
        f = 2.0 * l_e + np.round(l_e, 0)
        target_fail += not superior_target_check(prior, l_e, f, float(rng.choice([0.1, 1.0, 10.0])))[2]
    perf = 0.0
    for _ in range(n_perf):
        n_s, n_a = int(rng.integers(2, 9)), int(rng.integers(2, 5))
        env = make_random_mdp(n_s, n_a, rng, gamma=float(rng.uniform(0.5, 0.99)))
        perf = max(perf, perf_diff_residual(env, random_policy(n_s, n_a, rng),
                                            random_policy(n_s, n_a, rng), int(rng.integers(n_s))))
    passed = resid < 1e-9 and viol == 0.0 and tilt_fail == 0 and target_fail == 0 and perf < 1e-8
    return {
        "coupling_max_marginal_residual": resid,
        "coupling_max_violating_mass": viol,
        "tilt_violations": tilt_fail,
        "superior_target_violations": target_fail,
        "perf_diff_max_residual": perf,
        "passed": bool(passed),
    }
