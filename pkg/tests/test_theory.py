import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdi.envs import make_random_mdp, random_policy
from gdi.theory import (
    Coupling, DiscreteMeasure, exp_tilt, is_comonotone, perf_diff_residual, random_comonotone,
    random_measure, run_suite, superior_target_check, tilt_inequality_check, uttc_coupling,
    verify_coupling,
)

E = math.e
seeds = st.integers(0, 2**32 - 1)


def two_point():
    return DiscreteMeasure(np.array([0.0, 1.0]), np.array([0.5, 0.5]))


# --- measures and tilts -------------------------------------------------------

@pytest.mark.parametrize("masses", [[0.5, 0.6], [1.5, -0.5], []])
def test_measure_validation(masses):
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros(len(masses)), np.array(masses, dtype=float))


def test_measure_support_cap():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros(201), np.full(201, 1 / 201))


def test_tilt_examples():
    mu = two_point()
    beta = exp_tilt(mu, [0.0, 1.0], 1.0)
    assert beta.masses == pytest.approx([1 / (1 + E), E / (1 + E)], abs=1e-15)
    assert beta.masses == pytest.approx([0.26894, 0.73106], abs=5e-6)
    assert exp_tilt(mu, [3.0, 3.0], 2.0).masses == pytest.approx(mu.masses, abs=1e-15)
    assert exp_tilt(mu, [0.0, 1.0], 0.0).masses == pytest.approx(mu.masses, abs=1e-15)


def test_tilt_errors():
    with pytest.raises(ValueError):
        exp_tilt(two_point(), [0.0, 1.0], -0.1)
    with pytest.raises(ValueError):
        exp_tilt(two_point(), [0.0, np.inf], 1.0)


def test_tilt_survives_large_exponents():
    beta = exp_tilt(two_point(), [0.0, 1000.0], 1.0)
    assert beta.masses.tolist() == [0.0, 1.0]


@given(seeds, st.floats(0, 5), st.floats(0, 5))
def test_tilts_compose(seed, a, b):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng, int(rng.integers(1, 20)), 2)
    g = rng.normal(size=len(mu))
    lhs = exp_tilt(exp_tilt(mu, g, a), g, b).masses
    rhs = exp_tilt(mu, g, a + b).masses
    assert np.abs(lhs - rhs).max() <= 1e-12


# --- couplings ------------------------------------------------------------------

def test_single_point_coupling():
    mu = DiscreteMeasure(np.array([[0.3, 0.4]]), np.array([1.0]))
    assert uttc_coupling(mu, [2.0]).mass.tolist() == [[1.0]]


def test_two_point_coupling():
    gm = uttc_coupling(two_point(), [0.0, 1.0]).mass
    b0 = 1 / (1 + E)
    assert gm == pytest.approx(np.array([[b0, 0.5 - b0], [0.0, 0.5]]), abs=1e-15)
    assert gm == pytest.approx(np.array([[0.26894, 0.23106], [0.0, 0.5]]), abs=5e-6)


def test_hand_coupling_verifies():
    mu, g = two_point(), np.array([0.0, 1.0])
    b0 = 1 / (1 + E)
    rep = verify_coupling(Coupling(np.array([[b0, 0.5 - b0], [0.0, 0.5]])), mu, exp_tilt(mu, g, 1.0), g)
    assert rep.marginal_residual < 1e-15 and rep.violating_mass == 0.0 and rep.ok()


def test_independent_coupling_violates_order():
    mu, g = two_point(), np.array([0.0, 1.0])
    beta = exp_tilt(mu, g, 1.0)
    rep = verify_coupling(Coupling(np.outer(mu.masses, beta.masses)), mu, beta, g)
    assert rep.marginal_residual < 1e-15
    assert rep.violating_mass > 0 and not rep.ok()


def test_verify_rejects_wrong_shape():
    mu = two_point()
    with pytest.raises(ValueError):
        verify_coupling(Coupling(np.eye(3)), mu, mu, [0.0, 1.0])


def test_coupling_with_ties_splits_proportionally():
    mu = DiscreteMeasure(np.arange(4.0), np.array([0.1, 0.2, 0.3, 0.4]))
    g = np.array([0.0, 0.0, 1.0, 1.0])
    beta = exp_tilt(mu, g, 1.0)
    gm = uttc_coupling(mu, g).mass
    rep = verify_coupling(Coupling(gm), mu, beta, g)
    assert rep.ok()
    # inside the low group the split follows the masses 1:2 on both sides
    assert gm[0, 1] == pytest.approx(2 * gm[0, 0]) and gm[1, 0] == pytest.approx(gm[0, 1])


def test_coupling_sweep():
    rng = np.random.default_rng(3)
    worst_resid = worst_viol = 0.0
    for _ in range(200):
        p = int(rng.integers(1, 3))
        mu = random_measure(rng, int(rng.integers(1, 21)), p)
        g = mu.points @ rng.normal(size=p)
        rep = verify_coupling(uttc_coupling(mu, g), mu, exp_tilt(mu, g, 1.0), g)
        worst_resid = max(worst_resid, rep.marginal_residual)
        worst_viol = max(worst_viol, rep.violating_mass)
        assert (uttc_coupling(mu, g).mass >= 0).all()
    assert worst_resid < 1e-9 and worst_viol == 0.0


@settings(max_examples=300)
@given(seeds, st.integers(1, 40), st.booleans())
def test_coupling_property(seed, n, ties):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng, n, 2)
    g = mu.points @ rng.normal(size=2)
    if ties:
        g = np.round(g, 1)
    rep = verify_coupling(uttc_coupling(mu, g), mu, exp_tilt(mu, g, 1.0), g)
    assert rep.ok()


# --- co-monotone tilt inequality --------------------------------------------------

def test_tilt_inequality_examples():
    mu = two_point()
    base, tilted, holds = tilt_inequality_check(mu, [0.0, 1.0], [0.0, 1.0], 1.0)
    assert base == 0.5 and tilted == pytest.approx(E / (1 + E), abs=1e-15) and holds
    base, tilted, holds = tilt_inequality_check(mu, [2.0, 2.0], [0.0, 1.0], 3.0)
    assert base == pytest.approx(tilted, abs=1e-15) and holds


def test_tilt_inequality_rejects_anti_monotone():
    with pytest.raises(ValueError):
        tilt_inequality_check(two_point(), [1.0, 0.0], [0.0, 1.0], 1.0)


def test_comonotone_check():
    assert is_comonotone([0, 1, 1, 3], [0, 2, 2, 5])
    assert is_comonotone([1, 1], [0, 5])
    assert not is_comonotone([0, 2, 1], [0, 1, 2])


def test_tilt_inequality_sweep():
    rng = np.random.default_rng(4)
    for _ in range(500):
        mu, f, g = random_comonotone(rng, int(rng.integers(1, 31)), int(rng.integers(1, 4)))
        assert tilt_inequality_check(mu, f, g, float(rng.uniform(0, 10)))[2]


@given(seeds, st.sampled_from([0.1, 1.0, 10.0]))
def test_tilt_inequality_property(seed, eta):
    rng = np.random.default_rng(seed)
    mu, f, g = random_comonotone(rng, int(rng.integers(1, 31)), 2)
    base, tilted, holds = tilt_inequality_check(mu, f, g, eta)
    assert holds and base <= tilted + 1e-12


# --- superior target --------------------------------------------------------------

def test_superior_target_three_points():
    base, improved, holds = superior_target_check(np.full(3, 1 / 3), [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    assert base == pytest.approx(1.0, abs=1e-15) and holds
    assert improved == pytest.approx((E + 2 * E**2) / (1 + E + E**2), abs=1e-12)
    assert improved == pytest.approx(1.5752, abs=5e-5)


def test_superior_target_constant_target():
    base, improved, holds = superior_target_check([0.2, 0.3, 0.5], [1.0, 1.0, 1.0], [0.0, 4.0, 2.0])
    assert base == pytest.approx(improved, abs=1e-15) and holds


def test_superior_target_rejects_violation():
    with pytest.raises(ValueError):
        superior_target_check([0.5, 0.5], [0.0, 1.0], [1.0, 0.0])


def test_superior_target_sweep():
    rng = np.random.default_rng(5)
    for _ in range(500):
        n = int(rng.integers(1, 21))
        prior = rng.dirichlet(np.ones(n))
        l_e = rng.normal(size=n)
        f = np.floor(3 * l_e) + l_e**3
        eta = float(rng.choice([0.1, 1.0, 10.0]))
        assert superior_target_check(prior, l_e, f, eta)[2]


# --- performance difference -------------------------------------------------------

def test_perf_diff_same_policy():
    rng = np.random.default_rng(6)
    env = make_random_mdp(4, 3, rng)
    pi = random_policy(4, 3, rng)
    assert perf_diff_residual(env, pi, pi, 0) < 1e-12


def test_perf_diff_sweep():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n_s, n_a = int(rng.integers(2, 9)), int(rng.integers(2, 5))
        env = make_random_mdp(n_s, n_a, rng, gamma=float(rng.uniform(0.5, 0.99)))
        pi, pi_p = random_policy(n_s, n_a, rng), random_policy(n_s, n_a, rng)
        s0 = int(rng.integers(n_s))
        worst = max(worst, perf_diff_residual(env, pi, pi_p, s0), perf_diff_residual(env, pi_p, pi, s0))
    assert worst < 1e-8


# --- full suite ---------------------------------------------------------------------

def test_suite_passes():
    report = run_suite(np.random.default_rng(0), n_coupling=50, n_tilt=100, n_target=100, n_perf=20)
    assert report["passed"]
    assert report["coupling_max_violating_mass"] == 0.0


def test_suite_catches_a_bad_coupling():
    def product(mu, g):
        return Coupling(np.outer(mu.masses, exp_tilt(mu, g, 1.0).masses))

    report = run_suite(np.random.default_rng(0), n_coupling=20, n_tilt=5, n_target=5, n_perf=2,
                       coupling_fn=product)
    assert not report["passed"] and report["coupling_max_violating_mass"] > 0
