import math

import numpy as np
import pytest

from hslab.dynamics import Configuration, time_of_impact
from hslab.observables import (
    DegeneratePointError,
    ObservableSpec,
    below_hat_bound,
    check_symmetry,
    constant_level,
    evaluate,
    evaluate_hat,
    hat_bound_squared,
    indicator_level,
    scaled_indicator_level,
    singular_membership,
    weighted_l1_norm,
    within_comparability,
)


def colliding_pair(eps=0.2, offset=0.0, speed=1.0):
    """Two particles that collide exactly once under the forward flow."""
    return Configuration(
        2, eps,
        np.array([[0.0, 0.0], [1.0, offset]]),
        np.array([[speed, 0.0], [0.0, 0.0]]),
    )


def random_valid(rng, s, eps=0.2, spread=1.2):
    while True:
        pos = rng.normal(size=(s, 2)) * spread
        vel = rng.normal(size=(s, 2))
        ok = all(
            np.linalg.norm(pos[i] - pos[j]) > eps * 1.05
            for i in range(s) for j in range(i + 1, s)
        )
        if ok:
            return Configuration(2, eps, pos, vel)


def all_ones_spec(n, cap=4):
    return ObservableSpec({s: constant_level(1) for s in range(1, cap + 1)},
                          n, "dual", level_cap=cap)


class TestDualEvaluate:
    def test_all_ones_data_stays_one(self):
        rng = np.random.default_rng(0)
        spec = all_ones_spec(n=6)
        for s in (1, 2, 3):
            for _ in range(8):
                cfg = random_valid(rng, s)
                val, ledger = evaluate(spec, 0.9, cfg)
                assert val == 1
                assert ledger.reproduce() == val

    def test_single_level_one_particle_free_transport(self):
        spec = ObservableSpec(
            {1: indicator_level(lambda c: float(c.positions[0, 0]) > 1.0)}, 4, "dual")
        cfg = Configuration(2, 0.1, [[0.0, 0.0]], [[1.0, 0.0]])
        val0, _ = evaluate(spec, 0.5, cfg)
        val1, ledger = evaluate(spec, 1.5, cfg)
        assert val0 == 0 and val1 == 1
        assert ledger.jumps == []

    def test_level_cap_enforced(self):
        spec = all_ones_spec(n=9, cap=3)
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError):
            evaluate(spec, 0.1, random_valid(rng, 4))

    def test_grazing_characteristic_raises(self):
        eps = 0.2
        # impact parameter tuned so the contact fires but is nearly tangential
        b_impact = eps * math.sqrt(1.0 - 3e-12)
        cfg = Configuration(
            2, eps,
            np.array([[0.0, 0.0], [1.0, b_impact]]),
            np.array([[1.0, 0.0], [0.0, 0.0]]),
        )
        spec = ObservableSpec({1: constant_level(1), 2: constant_level(1)}, 5, "dual")
        with pytest.raises(DegeneratePointError):
            evaluate(spec, 2.0, cfg)


class TestHatHierarchy:
    def test_zero_below_seed_level(self):
        rng = np.random.default_rng(2)
        cfg = random_valid(rng, 2)
        val, _ = evaluate_hat(3, 2, 8, 1.0, cfg)
        assert val == 0

    def test_one_at_seed_level(self):
        rng = np.random.default_rng(3)
        for s in (1, 2, 3):
            cfg = random_valid(rng, s)
            val, _ = evaluate_hat(s, s, 8, 2.0, cfg)
            assert val == 1

    def test_single_jump_value_against_two_body_oracle(self):
        n = 7
        eps = 0.2
        cfg = colliding_pair(eps=eps)
        # independent two-body oracle for the collision time
        t_c = time_of_impact(cfg.positions[0], cfg.velocities[0],
                             cfg.positions[1], cfg.velocities[1], eps)
        assert t_c is not None
        horizon = t_c + 0.5
        val, ledger = evaluate_hat(1, 2, n, horizon, cfg)
        # one jump, coefficient N-1, all four reduced one-particle values are 1
        assert val == 4 * (n - 1)
        assert len(ledger.jumps) == 1
        assert ledger.jumps[0]["coefficient"] == n - 1
        assert ledger.jumps[0]["subvalues"] == (1, 1, 1, 1)
        assert math.isclose(ledger.collision_times[0], t_c, rel_tol=1e-12)
        assert ledger.integer_coefficient == 4
        assert isinstance(val, int)

    def test_no_collision_gives_zero(self):
        cfg = Configuration(2, 0.2, [[0.0, 0.0], [1.0, 0.0]],
                            [[-1.0, 0.0], [1.0, 0.0]])
        val, _ = evaluate_hat(1, 2, 5, 3.0, cfg)
        assert val == 0

    def test_monotone_in_time(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            s = int(rng.integers(2, 4))
            cfg = random_valid(rng, s, eps=0.3, spread=0.9)
            j = int(rng.integers(1, s))
            vals = [evaluate_hat(j, s, 9, t, cfg)[0] for t in (0.4, 0.9, 1.7)]
            assert vals[0] <= vals[1] <= vals[2]

    def test_divisibility_exact(self):
        rng = np.random.default_rng(5)
        n = 11
        seen_nonzero = False
        for _ in range(40):
            s = int(rng.integers(2, 4))
            j = int(rng.integers(1, s))
            cfg = random_valid(rng, s, eps=0.35, spread=0.8)
            val, ledger = evaluate_hat(j, s, n, 1.2, cfg)
            prod = math.prod(range(n - s + 1, n - j + 1))
            assert val % prod == 0
            assert ledger.reproduce() == val   # exact integer decomposition
            if val:
                seen_nonzero = True
                assert ledger.integer_coefficient == val // prod
        assert seen_nonzero

    def test_upper_bound_loose(self):
        rng = np.random.default_rng(6)
        n = 9
        for _ in range(20):
            s = int(rng.integers(2, 4))
            j = int(rng.integers(1, s))
            cfg = random_valid(rng, s, eps=0.35, spread=0.8)
            val, _ = evaluate_hat(j, s, n, 1.5, cfg)
            assert below_hat_bound(val, j, s, n)
            assert val * val < hat_bound_squared(j, s, n)  # strictly below

    def test_comparability(self):
        rng = np.random.default_rng(7)
        n, j, s = 10, 1, 2
        vals = []
        while len(vals) < 6:
            cfg = random_valid(rng, s, eps=0.4, spread=0.7)
            v, _ = evaluate_hat(j, s, n, 1.5, cfg)
            if v:
                vals.append(v)
        for a in vals:
            for b in vals:
                assert within_comparability(a, b, j, s)


class TestComparisonAndEnvelopes:
    def _random_data(self, rng, cap, n):
        hat_levels = {}
        dual_levels = {}
        for s in range(1, cap + 1):
            c = int(rng.integers(1, 4))
            hat_levels[s] = constant_level(c)
            sign = -1 if rng.random() < 0.5 else 1
            dual_levels[s] = constant_level(sign * int(rng.integers(0, c + 1)))
        return (ObservableSpec(dual_levels, n, "dual", level_cap=cap),
                ObservableSpec(hat_levels, n, "hat", level_cap=cap))

    def test_comparison_sandwich_exact(self):
        rng = np.random.default_rng(8)
        n = 8
        for trial in range(25):
            dual_spec, hat_spec_ = self._random_data(rng, 3, n)
            s = int(rng.integers(1, 4))
            cfg = random_valid(rng, s, eps=0.3, spread=0.9)
            t = float(rng.uniform(0.1, 1.5))
            dv, _ = evaluate(dual_spec, t, cfg)
            hv, _ = evaluate(hat_spec_, t, cfg)
            assert abs(dv) <= hv

    def test_envelope_sandwich_exact(self):
        rng = np.random.default_rng(9)
        n = 8
        cap = 3
        for trial in range(25):
            lower_levels, dual_levels, upper_levels = {}, {}, {}
            for s in range(1, cap + 1):
                lo = int(rng.integers(-3, 1))
                hi = int(rng.integers(0, 4))
                mid = int(rng.integers(lo, hi + 1))
                lower_levels[s] = constant_level(lo)
                dual_levels[s] = constant_level(mid)
                upper_levels[s] = constant_level(hi)
            upper = ObservableSpec(upper_levels, n, "upper_envelope",
                                   companion=lower_levels, level_cap=cap)
            lower = ObservableSpec(lower_levels, n, "lower_envelope",
                                   companion=upper_levels, level_cap=cap)
            dual = ObservableSpec(dual_levels, n, "dual", level_cap=cap)
            s = int(rng.integers(1, cap + 1))
            cfg = random_valid(rng, s, eps=0.3, spread=0.9)
            t = float(rng.uniform(0.1, 1.2))
            lo_v, _ = evaluate(lower, t, cfg)
            mid_v, _ = evaluate(dual, t, cfg)
            hi_v, _ = evaluate(upper, t, cfg)
            assert lo_v <= mid_v <= hi_v

    def test_hat_equals_upper_envelope_of_negated_pair(self):
        # upper envelope with companion = negated data evolves exactly like hat
        rng = np.random.default_rng(10)
        n = 7
        levels = {1: constant_level(2), 2: constant_level(1)}
        neg = {1: constant_level(-2), 2: constant_level(-1)}
        upper = ObservableSpec(levels, n, "upper_envelope", companion=neg, level_cap=3)
        hat = ObservableSpec(levels, n, "hat", level_cap=3)
        for _ in range(10):
            cfg = random_valid(rng, 2, eps=0.35, spread=0.8)
            t = float(rng.uniform(0.2, 1.5))
            uv, _ = evaluate(upper, t, cfg)
            hv, _ = evaluate(hat, t, cfg)
            assert uv == hv


class TestSingularMembership:
    def test_k_zero_always_member(self):
        rng = np.random.default_rng(11)
        cfg = random_valid(rng, 3)
        assert singular_membership(cfg, 0, 1.0, 9)

    def test_no_collision_not_member(self):
        cfg = Configuration(2, 0.2, [[0.0, 0.0], [1.0, 0.0]],
                            [[-1.0, 0.0], [1.0, 0.0]])
        assert not singular_membership(cfg, 1, 5.0, 9)

    def test_collision_inside_horizon_is_member(self):
        cfg = colliding_pair()
        assert singular_membership(cfg, 1, 2.0, 9)
        assert not singular_membership(cfg, 1, 0.1, 9)  # contact after horizon

    def test_monotone_in_horizon(self):
        rng = np.random.default_rng(12)
        n = 9
        for _ in range(40):
            s = int(rng.integers(2, 4))
            k = int(rng.integers(1, s))
            cfg = random_valid(rng, s, eps=0.3, spread=0.8)
            m1 = singular_membership(cfg, k, 0.7, n)
            m2 = singular_membership(cfg, k, 1.8, n)
            assert (not m1) or m2


class TestRestartStability:
    def test_restart_supported_on_grown_singular_set(self):
        n = 8
        k = 1
        s1 = 2
        horizon = 0.8
        t_fwd = 0.6

        def member(cfg):
            return singular_membership(cfg, k, horizon, n)

        spec = ObservableSpec(
            {s1: scaled_indicator_level(n**k, member)}, n, "hat", level_cap=3)

        rng = np.random.default_rng(13)
        outside_checked = 0
        for _ in range(25):
            cfg = random_valid(rng, 3, eps=0.3, spread=0.9)
            grown = singular_membership(cfg, k + 3 - s1, horizon + t_fwd, n)
            if not grown:
                val, _ = evaluate(spec, t_fwd, cfg)
                assert val == 0
                outside_checked += 1
        assert outside_checked > 0

    def test_restart_vanishes_below_seed(self):
        n = 8
        spec = ObservableSpec(
            {2: scaled_indicator_level(n, lambda c: singular_membership(c, 1, 0.8, n))},
            n, "hat", level_cap=3)
        cfg = Configuration(2, 0.2, [[0.0, 0.0]], [[1.0, 0.0]])
        val, _ = evaluate(spec, 0.5, cfg)
        assert val == 0


class TestSymmetryProbe:
    def test_symmetric_data_passes(self):
        rng = np.random.default_rng(14)
        spec = ObservableSpec(
            {2: indicator_level(lambda c: bool(np.max(np.abs(c.velocities)) < 2.0))},
            6, "dual")
        assert check_symmetry(spec, lambda r, s: random_valid(r, s), rng)

    def test_asymmetric_data_caught(self):
        rng = np.random.default_rng(15)
        spec = ObservableSpec(
            {2: indicator_level(lambda c: bool(c.velocities[0, 0] > 0))}, 6, "dual")
        with pytest.raises(ValueError):
            check_symmetry(spec, lambda r, s: random_valid(r, s), rng)


class TestWeightedNorm:
    def test_zero_spec(self):
        spec = ObservableSpec({1: constant_level(0)}, 4, "dual")
        est, err, info = weighted_l1_norm(spec, 1.0, 0.5, 0.3, 64, seed=1)
        assert est == 0.0 and err == 0.0

    def test_single_level_gaussian_closed_form(self):
        # phi = 1 on the one-particle space; with the (E+I) weight the norm is
        # exp(-mu) (2 pi / beta)^d
        beta, mu = 1.3, 0.4
        spec = ObservableSpec({1: constant_level(1)}, 4, "dual", level_cap=1)
        est, err, _ = weighted_l1_norm(spec, beta, mu, 0.7, 4000, seed=2,
                                       max_level=1)
        target = math.exp(-mu) * (2 * math.pi / beta) ** 2
        assert abs(est - target) <= 3 * max(err, 1e-9)

    def test_energy_only_weight_with_compact_position_data(self):
        # phi = indicator of a position disk times a velocity disk at level 1;
        # with the energy-only weight the norm is exp(-mu) * disk area *
        # int_{|v|<b} exp(-beta |v|^2 / 2) dv, all in closed form
        beta, mu = 1.0, 0.2
        a, b = 1.1, 1.4

        def member(c):
            return bool(np.linalg.norm(c.positions[0]) < a
                        and np.linalg.norm(c.velocities[0]) < b)

        spec = ObservableSpec({1: indicator_level(member)}, 4, "dual",
                              level_cap=1)
        est, err, _ = weighted_l1_norm(spec, beta, mu, 0.0, 6000, seed=21,
                                       include_inertia=False, max_level=1)
        vel_mass = (2 * math.pi / beta) * (1 - math.exp(-beta * b * b / 2))
        target = math.exp(-mu) * math.pi * a * a * vel_mass
        assert abs(est - target) <= 3 * max(err, 1e-9)

    def test_theorem_local_bound(self):
        # norm at t <= T_L bounded by the data norm at (beta/2, mu - 1)
        n = 3
        spec = ObservableSpec(
            {1: indicator_level(lambda c: bool(np.linalg.norm(c.velocities) < 1.5))},
            n, "dual", level_cap=3)
        beta, mu = 1.0, 0.0
        t_small = 0.3
        lhs, lhs_err, _ = weighted_l1_norm(spec, beta, mu, t_small, 2400, seed=3,
                                           max_level=3)
        rhs, rhs_err, _ = weighted_l1_norm(spec, beta / 2, mu - 1.0, 0.0, 2400,
                                           seed=4, max_level=3)
        assert lhs <= rhs + 3 * math.hypot(lhs_err, rhs_err)
