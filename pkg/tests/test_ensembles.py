import math
from fractions import Fraction

import numpy as np
import pytest

from hslab.dynamics import energy, flow, pair_indices
from hslab.ensembles import (
    DensityTooConcentratedError,
    EnsembleSpec,
    Scaling,
    estimate_tuple_statistic,
    example_family,
    gaussian_ball_mass,
    gaussian_product,
    normalization_estimate,
    sample_conditioned,
    schwartz_reference,
)
from hslab.util import ks_reject, normal_cdf


def separated_bumps(dim=2, gap=12.0):
    from hslab.ensembles import GaussianComponent
    comps = [
        GaussianComponent(0.5, np.array([-gap / 2, 0.0]), 0.5, np.zeros(dim), 1.0),
        GaussianComponent(0.5, np.array([gap / 2, 0.0]), 0.5, np.zeros(dim), 1.0),
    ]
    return gaussian_product(dim=dim, components=comps)


class TestDensitySpec:
    def test_mass_quadrature_unit(self):
        for spec in (gaussian_product(), schwartz_reference(), example_family(64)):
            assert abs(spec.mass_quadrature() - 1.0) <= 1e-6

    def test_pdf_nonnegative(self):
        spec = example_family(128)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 2))
        v = rng.normal(size=(100, 2))
        assert np.all(spec.pdf(x, v) >= 0.0)

    def test_envelope_bound_holds(self):
        rng = np.random.default_rng(1)
        for spec in (gaussian_product(x_sigma=0.7), example_family(32)):
            beta0, mu0 = spec.envelope_bound()
            x = rng.normal(size=(500, 2)) * 2.0
            v = rng.normal(size=(500, 2)) * 2.0
            z2 = np.sum(x**2, axis=1) + np.sum(v**2, axis=1)
            env = np.exp(-0.5 * beta0 * z2 - mu0)
            assert np.all(spec.pdf(x, v) <= env * (1 + 1e-12))

    def test_pdf_matches_sampler(self):
        # sampler and pdf agree: MC mass of a box under the sampler matches
        # the pdf integrated over that box by quadrature
        spec = example_family(64)
        rng = np.random.default_rng(2)
        pos, vel = spec.sample(rng, 200_000)
        box = ((0.0, 1.2), (-0.6, 0.6))
        inside = ((pos[:, 0] > box[0][0]) & (pos[:, 0] < box[0][1])
                  & (pos[:, 1] > box[1][0]) & (pos[:, 1] < box[1][1])
                  & (vel[:, 0] > box[0][0]) & (vel[:, 0] < box[0][1])
                  & (vel[:, 1] > box[1][0]) & (vel[:, 1] < box[1][1]))
        p_mc = float(np.mean(inside))
        gx = np.linspace(box[0][0], box[0][1], 25)
        gy = np.linspace(box[1][0], box[1][1], 25)
        xs, ys, us, ws = np.meshgrid(gx, gy, gx, gy, indexing="ij")
        pts_x = np.stack([xs.ravel(), ys.ravel()], axis=-1)
        pts_v = np.stack([us.ravel(), ws.ravel()], axis=-1)
        vol_cell = ((gx[1] - gx[0]) * (gy[1] - gy[0])) ** 2
        p_quad = float(np.sum(spec.pdf(pts_x, pts_v)) * vol_cell)
        assert abs(p_mc - p_quad) < 0.01


class TestExampleFamily:
    def test_l1_distance_tends_to_zero(self):
        dists = [example_family(n).l1_distance_to_reference()
                 for n in (2**7, 2**9, 2**11, 2**13)]
        assert all(d2 < d1 for d1, d2 in zip(dists, dists[1:]))
        for n, dist in zip((2**7, 2**9, 2**11, 2**13), dists):
            spec = example_family(n)
            m = spec.bump_mass
            assert dist <= 2 * m + 1e-12      # 2 h0 c0 / log N plus renorm
        # Monte Carlo cross-check of the closed form at one N
        spec = example_family(2**9)
        f0 = schwartz_reference()
        rng = np.random.default_rng(3)
        x = rng.normal(size=(400_000, 2)) * 1.6
        v = rng.normal(size=(400_000, 2)) * 1.6
        q = np.exp(-(np.sum(x**2, 1) + np.sum(v**2, 1)) / (2 * 1.6**2))
        q = q / ((2 * math.pi * 1.6**2) ** 2)
        vals = np.abs(spec.pdf(x, v) - f0.pdf(x, v)) / q
        mc = float(np.mean(vals))
        err = float(np.std(vals) / math.sqrt(len(vals)))
        assert abs(mc - spec.l1_distance_to_reference()) <= 3 * err

    def test_sup_gap_at_least_half_height(self):
        for n in (2**7, 2**12, 2**20):
            spec = example_family(n)
            f0 = schwartz_reference()
            center = spec.bump_center
            gap = (spec.pdf(center[:2], center[2:]) - f0.pdf(center[:2], center[2:]))
            assert gap >= spec.meta["h0"] / 2
            # the infimum over the whole bump ball also clears h0/2:
            # (h0 - m * sup_B f0) / (1 + m) with sup_B f0 at the nearest point
            m = spec.bump_mass
            nearest = max(np.linalg.norm(spec.bump_center)
                          - spec.bump_radius, 0.0)
            sup_f0 = math.exp(-0.5 * nearest**2) / (2 * math.pi) ** 2
            inf_gap = (spec.meta["h0"] - m * sup_f0) / (1 + m)
            assert inf_gap >= spec.meta["h0"] / 2

    def test_unit_mass(self):
        assert abs(example_family(2**8).mass_quadrature() - 1.0) <= 1e-6

    def test_ball_mass_against_mc(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((400_000, 4))
        center = np.array([0.6, 0.0, 0.6, 0.0])
        for r in (0.3, 0.7, 1.5):
            p_mc = float(np.mean(np.sum((z - center) ** 2, axis=1) < r * r))
            p = gaussian_ball_mass(4, float(np.linalg.norm(center)), r)
            assert abs(p - p_mc) < 4e-3


class TestScaling:
    def test_identity_exact(self):
        sc = Scaling(3, Fraction(1, 10), 2)
        assert sc.check()
        assert sc.ell == Fraction(10, 3)

    def test_identity_exact_d3(self):
        sc = Scaling(1000, Fraction(1, 100), 3)
        assert sc.check()
        assert sc.ell == Fraction(10)


class TestSampleConditioned:
    def test_single_particle_marginal_law(self):
        spec = gaussian_product(x_sigma=0.8, v_sigma=1.3)
        draws = np.array([
            sample_conditioned(spec, 1, 0.1, (99, k)).positions[0, 0]
            for k in range(10_000)
        ])
        assert not ks_reject(draws, lambda t: normal_cdf(t, 0.0, 0.8), level=0.01)
        vels = np.array([
            sample_conditioned(spec, 1, 0.1, (99, k)).velocities[0, 1]
            for k in range(0, 10_000, 2)
        ])
        assert not ks_reject(vels, lambda t: normal_cdf(t, 0.0, 1.3), level=0.01)

    def test_two_separated_bumps_accept(self):
        # overlap probability is bounded by the contact-shell integral:
        # both particles landing within eps needs both in the same bump and
        # within eps of each other; the direct integral is << 1e-3
        spec = separated_bumps()
        est, err = normalization_estimate(spec, 2, 0.05, trials=4000, seed=5)
        assert est >= 0.999

    def test_exclusion_always_holds(self):
        spec = gaussian_product()
        eps = 0.2
        ii, jj = pair_indices(8)
        for k in range(50):
            cfg = sample_conditioned(spec, 8, eps, (7, k))
            dx = cfg.positions[ii] - cfg.positions[jj]
            assert np.all(np.einsum("pd,pd->p", dx, dx) >= eps * eps)

    def test_deterministic_given_seed(self):
        spec = gaussian_product()
        a = sample_conditioned(spec, 4, 0.1, (11, 0))
        b = sample_conditioned(spec, 4, 0.1, (11, 0))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.velocities, b.velocities)

    def test_too_concentrated_raises(self):
        spec = gaussian_product(x_sigma=0.01)
        with pytest.raises(DensityTooConcentratedError):
            sample_conditioned(spec, 16, 1.5, 13, trial_window=500)


class TestNormalization:
    def test_single_particle_exact_one(self):
        est, err = normalization_estimate(gaussian_product(), 1, 0.3, trials=100)
        assert est == 1.0 and err == 0.0

    def test_monotone_in_eps(self):
        spec = gaussian_product()
        vals = [normalization_estimate(spec, 12, e, trials=3000, seed=17)
                for e in (0.05, 0.15, 0.3)]
        for (e1, s1), (e2, s2) in zip(vals, vals[1:]):
            assert e2 <= e1 + 2 * math.sqrt(s1**2 + s2**2)


def small_ensemble(n=6, eps=0.05, runs=60, seed=23):
    spec = EnsembleSpec(gaussian_product(), n, Fraction(eps).limit_denominator(10**6),
                        runs, seed)
    return spec.build()


class TestTupleStatistic:
    def test_constant_test_is_exactly_one(self):
        ens = small_ensemble()
        for t in (0.0, 0.4):
            st = estimate_tuple_statistic(ens, t, lambda c: 1.0, 1)
            assert st.estimate == 1.0 and st.stderr == 0.0

    def test_energy_time_invariant(self):
        ens = small_ensemble(runs=80)
        st0 = estimate_tuple_statistic(ens, 0.0, energy, 1)
        st1 = estimate_tuple_statistic(ens, 0.7, energy, 1)
        assert abs(st1.estimate - st0.estimate) <= 3 * math.hypot(st0.stderr, st1.stderr)

    def test_half_space_indicator_matches_quadrature(self):
        # oracle: P(v_x > 0.3) for a standard normal velocity coordinate
        ens = small_ensemble(n=8, runs=150, seed=29)
        target = 1.0 - normal_cdf(0.3, 0.0, 1.0)
        st = estimate_tuple_statistic(
            ens, 0.0, lambda c: float(c.velocities[0, 0] > 0.3), 1)
        assert abs(st.estimate - target) <= 3 * max(st.stderr, 1e-12)

    def test_permutation_symmetry_exact(self):
        ens = small_ensemble(n=4, runs=12, seed=31)

        def t_asym(c):
            return float(c.velocities[0, 0] + 2.0 * c.velocities[1, 0])

        def t_swapped(c):
            return float(c.velocities[1, 0] + 2.0 * c.velocities[0, 0])

        a = estimate_tuple_statistic(ens, 0.0, t_asym, 2)
        b = estimate_tuple_statistic(ens, 0.0, t_swapped, 2)
        assert a.estimate == pytest.approx(b.estimate, rel=1e-12)

    def test_pushforward_consistency(self):
        # flowing inside the estimator equals pre-flowing the ensemble
        ens = small_ensemble(n=5, eps=0.1, runs=40, seed=37)
        test = lambda c: math.tanh(float(c.positions[0, 0]))
        direct = estimate_tuple_statistic(ens, 0.8, test, 1)
        from hslab.ensembles import EnsembleSample
        pre = EnsembleSample(
            runs=[(s, flow(cfg, 0.5).final) for s, cfg in ens.runs],
            scaling=ens.scaling,
        )
        split = estimate_tuple_statistic(pre, 0.3, test, 1)
        assert abs(direct.estimate - split.estimate) <= 1e-9 + 3 * math.hypot(
            direct.stderr, split.stderr)

    def test_batch_eval_matches_scalar(self):
        ens = small_ensemble(n=6, runs=10, seed=41)
        st_scalar = estimate_tuple_statistic(
            ens, 0.0, lambda c: float(c.positions[0, 0] ** 2), 1)
        st_batch = estimate_tuple_statistic(
            ens, 0.0, None, 1, batch_eval=lambda p, v: p[:, 0] ** 2)
        assert st_scalar.estimate == pytest.approx(st_batch.estimate, rel=1e-12)


class TestStatisticsCsv:
    def test_schema_and_round_trip(self):
        from hslab.ensembles import TupleStatistic, statistics_csv
        body = statistics_csv([
            (0.0, "energy", TupleStatistic(1, 1.9812345, 0.01, 40)),
            (0.5, "halfspace", TupleStatistic(1, 0.382, 0.004, 40)),
        ])
        lines = body.strip().splitlines()
        assert lines[0] == "t,statistic_name,estimate,stderr,runs"
        cols = lines[1].split(",")
        assert float(cols[0]) == 0.0
        assert cols[1] == "energy"
        assert float(cols[2]) == 1.9812345
        assert int(cols[4]) == 40


class TestManifest:
    def test_manifest_fields(self):
        spec = EnsembleSpec(gaussian_product(), 16, Fraction(1, 20), 4, 99)
        text = spec.to_manifest()
        assert "N = 16" in text
        assert "ell = 5/4" in text
        assert "density = gaussian_product" in text
        assert "master_seed = 99" in text
