"""Initial measures, conditioned N-particle sampling, and weak marginal statistics.

One-particle densities are Gaussian mixtures plus an optional flat ball bump
(the non-uniformly-converging family used by the chaos experiment). The
N-particle state is the tensor product conditioned on hard-sphere exclusion,
drawn exactly by rejection. Marginals are only ever estimated weakly, by
averaging test functions over s-tuples of ensemble members.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dynamics import Configuration, flow, pair_indices
from .util import ball_volume, mean_stderr, pairwise_sum, rng_for


class DensityTooConcentratedError(RuntimeError):
    """Rejection acceptance collapsed; diameter too large for this N."""


def _lower_gamma_reg(a, x):
    """Regularized lower incomplete gamma P(a, x) by power series."""
    if x <= 0.0:
        return 0.0
    if x > a + 40.0 + 10.0 * math.sqrt(a):
        return 1.0
    term = 1.0 / a
    total = term
    n = 0
    while True:
        n += 1
        term *= x / (a + n)
        total += term
        if term < total * 1e-16 or n > 10_000:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gaussian_ball_mass(m, center_norm, radius):
    """Mass of the standard m-dim Gaussian in a ball: noncentral chi-square CDF."""
    lam = center_norm**2
    x = radius**2
    total = 0.0
    weight = math.exp(-lam / 2.0)
    k = 0
    while True:
        total += weight * _lower_gamma_reg(m / 2.0 + k, x / 2.0)
        k += 1
        weight *= (lam / 2.0) / k
        if weight < 1e-18 and k > lam:
            break
    return total


@dataclass
class GaussianComponent:
    weight: float
    x_center: np.ndarray
    x_sigma: float
    v_center: np.ndarray
    v_sigma: float


@dataclass
class DensitySpec:
    """One-particle phase-space density: Gaussian mixture plus optional bump.

    The bump is a flat indicator of height `bump_height` on a ball of radius
    `bump_radius` centered at `bump_center` in (x, v); the whole density is
    renormalized to unit mass. `bound` gives (beta0, mu0) with
    f(z) <= exp(-beta0 |z|^2 / 2) exp(-mu0) pointwise.
    """

    kind: str
    dim: int
    components: list
    bump_center: np.ndarray = None
    bump_radius: float = 0.0
    bump_height: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")

    @property
    def bump_mass(self):
        if self.bump_radius <= 0.0:
            return 0.0
        return self.bump_height * ball_volume(2 * self.dim, self.bump_radius)

    def pdf(self, x, v):
        """Density at phase points; x, v of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.zeros(x.shape[:-1])
        d = self.dim
        for c in self.components:
            qx = np.sum((x - c.x_center) ** 2, axis=-1) / c.x_sigma**2
            qv = np.sum((v - c.v_center) ** 2, axis=-1) / c.v_sigma**2
            norm = (2 * math.pi * c.x_sigma**2) ** (-d / 2) * \
                   (2 * math.pi * c.v_sigma**2) ** (-d / 2)
            out = out + c.weight * norm * np.exp(-0.5 * (qx + qv))
        if self.bump_radius > 0.0:
            z2 = (np.sum((x - self.bump_center[:d]) ** 2, axis=-1)
                  + np.sum((v - self.bump_center[d:]) ** 2, axis=-1))
            out = out + self.bump_height * (z2 < self.bump_radius**2)
        return out / (1.0 + self.bump_mass)

    def sample(self, rng, n):
        """n exact draws; returns (positions, velocities) of shape (n, d)."""
        d = self.dim
        pos = np.empty((n, d))
        vel = np.empty((n, d))
        m = self.bump_mass
        p_bump = m / (1.0 + m)
        from_bump = rng.random(n) < p_bump
        k_bump = int(np.sum(from_bump))
        if k_bump:
            z = rng.standard_normal((k_bump, 2 * d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            r = self.bump_radius * rng.random(k_bump) ** (1.0 / (2 * d))
            ball = self.bump_center[None, :] + z * r[:, None]
            pos[from_bump] = ball[:, :d]
            vel[from_bump] = ball[:, d:]
        rest = ~from_bump
        k_rest = int(np.sum(rest))
        if k_rest:
            weights = np.array([c.weight for c in self.components])
            choice = rng.choice(len(self.components), size=k_rest, p=weights)
            px = np.empty((k_rest, d))
            pv = np.empty((k_rest, d))
            for ci, c in enumerate(self.components):
                sel = choice == ci
                kk = int(np.sum(sel))
                if kk:
                    px[sel] = c.x_center + c.x_sigma * rng.standard_normal((kk, d))
                    pv[sel] = c.v_center + c.v_sigma * rng.standard_normal((kk, d))
            pos[rest] = px
            vel[rest] = pv
        return pos, vel

    def mass_quadrature(self):
        """Total mass by per-coordinate Gauss-Hermite plus exact bump volume."""
        nodes, weights = np.polynomial.hermite_e.hermegauss(64)
        gauss_mass = 0.0
        for c in self.components:
            one_dim = float(np.sum(weights)) / math.sqrt(2 * math.pi)
            gauss_mass += c.weight * one_dim ** (2 * self.dim)
        return (gauss_mass + self.bump_mass) / (1.0 + self.bump_mass)

    def envelope_bound(self):
        """(beta0, mu0) with f(z) <= exp(-beta0 |z|^2 / 2 - mu0) everywhere."""
        beta = min(
            min(0.5 / c.x_sigma**2 for c in self.components),
            min(0.5 / c.v_sigma**2 for c in self.components),
        )
        log_c = -math.inf
        for c in self.components:
            d = self.dim
            norm = -d / 2 * math.log(2 * math.pi * c.x_sigma**2) \
                   - d / 2 * math.log(2 * math.pi * c.v_sigma**2)
            shift = (np.dot(c.x_center, c.x_center) / (2 * c.x_sigma**2)
                     + np.dot(c.v_center, c.v_center) / (2 * c.v_sigma**2))
            log_c = max(log_c, norm + shift)
        const = (math.exp(log_c) + self._bump_env(beta)) / (1.0 + self.bump_mass)
        return beta, -math.log(const)

    def _bump_env(self, beta):
        if self.bump_radius <= 0.0:
            return 0.0
        reach = float(np.linalg.norm(self.bump_center)) + self.bump_radius
        return self.bump_height * math.exp(0.5 * beta * reach**2)

    def tensor(self, config):
        """Product of one-particle densities over the configuration's particles."""
        vals = self.pdf(config.positions, config.velocities)
        return float(np.prod(vals))

    def l1_distance_to_reference(self):
        """Closed-form L1 distance to the bump-free reference density.

        Only defined for the example family: with bump mass m and Gaussian
        mass F_B inside the bump ball, the distance is 2 m (1 - F_B) / (1 + m).
        """
        if self.kind != "example_family":
            raise ValueError("closed-form distance only applies to the example family")
        m = self.bump_mass
        f_b = gaussian_ball_mass(2 * self.dim,
                                 float(np.linalg.norm(self.bump_center)),
                                 self.bump_radius)
        return 2.0 * m * (1.0 - f_b) / (1.0 + m)


def gaussian_product(dim=2, x_center=None, x_sigma=1.0, v_center=None, v_sigma=1.0,
                     components=None):
    """Product-Gaussian density, or an explicit mixture of such components."""
    if components is None:
        components = [GaussianComponent(
            1.0,
            np.zeros(dim) if x_center is None else np.asarray(x_center, float),
            x_sigma,
            np.zeros(dim) if v_center is None else np.asarray(v_center, float),
            v_sigma,
        )]
    return DensitySpec("gaussian_product", dim, components)


def schwartz_reference(dim=2):
    """The fixed smooth reference density with unit Gaussian envelope rate."""
    return DensitySpec("schwartz_reference", dim,
                       [GaussianComponent(1.0, np.zeros(dim), 1.0, np.zeros(dim), 1.0)])


def example_family(n_particles, dim=2, c0=0.5, h0=0.25, bump_center=None):
    """Reference density plus a flat bump of mass h0*c0/log N on a shrinking ball.

    Converges to the reference in L1 like 1/log N but keeps a pointwise gap
    of at least h0/2 on the bump, so it never converges uniformly.
    """
    if n_particles < 2:
        raise ValueError("example family needs N >= 2")
    if bump_center is None:
        bump_center = np.concatenate([
            np.array([0.6] + [0.0] * (dim - 1)),
            np.array([0.6] + [0.0] * (dim - 1)),
        ])
    vol = c0 / math.log(n_particles)
    radius = (vol / ball_volume(2 * dim, 1.0)) ** (1.0 / (2 * dim))
    spec = DensitySpec(
        "example_family", dim,
        [GaussianComponent(1.0, np.zeros(dim), 1.0, np.zeros(dim), 1.0)],
        bump_center=np.asarray(bump_center, float),
        bump_radius=radius,
        bump_height=h0,
        meta={"N": n_particles, "c0": c0, "h0": h0},
    )
    return spec


@dataclass
class Scaling:
    """Boltzmann-Grad triple (N, eps, ell) with N eps^(d-1) ell = 1 exactly."""

    n_particles: int
    eps: Fraction
    dim: int

    @property
    def ell(self):
        return 1 / (self.n_particles * self.eps ** (self.dim - 1))

    def check(self):
        assert self.n_particles * self.eps ** (self.dim - 1) * self.ell == 1
        return True


@dataclass
class EnsembleSpec:
    """Recipe for an ensemble: density, scaling, run count, master seed."""

    density: DensitySpec
    n_particles: int
    eps: Fraction
    runs: int
    master_seed: int

    @property
    def scaling(self):
        return Scaling(self.n_particles, Fraction(self.eps), self.density.dim)

    def build(self, trial_window=10**6):
        samples = []
        for r in range(self.runs):
            cfg = sample_conditioned(self.density, self.n_particles,
                                     float(self.eps), (self.master_seed, r),
                                     trial_window=trial_window)
            samples.append(((self.master_seed, r), cfg))
        return EnsembleSample(runs=samples, scaling=self.scaling)

    def to_manifest(self):
        return "\n".join([
            f"N = {self.n_particles}",
            f"ell = {self.scaling.ell}",
            f"d = {self.density.dim}",
            f"density = {self.density.kind}",
            f"runs = {self.runs}",
            f"master_seed = {self.master_seed}",
        ]) + "\n"


@dataclass
class EnsembleSample:
    runs: list
    scaling: Scaling


@dataclass
class TupleStatistic:
    order: int
    estimate: float
    stderr: float
    samples: int


def sample_conditioned(spec, n_particles, eps, seed, trial_window=10**6):
    """One exact draw of the exclusion-conditioned tensor product.

    Rejection on the product measure: draw N i.i.d. one-particle samples and
    accept iff all pairwise distances exceed the diameter. Deterministic
    given the seed.
    """
    rng = rng_for(*(seed if isinstance(seed, tuple) else (seed,)))
    attempts = 0
    while True:
        pos, vel = spec.sample(rng, n_particles)
        attempts += 1
        if _exclusion_ok(pos, eps):
            return Configuration(spec.dim, eps, pos, vel)
        if attempts >= trial_window:
            raise DensityTooConcentratedError(
                f"no accepted configuration in {attempts} trials "
                f"(acceptance < {1.0 / trial_window:.1e}); eps too large for N"
            )


def _exclusion_ok(pos, eps):
    n = pos.shape[0]
    if n < 2:
        return True
    if n <= 512:
        ii, jj = pair_indices(n)
        dx = pos[ii] - pos[jj]
        return bool(np.all(np.einsum("pd,pd->p", dx, dx) >= eps * eps))
    eps2 = eps * eps
    for i in range(0, n, 256):
        blk = pos[i : i + 256]
        d2 = np.sum((blk[:, None, :] - pos[None, i:, :]) ** 2, axis=-1)
        rows = np.arange(blk.shape[0])
        d2[rows, rows] = np.inf
        if np.min(d2) < eps2:
            return False
    return True


def normalization_estimate(spec, n_particles, eps, trials, seed=0):
    """Monte Carlo acceptance frequency of the exclusion event, with stderr."""
    rng = rng_for(seed, n_particles)
    hits = 0
    for _ in range(trials):
        pos, _ = spec.sample(rng, n_particles)
        hits += _exclusion_ok(pos, eps)
    p = hits / trials
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / trials)


def statistics_csv(entries):
    """CSV body 't, statistic_name, estimate, stderr, runs' for tuple stats."""
    lines = ["t,statistic_name,estimate,stderr,runs"]
    for t, name, stat in entries:
        lines.append(f"{float(t)!r},{name},{stat.estimate!r},"
                     f"{stat.stderr!r},{stat.samples}")
    return "\n".join(lines) + "\n"


def estimate_tuple_statistic(ensemble, t, test, s, batch_eval=None,
                             max_events=10**6):
    """Unbiased weak estimate of the order-s marginal against a test function.

    Flows each run to time t, then averages the test over ordered distinct
    s-tuples with weight (N-s)!/N!, which by interchange symmetry of the
    ensemble law estimates the integral of test * f^(s)(t).
    """
    n = ensemble.scaling.n_particles
    if s > n:
        raise ValueError(f"tuple order {s} exceeds particle count {n}")
    per_run = []
    for _seed, cfg in ensemble.runs:
        state = flow(cfg, t, max_events=max_events).final if t != 0.0 else cfg
        per_run.append(_tuple_average(state, test, s, batch_eval))
    est, err = mean_stderr(per_run)
    return TupleStatistic(order=s, estimate=est, stderr=err, samples=len(per_run))


def _tuple_average(state, test, s, batch_eval):
    n = state.count
    if s == 1:
        if batch_eval is not None:
            vals = np.asarray(batch_eval(state.positions, state.velocities), float)
            return pairwise_sum(vals.tolist()) / n
        vals = [test(_sub(state, (i,))) for i in range(n)]
        return pairwise_sum(vals) / n
    from itertools import permutations
    if n > 32:
        raise ValueError("ordered-tuple enumeration is exponential; "
                         f"s >= 2 supported up to N = 32, got N = {n}")
    weight = 1.0
    for q in range(s):
        weight /= (n - q)
    vals = [test(_sub(state, idx)) for idx in permutations(range(n), s)]
    return pairwise_sum(vals) * weight


def _sub(state, idx):
    idx = list(idx)
    return Configuration(state.dim, state.diameter,
                         state.positions[idx], state.velocities[idx])
