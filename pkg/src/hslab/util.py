"""Shared numeric helpers: seeding, stable reductions, small statistics."""

import math

import numpy as np


def spawn_rngs(master_seed, n):
    """Derive n independent generators from one master seed.

    Uses numpy's splittable SeedSequence so run k is reproducible on its
    own, independent of how many runs are drawn.
    """
    root = np.random.SeedSequence(master_seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in root.spawn(n)]


def rng_for(master_seed, *key):
    """One generator for a (seed, key...) cell; stable across processes."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def pairwise_sum(values):
    """Order-insensitive summation by pairwise reduction.

    Reductions over run results must not depend on scheduling order beyond
    1 ulp, so everything funnels through this instead of ad-hoc sums.
    """
    vals = list(values)
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = []
        for i in range(0, len(vals) - 1, 2):
            nxt.append(vals[i] + vals[i + 1])
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def mean_stderr(samples):
    """(mean, standard error) of a 1-d sample array via pairwise sums."""
    arr = np.asarray(samples, dtype=float)
    n = arr.size
    if n == 0:
        return 0.0, 0.0
    m = pairwise_sum(arr.tolist()) / n
    if n == 1:
        return m, 0.0
    var = pairwise_sum(((arr - m) ** 2).tolist()) / (n - 1)
    return m, math.sqrt(max(var, 0.0) / n)


def kendall_tau(xs, ys):
    """Kendall rank correlation (tau-a); ties count as discordant-neutral."""
    n = len(xs)
    if n < 2 or n != len(ys):
        raise ValueError("need two equal-length sequences with n >= 2")
    conc = disc = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (xs[j] - xs[i]) * (ys[j] - ys[i])
            if s > 0:
                conc += 1
            elif s < 0:
                disc += 1
    return (conc - disc) / (n * (n - 1) / 2)


def normal_cdf(x, mean=0.0, sigma=1.0):
    return 0.5 * (1.0 + math.erf((x - mean) / (sigma * math.sqrt(2.0))))


def ks_statistic(samples, cdf):
    """One-sample Kolmogorov-Smirnov statistic against a scalar CDF."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    f = np.array([cdf(x) for x in xs])
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - f), np.max(f - (grid - 1 / n))))


# Asymptotic two-sided critical values c(alpha) for sqrt(n)*D_n.
_KS_CRIT = {0.10: 1.224, 0.05: 1.358, 0.01: 1.628}


def ks_reject(samples, cdf, level=0.01):
    """True iff the KS test rejects the hypothesized CDF at the given level."""
    n = len(samples)
    return ks_statistic(samples, cdf) > _KS_CRIT[level] / math.sqrt(n)


def sphere_area(d):
    """Surface measure of the unit sphere S^{d-1}."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def ball_volume(m, r):
    """Lebesgue volume of an m-ball of radius r."""
    return math.pi ** (m / 2.0) / math.gamma(m / 2.0 + 1.0) * r**m


def sample_unit_sphere(rng, d, size=None):
    """Uniform points on S^{d-1}."""
    shape = (d,) if size is None else (size, d)
    v = rng.standard_normal(shape)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm
