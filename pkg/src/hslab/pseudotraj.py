"""Variable-particle-number backward trajectories and what they parametrize.

A pseudo-trajectory starts from a root configuration at the top of a time
horizon, flows backward, and adjoins particles at prescribed times in
contact with chosen parents; whenever the adjoined pair is post-collisional
(positive normal relative velocity) the collisional change of variables is
applied so the pair separates into the past. The product of the signed
normal relative velocities is the iterated collision kernel, and the map
from (root, times, velocities, impact parameters) to the endpoint carries
Jacobian determinant eps^(k(d-1)) |kernel|, which is what makes thin
singular sets samplable at all.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Configuration,
    DegenerateConfigurationError,
    collide,
    flow,
)
from .observables import singular_membership
from .util import mean_stderr, rng_for, sample_unit_sphere, sphere_area

JACOBIAN_MARGIN = 1e-9   # squared normal-speed ratio floor: tol_graze * 1e3


class IllConditionedError(RuntimeError):
    """Pseudo-trajectory too close to grazing/tangency for finite differences."""


@dataclass
class CreationRecord:
    """One particle creation: time, velocity, impact parameter, parent index."""

    time: float
    velocity: np.ndarray
    omega: np.ndarray
    parent: int

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        if abs(float(self.omega @ self.omega) - 1.0) > 1e-9:
            raise ValueError("impact parameter must be a unit vector")


@dataclass
class PseudoTrajectory:
    root: Configuration
    horizon: float
    records: list
    segments: list = field(default_factory=list)
    kernel_factors: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    status: str = "ok"
    recollision_free: bool = True
    min_margin: float = math.inf   # squared normal-speed ratio over all contacts

    @property
    def endpoint(self):
        return self.segments[-1] if self.segments else None

    @property
    def kernel(self):
        prod = 1.0
        for f in self.kernel_factors:
            prod *= f
        return prod


def _margin_of_events(events):
    worst = math.inf
    for ev in events:
        vi, vj = ev.pre_velocities
        dv = np.asarray(vj) - np.asarray(vi)
        g = float(dv @ dv)
        if g <= 0.0:
            continue
        worst = min(worst, float(np.dot(ev.contact_normal, dv)) ** 2 / g)
    return worst


def build(root, horizon, records, max_events=10**5):
    """Realize a pseudo-trajectory from its creation data.

    Records must have strictly decreasing times inside (0, horizon). Returns
    status 'overlap_rejected' when a creation would overlap an existing
    sphere (such impact parameters are simply outside the parametrization).
    """
    times = [r.time for r in records]
    if any(not 0.0 < u < horizon for u in times):
        raise ValueError("creation times must lie strictly inside (0, horizon)")
    if any(u2 >= u1 for u1, u2 in zip(times, times[1:])):
        raise ValueError("creation times must be strictly decreasing")
    eps = root.diameter
    pt = PseudoTrajectory(root=root, horizon=horizon, records=list(records))
    current = root
    tau = horizon
    for rec in records:
        res = flow(current, -(tau - rec.time), max_events=max_events)
        if res.events:
            pt.recollision_free = False
            pt.min_margin = min(pt.min_margin, _margin_of_events(res.events))
        current = res.final
        tau = rec.time
        if not 0 <= rec.parent < current.count:
            raise ValueError(f"parent index {rec.parent} out of range")
        x_new = current.positions[rec.parent] + eps * rec.omega
        dist = np.linalg.norm(current.positions - x_new[None, :], axis=1)
        dist[rec.parent] = np.inf   # parent sits exactly at contact
        if np.any(dist < eps * (1.0 - 1e-12)):
            pt.status = "overlap_rejected"
            return pt
        v_parent = current.velocities[rec.parent]
        c = float(np.dot(rec.omega, rec.velocity - v_parent))
        dv = rec.velocity - v_parent
        g = float(dv @ dv)
        pt.min_margin = min(pt.min_margin, (c * c / g) if g > 0 else 0.0)
        vel = np.vstack([current.velocities, rec.velocity[None, :]])
        pos = np.vstack([current.positions, x_new[None, :]])
        if c > 0.0:
            v_p, v_n = collide(v_parent, rec.velocity, rec.omega)
            vel[rec.parent] = v_p
            vel[-1] = v_n
            pt.branches.append("+")
        else:
            pt.branches.append("-")
        pt.kernel_factors.append(c)
        current = Configuration(current.dim, eps, pos, vel)
        pt.segments.append(current)
    res = flow(current, -tau, max_events=max_events)
    if res.events:
        pt.recollision_free = False
        pt.min_margin = min(pt.min_margin, _margin_of_events(res.events))
    pt.segments.append(res.final)
    return pt


def trajectory_to_text(pt):
    """Structured text dump: root, creation records, realized segments."""
    from .dynamics import config_to_text
    parts = [f"# pseudo-trajectory horizon={pt.horizon!r} status={pt.status} "
             f"recollision_free={pt.recollision_free}"]
    parts.append("# root")
    parts.append(config_to_text(pt.root).rstrip("\n"))
    for j, rec in enumerate(pt.records):
        vel = " ".join(repr(float(c)) for c in rec.velocity)
        om = " ".join(repr(float(c)) for c in rec.omega)
        factor = pt.kernel_factors[j] if j < len(pt.kernel_factors) else ""
        parts.append(f"# creation {j + 1}: time={rec.time!r} parent={rec.parent} "
                     f"velocity=[{vel}] omega=[{om}] factor={factor!r}")
    for j, seg in enumerate(pt.segments):
        label = "endpoint" if j == len(pt.segments) - 1 else f"segment {j + 1}"
        parts.append(f"# {label}")
        parts.append(config_to_text(seg).rstrip("\n"))
    return "\n".join(parts) + "\n"


def _tangent_frame(omega):
    d = len(omega)
    if d == 2:
        return [np.array([-omega[1], omega[0]])]
    basis = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        v = e - np.dot(e, omega) * omega
        for b in basis:
            v = v - np.dot(v, b) * b
        n = np.linalg.norm(v)
        if n > 1e-6:
            basis.append(v / n)
        if len(basis) == d - 1:
            break
    return basis


def _pack(pt):
    root = pt.root
    theta = [root.positions.ravel(), root.velocities.ravel()]
    for rec in pt.records:
        theta.append([rec.time])
    for rec in pt.records:
        theta.append(rec.velocity)
    frames = [_tangent_frame(rec.omega) for rec in pt.records]
    for rec in pt.records:
        theta.append(np.zeros(len(rec.omega) - 1))
    return np.concatenate([np.atleast_1d(np.asarray(x, float)) for x in theta]), frames


def _build_from_theta(pt, theta, frames, max_events=10**5):
    d = pt.root.dim
    s = pt.root.count
    k = len(pt.records)
    idx = 0
    pos = theta[idx: idx + s * d].reshape(s, d); idx += s * d
    vel = theta[idx: idx + s * d].reshape(s, d); idx += s * d
    times = theta[idx: idx + k]; idx += k
    vels = theta[idx: idx + k * d].reshape(k, d); idx += k * d
    records = []
    for j, rec in enumerate(pt.records):
        off = theta[idx: idx + d - 1]; idx += d - 1
        omega = rec.omega + sum(off[a] * frames[j][a] for a in range(d - 1))
        omega = omega / np.linalg.norm(omega)
        records.append(CreationRecord(float(times[j]), vels[j], omega, rec.parent))
    root = Configuration(d, pt.root.diameter, pos, vel)
    new = build(root, pt.horizon, records, max_events=max_events)
    if new.status != "ok":
        raise IllConditionedError("perturbed trajectory left the parametrization")
    end = new.endpoint
    return np.concatenate([end.positions.ravel(), end.velocities.ravel()])


def _fd_det(pt, theta0, frames, h):
    n = len(theta0)
    jac = np.empty((n, n))
    for m in range(n):
        tp = theta0.copy(); tp[m] += h
        tm = theta0.copy(); tm[m] -= h
        jac[:, m] = (_build_from_theta(pt, tp, frames)
                     - _build_from_theta(pt, tm, frames)) / (2.0 * h)
    return float(np.linalg.det(jac))


def jacobian_identity_check(pt, steps=(1e-4, 1e-5), consistency=0.02):
    """Relative error of |det D(endpoint map)| against eps^(k(d-1)) |kernel|.

    Central finite differences over (root, creation times, velocities,
    impact parameters in tangent coordinates), at two step sizes with a
    Richardson-style consistency requirement. Trajectories near tangency or
    whose event structure shifts under perturbation raise IllConditionedError.
    """
    if pt.status != "ok":
        raise ValueError("trajectory must have status ok")
    if pt.min_margin < JACOBIAN_MARGIN:
        raise IllConditionedError(
            f"contact margin {pt.min_margin:.3g} below {JACOBIAN_MARGIN:.0e}")
    times = [r.time for r in pt.records]
    gaps = [pt.horizon - times[0]] if times else []
    gaps += [u1 - u2 for u1, u2 in zip(times, times[1:])]
    gaps += [times[-1]] if times else []
    if gaps and min(gaps) < 20.0 * max(steps):
        raise IllConditionedError("creation times too close to reorder-safe limit")
    theta0, frames = _pack(pt)
    dets = [_fd_det(pt, theta0, frames, h) for h in steps]
    if abs(dets[0] - dets[-1]) > consistency * max(abs(dets[-1]), 1e-300):
        raise IllConditionedError(
            f"finite-difference determinants inconsistent: {dets}")
    d = pt.root.dim
    k = len(pt.records)
    target = pt.root.diameter ** (k * (d - 1)) * abs(pt.kernel)
    if k == 0:
        target = 1.0
    return abs(abs(dets[-1]) - target) / target


def a_coefficient(n_particles, k, s, eps, dim):
    """Duhamel series coefficient (N-s)! / (N-s-k)! eps^(k(d-1))."""
    prod = 1
    for q in range(k):
        prod *= (n_particles - s - q)
    return prod * eps ** (k * (dim - 1))


def duhamel_point_value(s, depth, t, data, z_config, mc_budget,
                        n_particles, seed=0, proposal_beta=1.0, vmax=None):
    """Truncated Duhamel-series value of the order-s marginal at (t, Z).

    data(level, config) evaluates the time-zero marginal family (e.g. a
    tensorized one-particle density). Creation times are sampled uniformly
    on the ordered simplex, velocities from a (optionally truncated)
    Gaussian proposal, impact parameters uniformly on the sphere; the
    iterated kernel is the weight. Returns (estimate, stderr, terms).
    """
    if z_config.count != s:
        raise ValueError("configuration size must equal s")
    d = z_config.dim
    eps = z_config.diameter
    if t == 0.0:
        val = data(s, z_config)
        return val, 0.0, [val]
    free = flow(z_config, -t).final
    terms = [data(s, free)]
    errs = [0.0]
    rng = rng_for(seed, 101)
    area = sphere_area(d)
    sigma = 1.0 / math.sqrt(proposal_beta)
    for k in range(1, depth + 1):
        if n_particles - s - k + 1 <= 0:
            break
        idx_count = 1
        for j in range(1, k + 1):
            idx_count *= (s + j - 1)
        samples = np.empty(mc_budget)
        for m in range(mc_budget):
            times = np.sort(rng.uniform(0.0, t, size=k))[::-1]
            if len(set(times.tolist())) < k or times[0] >= t or times[-1] <= 0.0:
                samples[m] = 0.0
                continue
            vels, log_q_inv = _gaussian_velocities(rng, k, d, sigma, vmax)
            omegas = sample_unit_sphere(rng, d, size=k)
            records = []
            parent_pool = s
            for j in range(k):
                parent = int(rng.integers(0, parent_pool))
                records.append(CreationRecord(float(times[j]), vels[j],
                                              omegas[j], parent))
                parent_pool += 1
            try:
                pt = build(z_config, t, records)
            except DegenerateConfigurationError:
                samples[m] = 0.0
                continue
            if pt.status != "ok":
                samples[m] = 0.0
                continue
            w = (t ** k / math.factorial(k)) * idx_count * area ** k \
                * math.exp(log_q_inv)
            samples[m] = pt.kernel * data(s + k, pt.endpoint) * w
        mean, err = mean_stderr(samples)
        a = a_coefficient(n_particles, k, s, eps, d)
        terms.append(a * mean)
        errs.append(a * err)
    estimate = sum(terms)
    stderr = math.sqrt(sum(e * e for e in errs))
    return estimate, stderr, terms


def _gaussian_velocities(rng, k, d, sigma, vmax):
    """k proposal velocities with the log inverse density (incl. truncation)."""
    out = np.empty((k, d))
    log_q_inv = 0.0
    if vmax is not None and d == 2:
        trunc_mass = 1.0 - math.exp(-vmax * vmax / (2.0 * sigma * sigma))
    else:
        trunc_mass = 1.0
    for j in range(k):
        while True:
            v = rng.standard_normal(d) * sigma
            if vmax is None or float(v @ v) <= vmax * vmax:
                break
        out[j] = v
        log_q_inv += (d / 2.0) * math.log(2.0 * math.pi * sigma * sigma) \
            + float(v @ v) / (2.0 * sigma * sigma) + math.log(trunc_mass)
    return out, log_q_inv


def v_set_membership(z_config, k, horizon, search_budget=200,
                     max_events=10**4):
    """One-sided witness search: is Z an endpoint with k ordered creations?

    Walks the forward event tree of Z, deleting the current last particle at
    a contact (with or without the collisional change of variables) and
    recursing; True means a witness was found, False only means none was
    found within budget.
    """
    s = z_config.count
    if not 0 <= k < s:
        raise ValueError("need 0 <= k < s")
    if k == 0:
        return True
    budget = [search_budget]
    return _search(z_config, 0.0, k, horizon, budget, max_events)


def _search(config, t_now, deletions_left, horizon, budget, max_events):
    if deletions_left == 0:
        return True
    if budget[0] <= 0:
        return False
    budget[0] -= 1
    try:
        res = flow(config, horizon - t_now, max_events=max_events,
                   record_states=True)
    except DegenerateConfigurationError:
        return False
    last = config.count - 1
    for ev, (pos, vel_pre, vel_post) in zip(res.events, res.event_states):
        if last not in ev.pair:
            continue
        when = t_now + ev.time
        for vel in (vel_pre, vel_post):
            reduced = Configuration(config.dim, config.diameter,
                                    pos, vel).drop(last)
            if _search(reduced, when, deletions_left - 1, horizon, budget,
                       max_events):
                return True
    return False


def sample_singular_parametrization(root_size, k, horizon, eps, dim,
                                    proposal_beta, n_samples, seed,
                                    root_sampler=None, injective=True):
    """Monte Carlo draws of the creation parametrization of the singular set.

    Yields (pt, log_q_inv) with log_q_inv the log inverse proposal density
    over (root, ordered times, velocities, impact parameters, parents). The
    eps^(k(d-1)) determinant factor and the |kernel| weight are left to the
    caller, which is exactly how the seminorm cancels its prefactor.

    With injective=True only recollision-free, all-minus-branch draws are
    kept (others yield None): every such endpoint is reached by exactly one
    kept parameter point, because the plus-branch reading of each contact
    (equal kernel magnitude) is the only other preimage and recollisions are
    excluded. Without the restriction the pushforward overcounts endpoints
    2-fold per creation.
    """
    rng = rng_for(seed, 303)
    area = sphere_area(dim)
    sigma = 1.0 / math.sqrt(proposal_beta)
    idx_count = 1
    for j in range(1, k + 1):
        idx_count *= (root_size + j - 1)
    out = []
    for _ in range(n_samples):
        if root_sampler is not None:
            root, log_root_inv = root_sampler(rng)
        else:
            root, log_root_inv = _gaussian_root(rng, root_size, dim, eps, sigma)
            if root is None:
                out.append((None, 0.0))
                continue
        times = np.sort(rng.uniform(0.0, horizon, size=k))[::-1]
        vels, log_v_inv = _gaussian_velocities(rng, k, dim, sigma, None)
        omegas = sample_unit_sphere(rng, dim, size=k)
        records = []
        pool = root_size
        for j in range(k):
            parent = int(rng.integers(0, pool))
            records.append(CreationRecord(float(times[j]), vels[j], omegas[j],
                                          parent))
            pool += 1
        try:
            pt = build(root, horizon, records)
        except (DegenerateConfigurationError, ValueError):
            out.append((None, 0.0))
            continue
        if pt.status != "ok":
            out.append((None, 0.0))
            continue
        if injective and (not pt.recollision_free or "+" in pt.branches):
            out.append((None, 0.0))
            continue
        log_q_inv = (log_root_inv + log_v_inv
                     + k * math.log(area)
                     + math.log(idx_count)
                     + k * math.log(horizon) - math.lgamma(k + 1))
        out.append((pt, log_q_inv))
    return out


def _gaussian_root(rng, size, dim, eps, sigma):
    pos = rng.standard_normal((size, dim)) * sigma
    vel = rng.standard_normal((size, dim)) * sigma
    for i in range(size):
        for j in range(i + 1, size):
            if np.linalg.norm(pos[i] - pos[j]) < eps:
                return None, 0.0
    q = (float(np.sum(pos**2)) + float(np.sum(vel**2))) / (2.0 * sigma * sigma)
    log_inv = q + 2 * size * dim * 0.5 * math.log(2.0 * math.pi * sigma * sigma)
    return Configuration(dim, eps, pos, vel), log_inv


def singular_measure_estimate(s, k, horizon, beta, mc_budget, eps, dim=2,
                              seed=0, method="parametrization"):
    """Gaussian-weighted measure of the singular set at codimension step k.

    The parametrization route pushes the creation coordinates forward with
    the determinant identity weight; the indicator route (k = 1 only) draws
    phase points from the Gaussian and counts first free-flight contacts
    inside the horizon, which is an independent oracle for the same scaling.
    """
    if not 0 < k < s:
        raise ValueError("need 0 < k < s")
    if method == "parametrization":
        draws = sample_singular_parametrization(
            s - k, k, horizon, eps, dim, beta, mc_budget, seed)
        vals = np.zeros(mc_budget)
        for m, (pt, log_q_inv) in enumerate(draws):
            if pt is None:
                continue
            end = pt.endpoint
            e_i = 0.5 * float(np.sum(end.velocities**2)) \
                + 0.5 * float(np.sum(end.positions**2))
            # kinetic parts of the weight cancel against the proposal exactly
            # (creation conserves pair energy); both exponents stay moderate,
            # so the direct form is safe
            log_w = -beta * e_i + log_q_inv
            vals[m] = abs(pt.kernel) * eps ** (k * (dim - 1)) * math.exp(log_w)
        est, err = mean_stderr(vals)
        return est, err
    if method == "indicator":
        if k != 1 or s > 3:
            raise ValueError("indicator oracle implemented for k = 1, s <= 3")
        return _indicator_measure(s, horizon, beta, mc_budget, eps, dim, seed)
    raise ValueError(f"unknown method {method!r}")


def _indicator_measure(s, horizon, beta, mc_budget, eps, dim, seed):
    """Direct Gaussian sampling of first free-flight contacts within horizon."""
    rng = rng_for(seed, 404)
    sigma = 1.0 / math.sqrt(beta)
    pos = rng.standard_normal((mc_budget, s, dim)) * sigma
    vel = rng.standard_normal((mc_budget, s, dim)) * sigma
    member = np.zeros(mc_budget, dtype=bool)
    valid = np.ones(mc_budget, dtype=bool)
    first = np.full(mc_budget, np.inf)
    for i in range(s):
        for j in range(i + 1, s):
            dx = pos[:, i, :] - pos[:, j, :]
            dv = vel[:, i, :] - vel[:, j, :]
            b = np.einsum("md,md->m", dx, dv)
            g = np.einsum("md,md->m", dv, dv)
            c = np.einsum("md,md->m", dx, dx) - eps * eps
            valid &= c > 0.0
            disc = b * b - g * c
            hit = (b < 0.0) & (disc > 0.0)
            tt = np.where(hit, c / (-b + np.sqrt(np.where(hit, disc, 1.0))), np.inf)
            first = np.minimum(first, tt)
    member = valid & (first < horizon)
    frac = member.astype(float)
    mean, err = mean_stderr(frac)
    scale = (2.0 * math.pi / beta) ** (s * dim)
    return scale * mean, scale * err


def endpoint_in_singular_set(pt, n_particles, horizon=None,
                             collision_cap=50_000):
    """Cross-check: a built endpoint must be a member of the hat-based set."""
    end = pt.endpoint
    k = len(pt.records)
    t = horizon if horizon is not None else pt.horizon
    return singular_membership(end, k, t, n_particles,
                               collision_cap=collision_cap)
