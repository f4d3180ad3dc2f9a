"""Point evaluation of hierarchy observables along hard-sphere characteristics.

The value at (t, Z) is transported along the forward s-particle flow of Z;
each collision crossing contributes a jump equal to (N - s + 1) times a
four-term combination of one-level-down evaluations at the reduced contact
configurations (drop either colliding particle, on either side of the
collision). The dual hierarchy takes the post-side drops minus the pre-side
drops; the comparison (hat) hierarchy takes all four with plus signs, which
keeps values non-negative, integer, and non-decreasing in time; the upper
and lower envelopes are the signed pair coupled to each other through the
pre-side terms.

Hat-hierarchy arithmetic is exact: multiplicities and the (N - j)...(N - s + 1)
factors are carried as Python integers end to end.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Configuration,
    DegenerateConfigurationError,
    RunawayDynamicsError,
    flow,
)
from .util import rng_for

LEVEL_CAP_DEFAULT = 5
COLLISION_CAP_DEFAULT = 20_000
# flow fires contacts with squared normal-speed ratio above 1e-12; one decade
# above that still counts as too close to tangency for reliable recursion
GRAZE_EVAL_RATIO = 1e-11


class DegeneratePointError(RuntimeError):
    """Characteristic met a grazing collision; the probe lies in a null set."""


@dataclass
class LevelData:
    """Initial datum for one hierarchy level.

    kind 'constant' is the value everywhere on the level's phase space;
    'indicator' is a membership callback (value in {0, 1}); 'scaled_indicator'
    multiplies the callback by an integer scale (e.g. N^k); 'function' is an
    arbitrary symmetric callable (not valid for the integer-exact hat runs).
    """

    kind: str
    value: object = 1
    member: object = None

    def __call__(self, config):
        if self.kind == "constant":
            return self.value
        if self.kind == "function":
            return self.value(config)
        inside = bool(self.member(config))
        if self.kind == "indicator":
            return 1 if inside else 0
        if self.kind == "scaled_indicator":
            return self.value if inside else 0
        raise ValueError(f"unknown level data kind {self.kind!r}")


def constant_level(value=1):
    return LevelData("constant", value=value)


def indicator_level(member):
    return LevelData("indicator", member=member)


def scaled_indicator_level(scale, member):
    return LevelData("scaled_indicator", value=scale, member=member)


def function_level(fn):
    return LevelData("function", value=fn)


@dataclass
class ObservableSpec:
    """Initial data for a hierarchy evolution.

    levels maps a particle number to its datum; absent levels are zero.
    For the coupled envelope hierarchies, `companion` holds the partner
    envelope's data (the upper evolution references the lower on the
    pre-collisional side and vice versa).
    """

    levels: dict
    n_particles: int
    hierarchy: str = "dual"
    companion: dict = None
    level_cap: int = LEVEL_CAP_DEFAULT

    def __post_init__(self):
        if self.hierarchy not in ("dual", "hat", "upper_envelope", "lower_envelope"):
            raise ValueError(f"unknown hierarchy {self.hierarchy!r}")
        if self.hierarchy in ("upper_envelope", "lower_envelope") and self.companion is None:
            raise ValueError("envelope hierarchies need companion data")

    def datum(self, level, role=0):
        table = self.levels if role == 0 else self.companion
        return table.get(level)

    def min_level(self):
        lvls = set(self.levels)
        if self.companion:
            lvls |= set(self.companion)
        return min(lvls) if lvls else 1


@dataclass
class JumpLedger:
    """Exact decomposition of one evaluation.

    base is the transported initial datum; each jump record holds the
    collision time, pair, integer coefficient N - s + 1, and the four
    one-level-down values. For hat evaluations the value factors exactly
    as integer_coefficient times the product of (N - j)...(N - s + 1).
    """

    value: object = 0
    base: object = 0
    collision_times: list = field(default_factory=list)
    jumps: list = field(default_factory=list)
    collisions_total: int = 0
    factors: list = field(default_factory=list)
    integer_coefficient: object = None

    def reproduce(self):
        total = self.base
        for rec in self.jumps:
            total = total + rec["coefficient"] * rec["bracket"]
        return total


class _Budget:
    __slots__ = ("left",)

    def __init__(self, cap):
        self.left = cap

    def spend(self, n):
        self.left -= n
        if self.left < 0:
            raise RunawayDynamicsError("hierarchy recursion exceeded the collision cap")


def _free_transport(config, t):
    return config.replace(positions=config.positions + t * config.velocities)


def _graze_check(event):
    vi, vj = event.pre_velocities
    dv = np.asarray(vj) - np.asarray(vi)
    v_n2 = float(np.dot(event.contact_normal, dv)) ** 2
    if v_n2 <= GRAZE_EVAL_RATIO * float(np.dot(dv, dv)):
        raise DegeneratePointError(
            f"grazing collision (normal-speed ratio {v_n2:.3g}) on the characteristic"
        )


def _eval_level(spec, role, level, t, config, budget, ledger=None):
    datum = spec.datum(level, role)
    if level < spec.min_level():
        return 0
    if t <= 0.0:
        val = datum(config) if datum else 0
        if ledger is not None:
            ledger.base = val
            ledger.value = val
        return val
    if level == 1:
        moved = _free_transport(config, t)
        val = datum(moved) if datum else 0
        if ledger is not None:
            ledger.base = val
            ledger.value = val
        return val
    if level == spec.min_level() and datum is not None and datum.kind == "constant":
        # levels below are zero, so no jumps contribute and a constant is
        # transported unchanged
        if ledger is not None:
            ledger.base = datum.value
            ledger.value = datum.value
        return datum.value

    res = flow(config, t, record_states=True)
    budget.spend(len(res.events))
    for ev in res.events:
        _graze_check(ev)
    val = spec.datum(level, role)(res.final) if spec.datum(level, role) else 0
    if ledger is not None:
        ledger.base = val
    coef = spec.n_particles - level + 1
    hierarchy = spec.hierarchy
    for ev, (pos, vel_pre, vel_post) in zip(res.events, res.event_states):
        i, j = ev.pair
        remaining = t - ev.time
        pre = Configuration(config.dim, config.diameter, pos, vel_pre)
        post = Configuration(config.dim, config.diameter, pos, vel_post)
        post_i = post.drop(i)
        post_j = post.drop(j)
        pre_i = pre.drop(i)
        pre_j = pre.drop(j)
        if hierarchy in ("dual", "hat"):
            sub_role = (role, role, role, role)
        else:
            flip = 1 - role
            sub_role = (role, role, flip, flip)
        vals = (
            _eval_level(spec, sub_role[0], level - 1, remaining, post_i, budget),
            _eval_level(spec, sub_role[1], level - 1, remaining, post_j, budget),
            _eval_level(spec, sub_role[2], level - 1, remaining, pre_i, budget),
            _eval_level(spec, sub_role[3], level - 1, remaining, pre_j, budget),
        )
        if hierarchy == "hat":
            bracket = vals[0] + vals[1] + vals[2] + vals[3]
        else:
            bracket = vals[0] + vals[1] - vals[2] - vals[3]
        val = val + coef * bracket
        if ledger is not None:
            ledger.collision_times.append(ev.time)
            ledger.jumps.append({
                "time": ev.time,
                "pair": (i, j),
                "coefficient": coef,
                "subvalues": vals,
                "bracket": bracket,
            })
    if ledger is not None:
        ledger.value = val
    return val


def evaluate(spec, t, config, collision_cap=COLLISION_CAP_DEFAULT):
    """Value of the observable at (t, Z) with its jump ledger.

    Deterministic; raises DegeneratePointError on grazing characteristics
    (callers resample) and RunawayDynamicsError past the collision cap.
    """
    level = config.count
    if level > spec.level_cap:
        raise ValueError(f"level {level} exceeds the cap {spec.level_cap}; "
                         "raise level_cap knowingly (cost grows with collision "
                         "combinatorics as ~4^depth per extra level)")
    if spec.n_particles < level:
        raise ValueError("particle-number parameter smaller than the level")
    budget = _Budget(collision_cap)
    ledger = JumpLedger()
    val = _eval_level(spec, 0, level, t, config, budget, ledger)
    ledger.collisions_total = collision_cap - budget.left
    return val, ledger


def hat_spec(j, n_particles, level_cap=LEVEL_CAP_DEFAULT):
    """Comparison-hierarchy data: the constant 1 at level j, zero elsewhere."""
    return ObservableSpec({j: constant_level(1)}, n_particles, "hat",
                          level_cap=level_cap)


def evaluate_hat(j, s, n_particles, t, config,
                 collision_cap=COLLISION_CAP_DEFAULT, level_cap=None):
    """Exact integer value of the comparison hierarchy phi-hat_{N,j} at level s.

    Zero below level j, identically 1 at level j, and above it an integer
    multiple of (N - j)(N - j - 1)...(N - s + 1), accumulated exactly.
    """
    if config.count != s:
        raise ValueError("configuration size must equal the requested level")
    if s < j:
        return 0, JumpLedger(value=0, base=0)
    cap = level_cap if level_cap is not None else max(LEVEL_CAP_DEFAULT, s)
    spec = hat_spec(j, n_particles, level_cap=cap)
    val, ledger = evaluate(spec, t, config, collision_cap=collision_cap)
    factors = [n_particles - q for q in range(j, s)]
    ledger.factors = factors
    if s > j:
        prod = math.prod(factors)
        ledger.integer_coefficient = val // prod if prod and val % prod == 0 else None
    else:
        ledger.integer_coefficient = val
    return val, ledger


def singular_membership(config, k, horizon, n_particles,
                        collision_cap=COLLISION_CAP_DEFAULT):
    """Membership of Z in the singular set at codimension step k.

    True iff the comparison observable seeded at level s - k is non-zero at
    (horizon, Z); k = 0 is always a member.
    """
    s = config.count
    if not 0 <= k < s:
        raise ValueError("need 0 <= k < s")
    if k == 0:
        return True
    val, _ = evaluate_hat(s - k, s, n_particles, horizon, config,
                          collision_cap=collision_cap)
    return val != 0


def hat_bound_squared(j, s, n_particles=None):
    """Square of the a-priori hat ceiling, as an exact integer.

    The ceiling is the product over j < q <= s of 4 (N - q + 1) (32 q^(3/2))^(q^2)
    (drop the N factor for the two-point comparability version); squaring
    clears the half-integer exponent so comparisons stay in exact arithmetic.
    """
    total = 1
    for q in range(j + 1, s + 1):
        term_sq = 16 * 32 ** (2 * q * q) * q ** (3 * q * q)
        if n_particles is not None:
            term_sq *= (n_particles - q + 1) ** 2
        total *= term_sq
    return total


def below_hat_bound(value, j, s, n_particles):
    """Exact check of the loose ceiling; logs nothing, just decides."""
    return value * value <= hat_bound_squared(j, s, n_particles)


def within_comparability(value_a, value_b, j, s):
    """Exact check that two non-zero hat values at equal (j, s, t) differ by
    at most the constant multiple prod 4 (32 q^(3/2))^(q^2)."""
    big, small = (abs(value_a), abs(value_b))
    if small > big:
        big, small = small, big
    return big * big <= small * small * hat_bound_squared(j, s)


def check_symmetry(spec, sampler, rng, probes=20):
    """Probe each populated level's datum for particle-interchange symmetry.

    Integer-valued data must match exactly; smooth data gets a roundoff
    allowance since permutations reorder floating-point reductions.
    """
    for level, datum in spec.levels.items():
        if level == 1:
            continue
        for _ in range(probes):
            cfg = sampler(rng, level)
            perm = rng.permutation(level)
            a = datum(cfg)
            b = datum(cfg.permuted(perm))
            if isinstance(a, int) and isinstance(b, int):
                bad = a != b
            else:
                bad = abs(a - b) > 1e-12 * (1.0 + abs(a) + abs(b))
            if bad:
                raise ValueError(
                    f"level-{level} datum not symmetric under interchange")
    return True


def weighted_l1_norm(spec, beta, mu, t, mc_budget, seed=0,
                     include_inertia=True, position_sigma=3.0,
                     max_level=None, collision_cap=COLLISION_CAP_DEFAULT):
    """Monte Carlo estimate of the exponentially weighted L1 norm at time t.

    Sums 1/s! int |phi^(s)(t)| exp(-beta E_s) exp(-mu s) over levels, with
    the optional inertia weight exp(-beta I_s) (without it, positions are
    importance-sampled from a wide Gaussian and reweighted). Degenerate
    probes are resampled and counted.
    """
    if not spec.levels:
        return 0.0, 0.0, {"resamples": 0}
    top = max_level if max_level is not None else min(spec.n_particles, spec.level_cap)
    rng = rng_for(seed, 777)
    total = 0.0
    var = 0.0
    resamples = 0
    d = None
    for level in range(spec.min_level(), top + 1):
        samples = []
        n_probe = max(mc_budget // max(top - spec.min_level() + 1, 1), 8)
        while len(samples) < n_probe:
            cfg, log_w = _weighted_probe(rng, level, beta, include_inertia,
                                         position_sigma)
            d = cfg.dim
            if not _exclusion(cfg):
                samples.append(0.0)
                continue
            try:
                val, _ = evaluate(spec, t, cfg, collision_cap=collision_cap)
            except (DegeneratePointError, DegenerateConfigurationError):
                resamples += 1
                continue
            samples.append(abs(val) * math.exp(log_w))
        arr = np.asarray(samples)
        mean = float(arr.mean())
        err = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
        scale = math.exp(-mu * level) / math.factorial(level)
        total += scale * mean
        var += (scale * err) ** 2
    return total, math.sqrt(var), {"resamples": resamples}


_NORM_EPS_DEFAULT = 0.1


def _weighted_probe(rng, level, beta, include_inertia, position_sigma, dim=2,
                    eps=_NORM_EPS_DEFAULT):
    vel = rng.standard_normal((level, dim)) / math.sqrt(beta)
    log_w = level * dim * 0.5 * math.log(2 * math.pi / beta)
    if include_inertia:
        pos = rng.standard_normal((level, dim)) / math.sqrt(beta)
        log_w += level * dim * 0.5 * math.log(2 * math.pi / beta)
    else:
        pos = rng.standard_normal((level, dim)) * position_sigma
        q = np.sum(pos**2) / (2 * position_sigma**2)
        log_w += float(q) + level * dim * 0.5 * math.log(2 * math.pi * position_sigma**2)
    return Configuration(dim, eps, pos, vel), log_w


def _exclusion(cfg):
    s = cfg.count
    for i in range(s):
        for j in range(i + 1, s):
            if np.linalg.norm(cfg.positions[i] - cfg.positions[j]) < cfg.diameter:
                return False
    return True
