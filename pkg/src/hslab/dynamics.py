"""Exact event-driven dynamics of identical hard spheres in R^d.

Free flight between contacts, specular reflection at contact, forward or
backward in time, with a full collision log. Contact times come from the
closed-form pair quadratic (no stepping), so trajectories are reversible
to roundoff. Configurations with grazing or simultaneous shared contacts
are excised as degenerate; every statement downstream holds off a null set.
"""

import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

MAX_EVENTS_DEFAULT = 10**6
TOL_UNIT = 1e-12
TOL_GRAZE = 1e-12       # relative, on the contact-quadratic discriminant
TOL_TIE = 1e-12
TOL_OVERLAP_REL = 1e-12  # times diameter


class RunawayDynamicsError(RuntimeError):
    """Event count exceeded the cap; signals near-grazing pathologies."""


class DegenerateConfigurationError(RuntimeError):
    """Simultaneous contacts sharing a particle (triple contact); null set."""


@dataclass
class Configuration:
    """State of s identical hard spheres: positions, velocities, diameter.

    Arrays have shape (s, d) and are frozen after construction; flows and
    reductions always build new instances, so values are safe to share.
    """

    dim: int
    diameter: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, self.dim)
        self.velocities = np.array(self.velocities, dtype=float).reshape(-1, self.dim)
        self.positions.flags.writeable = False
        self.velocities.flags.writeable = False

    @property
    def count(self):
        return self.positions.shape[0]

    def validate(self):
        if self.dim < 2:
            raise ValueError(f"dimension must be >= 2, got {self.dim}")
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have equal shape")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("coordinates must be finite")
        s = self.count
        if s >= 2:
            ii, jj = pair_indices(s)
            dx = self.positions[ii] - self.positions[jj]
            dist = np.sqrt(np.einsum("pd,pd->p", dx, dx))
            tol = TOL_OVERLAP_REL * self.diameter
            if np.any(dist < self.diameter - tol):
                k = int(np.argmin(dist))
                raise ValueError(
                    f"hard-sphere exclusion violated for pair ({ii[k]},{jj[k]}): "
                    f"distance {dist[k]:.6g} < diameter {self.diameter:.6g}"
                )
        return self

    def drop(self, index):
        """Configuration with one particle removed (marginal direction)."""
        keep = [k for k in range(self.count) if k != index]
        return Configuration(self.dim, self.diameter,
                             self.positions[keep], self.velocities[keep])

    def replace(self, positions=None, velocities=None):
        return Configuration(
            self.dim, self.diameter,
            self.positions if positions is None else positions,
            self.velocities if velocities is None else velocities,
        )

    def permuted(self, perm):
        perm = list(perm)
        return Configuration(self.dim, self.diameter,
                             self.positions[perm], self.velocities[perm])


@dataclass
class CollisionEvent:
    """One binary contact: time, pair, contact normal, pair velocities."""

    time: float
    pair: tuple
    contact_normal: np.ndarray
    pre_velocities: tuple
    post_velocities: tuple


@dataclass
class FlowResult:
    final: Configuration
    events: list
    elapsed: float
    # Full per-event snapshots (positions, velocities before/after), kept
    # when callers need boundary configurations, e.g. hierarchy jumps.
    event_states: list = field(default_factory=list)


@lru_cache(maxsize=64)
def pair_indices(s):
    ii, jj = np.triu_indices(s, k=1)
    return ii, jj


def collide(v_i, v_j, omega):
    """Specular reflection of a pair in contact along unit normal omega.

    v_i* = v_i + omega (omega . (v_j - v_i)), and symmetrically for v_j*.
    Involutive, and conserves pair momentum and kinetic energy exactly up
    to roundoff.
    """
    omega = np.asarray(omega, dtype=float)
    norm = float(np.dot(omega, omega))
    if abs(norm - 1.0) > 3.0 * TOL_UNIT:
        raise ValueError(f"contact normal must be unit length, |omega|^2 = {norm!r}")
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    lam = float(np.dot(omega, v_j - v_i))
    return v_i + lam * omega, v_j - lam * omega


def _discriminant(b, g, c):
    """b^2 - g*c with an exact rational fallback when cancellation bites."""
    d = b * b - g * c
    scale = abs(b * b) + abs(g * c)
    if scale > 0.0 and abs(d) < 1e-8 * scale:
        d = float(Fraction(b) * Fraction(b) - Fraction(g) * Fraction(c))
    return d


def _pair_time(dx, dv, eps):
    """First strictly positive contact time for one pair, or None.

    Grazing roots (relative discriminant below TOL_GRAZE) report None:
    the trajectory through them lies in a null set we excise.
    """
    b = float(np.dot(dx, dv))
    if b >= 0.0:
        return None
    g = float(np.dot(dv, dv))
    c = float(np.dot(dx, dx)) - eps * eps
    if c <= 0.0:
        # at contact (to roundoff) and approaching: no strictly positive root
        return None
    disc = _discriminant(b, g, c)
    # disc / eps^2 is the squared normal speed at contact, so this excises
    # contacts tangential beyond TOL_GRAZE relative to the pair speed
    if disc <= TOL_GRAZE * g * eps * eps:
        return None
    # stable root: c / (-b + sqrt(disc)) avoids cancellation for small c
    return c / (-b + math.sqrt(disc))


def time_of_impact(x_i, v_i, x_j, v_j, eps):
    """Exact first contact time of two free-flying spheres, or None.

    Requires non-overlapping input; the root must be approached (relative
    velocity against separation), otherwise there is no impact.
    """
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    dx = x_j - x_i
    dist2 = float(np.dot(dx, dx))
    if dist2 < (eps * (1.0 - TOL_OVERLAP_REL)) ** 2:
        raise ValueError(
            f"overlapping input: |x_i - x_j| = {math.sqrt(dist2):.6g} < eps = {eps:.6g}"
        )
    dv = np.asarray(v_j, dtype=float) - np.asarray(v_i, dtype=float)
    return _pair_time(dx, dv, eps)


def _pair_times_all(pos, vel, eps, ii, jj):
    """Vectorized candidate contact times for the listed pairs (inf = none)."""
    dx = pos[ii] - pos[jj]
    dv = vel[ii] - vel[jj]
    b = np.einsum("pd,pd->p", dx, dv)
    g = np.einsum("pd,pd->p", dv, dv)
    c = np.einsum("pd,pd->p", dx, dx) - eps * eps
    disc = b * b - g * c
    out = np.full(len(ii), np.inf)
    ok = (b < 0.0) & (c > 0.0) & (disc > TOL_GRAZE * g * eps * eps)
    if np.any(ok):
        out[ok] = c[ok] / (-b[ok] + np.sqrt(disc[ok]))
    return out


def _flow_forward_small(pos, vel, eps, duration, max_events, want_states):
    """All-pairs rescan engine; permitted for small particle counts."""
    s = pos.shape[0]
    events = []
    states = []
    t = 0.0
    if s >= 2:
        ii, jj = pair_indices(s)
    while s >= 2:
        times = _pair_times_all(pos, vel, eps, ii, jj)
        k = int(np.argmin(times))
        t_rel = times[k]
        if not np.isfinite(t_rel) or t + t_rel >= duration:
            break
        tie_tol = TOL_TIE * (1.0 + t_rel)
        group = np.where(times <= t_rel + tie_tol)[0]
        if len(group) > 1:
            touched = np.concatenate([ii[group], jj[group]])
            if len(np.unique(touched)) < 2 * len(group):
                raise DegenerateConfigurationError(
                    f"simultaneous contacts sharing a particle at t = {t + t_rel:.6g}"
                )
        pos = pos + t_rel * vel
        t += t_rel
        for k in sorted(group, key=lambda q: (ii[q], jj[q])):
            i, j = int(ii[k]), int(jj[k])
            dx = pos[j] - pos[i]
            omega = dx / np.linalg.norm(dx)
            pre = (vel[i].copy(), vel[j].copy())
            vi, vj = collide(vel[i], vel[j], omega)
            vel = vel.copy()
            if want_states:
                vel_pre_full = vel.copy()
            vel[i] = vi
            vel[j] = vj
            events.append(CollisionEvent(t, (i, j), omega, pre, (vi.copy(), vj.copy())))
            if want_states:
                states.append((pos.copy(), vel_pre_full, vel.copy()))
            if len(events) > max_events:
                raise RunawayDynamicsError(
                    f"more than {max_events} collisions within one flow call"
                )
    pos = pos + (duration - t) * vel
    return pos, vel, events, states


def flow(config, duration, max_events=MAX_EVENTS_DEFAULT, record_states=False):
    """Evolve a configuration by a signed duration under the hard-sphere flow.

    Negative duration runs the dynamics in reverse via flip -> forward ->
    flip, which is exact for Newtonian hard spheres. Event times in the
    result are signed offsets from the start, strictly inside the interval
    and monotone in flow direction.
    """
    if not math.isfinite(duration):
        raise ValueError("duration must be finite")
    if duration == 0.0:
        return FlowResult(config.replace(), [], 0.0)
    if duration < 0.0:
        fwd = flow(flip_velocities(config), -duration, max_events, record_states)
        events = [
            CollisionEvent(-ev.time, ev.pair, ev.contact_normal,
                           tuple(-v for v in ev.pre_velocities),
                           tuple(-v for v in ev.post_velocities))
            for ev in fwd.events
        ]
        states = [(p, -vpre, -vpost) for (p, vpre, vpost) in fwd.event_states]
        return FlowResult(flip_velocities(fwd.final), events, duration, states)

    pos = config.positions.copy()
    vel = config.velocities.copy()
    if config.count > 8:
        from .nbody import flow_forward_nbody
        pos, vel, events, states = flow_forward_nbody(
            pos, vel, config.diameter, duration, max_events, record_states)
    else:
        pos, vel, events, states = _flow_forward_small(
            pos, vel, config.diameter, duration, max_events, record_states)
    final = Configuration(config.dim, config.diameter, pos, vel)
    return FlowResult(final, events, duration, states)


def flip_velocities(config):
    return config.replace(velocities=-config.velocities)


def energy(config):
    """Kinetic energy: half the sum of squared speeds."""
    return 0.5 * float(np.einsum("sd,sd->", config.velocities, config.velocities))


def inertia(config):
    """Half the sum of squared distances from the origin."""
    return 0.5 * float(np.einsum("sd,sd->", config.positions, config.positions))


def backward_free_noncolliding(config):
    """True iff the backward flow is free for all positive times.

    Decided in closed form from each pairwise quadratic: the infimum over
    tau > 0 of |x_i - x_j - (v_i - v_j) tau| must exceed the diameter.
    """
    s = config.count
    if s < 2:
        return True
    eps = config.diameter
    ii, jj = pair_indices(s)
    dx = config.positions[ii] - config.positions[jj]
    dv = config.velocities[ii] - config.velocities[jj]
    b = np.einsum("pd,pd->p", dx, dv)
    g = np.einsum("pd,pd->p", dv, dv)
    r2 = np.einsum("pd,pd->p", dx, dx)
    # separation along backward time: |dx - dv*tau|^2, minimized at
    # tau* = (dx.dv)/|dv|^2 when positive, else at tau -> 0+.
    inf2 = np.where((g > 0.0) & (b > 0.0), r2 - b * b / np.where(g > 0.0, g, 1.0), r2)
    return bool(np.all(inf2 > eps * eps))


def config_to_text(config):
    """Columnar text record: header 'd s epsilon', then one particle per line."""
    lines = [f"{config.dim} {config.count} {config.diameter!r}"]
    for x, v in zip(config.positions, config.velocities):
        lines.append(" ".join(repr(float(c)) for c in x) + " " +
                     " ".join(repr(float(c)) for c in v))
    return "\n".join(lines) + "\n"


def config_from_text(text):
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    d_str, s_str, eps_str = lines[0].split()
    d, s, eps = int(d_str), int(s_str), float(eps_str)
    if len(lines) != s + 1:
        raise ValueError(f"expected {s} particle lines, got {len(lines) - 1}")
    pos, vel = [], []
    for ln in lines[1:]:
        vals = [float(tok) for tok in ln.split()]
        if len(vals) != 2 * d:
            raise ValueError(f"expected {2 * d} columns, got {len(vals)}")
        pos.append(vals[:d])
        vel.append(vals[d:])
    return Configuration(d, eps, np.array(pos), np.array(vel))


def events_to_csv(events):
    """CSV log 'time,i,j,omega...' with one row per collision."""
    buf = io.StringIO()
    if events:
        d = len(events[0].contact_normal)
    else:
        d = 0
    header = ["time", "i", "j"] + [f"omega_{k}" for k in range(d)]
    buf.write(",".join(header) + "\n")
    for ev in events:
        row = [repr(float(ev.time)), str(ev.pair[0]), str(ev.pair[1])]
        row += [repr(float(c)) for c in ev.contact_normal]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
