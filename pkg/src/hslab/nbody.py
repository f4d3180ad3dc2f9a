"""Event-queue engine for ensemble-scale hard-sphere runs.

Pair predictions are computed vectorized per particle row and kept in a
priority queue with per-particle collision counters for invalidation, so
each event costs O(N) instead of an all-pairs rescan. Candidate pairs are
pruned by the remaining horizon, which in the dilute Boltzmann-Grad regime
(mean free path comparable to the cloud size) keeps the queue small.
"""

import heapq
import math

import numpy as np

from . import dynamics


def _row_times(pos, vel, eps, i, others):
    dx = pos[others] - pos[i]
    dv = vel[others] - vel[i]
    b = np.einsum("pd,pd->p", dx, dv)
    g = np.einsum("pd,pd->p", dv, dv)
    c = np.einsum("pd,pd->p", dx, dx) - eps * eps
    disc = b * b - g * c
    ok = (b < 0.0) & (c > 0.0) & (disc > dynamics.TOL_GRAZE * g * eps * eps)
    times = np.full(len(others), np.inf)
    if np.any(ok):
        times[ok] = c[ok] / (-b[ok] + np.sqrt(disc[ok]))
    return times


def _push_row(heap, pos, vel, eps, i, others, now, horizon, counters):
    times = _row_times(pos, vel, eps, i, others)
    sel = np.where(now + times < horizon)[0]
    for k in sel:
        j = int(others[k])
        a, b = (i, j) if i < j else (j, i)
        heapq.heappush(heap, (now + float(times[k]), a, b, counters[a], counters[b]))


def flow_forward_nbody(pos, vel, eps, duration, max_events, want_states):
    n = pos.shape[0]
    counters = [0] * n
    heap = []
    idx = np.arange(n)
    for i in range(n - 1):
        _push_row(heap, pos, vel, eps, i, idx[i + 1:], 0.0, duration, counters)

    t = 0.0
    events = []
    states = []
    while heap:
        t_ev, i, j, ci, cj = heapq.heappop(heap)
        if counters[i] != ci or counters[j] != cj:
            continue
        if t_ev >= duration:
            break
        # shared-particle simultaneity check against the next valid entry
        while heap and not (counters[heap[0][2]] == heap[0][4]
                            and counters[heap[0][1]] == heap[0][3]):
            heapq.heappop(heap)
        if heap:
            t2, a, b, _, _ = heap[0]
            if t2 - t_ev <= dynamics.TOL_TIE * (1.0 + t_ev) and len({i, j, a, b}) < 4:
                raise dynamics.DegenerateConfigurationError(
                    f"simultaneous contacts sharing a particle at t = {t_ev:.6g}"
                )
        pos += (t_ev - t) * vel
        t = t_ev
        dx = pos[j] - pos[i]
        omega = dx / np.linalg.norm(dx)
        pre = (vel[i].copy(), vel[j].copy())
        vi, vj = dynamics.collide(vel[i], vel[j], omega)
        if want_states:
            states.append((pos.copy(), vel.copy(), None))
        vel[i] = vi
        vel[j] = vj
        if want_states:
            states[-1] = (states[-1][0], states[-1][1], vel.copy())
        events.append(dynamics.CollisionEvent(t, (i, j), omega, pre, (vi.copy(), vj.copy())))
        if len(events) > max_events:
            raise dynamics.RunawayDynamicsError(
                f"more than {max_events} collisions within one flow call"
            )
        counters[i] += 1
        counters[j] += 1
        for p in (i, j):
            others = idx[idx != p]
            _push_row(heap, pos, vel, eps, p, others, t, duration, counters)

    pos += (duration - t) * vel
    if not math.isfinite(float(np.sum(pos))):
        raise FloatingPointError("non-finite positions after flow")
    return pos, vel, events, states
