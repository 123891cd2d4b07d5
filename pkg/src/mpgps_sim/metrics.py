"""Run statistics: delay, loss, throughput, power, and the fairness gauge.

The fairness gauge follows the classic fair-queueing yardstick: over any
window in which two flows are both continuously backlogged, their
weight-normalised service amounts should stay close. We report the worst
absolute normalised-service difference over all flow pairs and all windows
up to a configurable length, evaluated on the breakpoints of the piecewise
linear service curves.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Metrics:
    """Aggregate outcome of one run; times in seconds, powers in watts."""

    arrivals: int = 0
    delivered: int = 0
    dropped: int = 0
    residual: int = 0
    frames: int = 0
    sim_time: float = 0.0
    avg_delay: float = float("nan")
    loss_rate: float = float("nan")
    throughput: float = float("nan")     # delivered packets per OFDM symbol
    avg_power: float = float("nan")
    per_bit_power: float = float("nan")  # transmit power per transmitted bit
    eb_n0_db: float = float("nan")
    fairness: float = float("nan")       # bits, worst normalised service gap
    bound_violations: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "bound_violations"}
        out["bound_violations"] = sum(self.bound_violations.values())
        return out


def service_curves(frames, n_flows: int, packet_bits: int):
    """Piecewise-linear transmitted-service curves from the frame records.

    ``frames`` yields (start, depart, g) with non-overlapping spans in order.
    Within a frame each flow accrues g_k * packet_bits uniformly. Returns a
    list of (times, bits) breakpoint arrays, one per flow.
    """
    starts, departs, gs = [], [], []
    for start, depart, g in frames:
        starts.append(start)
        departs.append(depart)
        gs.append(g)
    if not starts:
        zero = np.zeros(1)
        return [(zero, zero.copy()) for _ in range(n_flows)]
    g_mat = np.asarray(gs, dtype=float)           # (F, K)
    times = np.empty(2 * len(starts))
    times[0::2] = starts
    times[1::2] = departs
    curves = []
    for k in range(n_flows):
        inc = g_mat[:, k] * packet_bits
        bits = np.zeros_like(times)
        bits[1::2] = np.cumsum(inc)
        bits[2::2] = bits[1:-1:2]                 # flat across idle gaps
        curves.append((times, bits))
    return curves


def busy_intervals(events, end_time: float):
    """Maximal intervals with positive in-system count from (+1/-1) events.

    ``events`` is a list of (time, delta); simultaneous events merge, so a
    packet handed over at one instant never opens a fake gap.
    """
    if not events:
        return []
    order = sorted(events, key=lambda e: e[0])
    out = []
    count = 0
    open_t = None
    i = 0
    while i < len(order):
        t = order[i][0]
        while i < len(order) and order[i][0] == t:
            count += order[i][1]
            i += 1
        if count > 0 and open_t is None:
            open_t = t
        elif count <= 0 and open_t is not None:
            out.append((open_t, t))
            open_t = None
    if open_t is not None:
        out.append((open_t, end_time))
    return [(a, b) for a, b in out if b > a]


def _intersect(iv_a, iv_b):
    out = []
    i = j = 0
    while i < len(iv_a) and j < len(iv_b):
        lo = max(iv_a[i][0], iv_b[j][0])
        hi = min(iv_a[i][1], iv_b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if iv_a[i][1] <= iv_b[j][1]:
            i += 1
        else:
            j += 1
    return out


def _window_extreme(times: np.ndarray, values: np.ndarray, window: float) -> float:
    """Max |values[b] - values[a]| over index pairs with times[b]-times[a] <= window."""
    best = 0.0
    lo = 0
    maxq: deque[int] = deque()
    minq: deque[int] = deque()
    for b in range(len(times)):
        while maxq and values[maxq[-1]] <= values[b]:
            maxq.pop()
        maxq.append(b)
        while minq and values[minq[-1]] >= values[b]:
            minq.pop()
        minq.append(b)
        while times[maxq[0]] < times[b] - window:
            maxq.popleft()
        while times[minq[0]] < times[b] - window:
            minq.popleft()
        best = max(best, values[maxq[0]] - values[b], values[b] - values[minq[0]])
    return best


def fairness_metric(curves, weights, window: float, flow_busy) -> float:
    """Worst weight-normalised service gap over jointly-backlogged windows.

    curves: per-flow (times, bits) breakpoints of transmitted service.
    window: maximum window length, in the same time unit as the curves.
    flow_busy: per-flow list of (start, end) backlogged intervals.
    """
    n = len(curves)
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            joint = _intersect(flow_busy[i], flow_busy[j])
            if not joint:
                continue
            t_i, b_i = curves[i]
            t_j, b_j = curves[j]
            for lo, hi in joint:
                grid = np.concatenate((
                    t_i[(t_i > lo) & (t_i < hi)],
                    t_j[(t_j > lo) & (t_j < hi)],
                    [lo, hi]))
                grid = np.unique(grid)
                f = (np.interp(grid, t_i, b_i) / weights[i]
                     - np.interp(grid, t_j, b_j) / weights[j])
                worst = max(worst, _window_extreme(grid, f, window))
    return worst
