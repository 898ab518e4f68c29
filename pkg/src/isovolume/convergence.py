"""Convergence study of the inversion methods on an analytic test map.

A single segment from ``phi(p_front)`` to ``phi(p_back)`` is walked with every
requested method and sample distance. The error of a run is the largest
distance of a computed sample ``phi(p_i)`` from the straight line through the
segment::

    e = max_i || d_i - <d_i, v> v ||,   d_i = g_front - phi(p_i)

where ``v`` is the unit segment direction.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .analytic import DAMPED_WAVE_BACK, DAMPED_WAVE_FRONT, get_map
from .inversion import METHODS, IntegratorSpec, SegmentSampler

# sample distances 2^-6 ... 2^-9 (1.6e-2, 7.8e-3, 3.9e-3, 2.0e-3)
DEFAULT_DS = tuple(2.0 ** -k for k in range(6, 10))
DEFAULT_RF_TOLERANCES = (1e-3, 1e-14)


def line_error(phi, g_front, g_back, params) -> float:
    """Largest distance of ``phi(params)`` from the line through the segment."""
    g_front = np.asarray(g_front, dtype=float)
    d_seg = np.asarray(g_back, dtype=float) - g_front
    v = d_seg / np.linalg.norm(d_seg)
    d = g_front - phi(np.atleast_2d(params))
    perp = d - np.outer(d @ v, v)
    return float(np.linalg.norm(perp, axis=1).max())


def walk_segment(phi, p_front, p_back, spec: IntegratorSpec) -> np.ndarray:
    """Parameter points of every sample (including the front point)."""
    g_front = phi(np.atleast_2d(p_front))
    g_back = phi(np.atleast_2d(p_back))
    sampler = SegmentSampler(phi, p_front, g_front, g_back, spec)
    points = [np.asarray(p_front, dtype=float)]
    for _, p, _ in sampler.run():
        points.append(p[0])
    return np.array(points)


def observed_order(ds, errors) -> float:
    """Least-squares slope of log(error) against log(ds)."""
    ds = np.asarray(ds, dtype=float)
    e = np.asarray(errors, dtype=float)
    ok = e > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(ds[ok]), np.log(e[ok]), 1)[0])


@dataclass
class ConvergenceRow:
    label: str
    method: str
    c: float
    tol: float | None
    errors: list
    seconds: float

    def order(self, ds) -> float:
        return observed_order(ds, self.errors)


@dataclass
class ConvergenceTable:
    map_name: str
    ds: list
    rows: list = field(default_factory=list)

    def row(self, label: str) -> ConvergenceRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "map": self.map_name,
            "ds": list(self.ds),
            "rows": [
                {
                    "label": r.label,
                    "method": r.method,
                    "c": r.c,
                    "tol": r.tol,
                    "errors": list(r.errors),
                    "order": r.order(self.ds),
                    "seconds": r.seconds,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format(self) -> str:
        head = f"{'method':<18}" + "".join(f"{d:>10.1e}" for d in self.ds) + f"{'order':>8}"
        lines = [head]
        for r in self.rows:
            errs = "".join(f"{e:>10.1e}" for e in r.errors)
            lines.append(f"{r.label:<18}{errs}{r.order(self.ds):>8.2f}")
        return "\n".join(lines)


def convergence_study(
    map_name: str = "damped-wave",
    methods=METHODS,
    ds_list=DEFAULT_DS,
    c=None,
    tolerances=DEFAULT_RF_TOLERANCES,
    p_front=DAMPED_WAVE_FRONT,
    p_back=DAMPED_WAVE_BACK,
) -> ConvergenceTable:
    """Error of every method at every sample distance.

    ``c`` overrides the attraction constant of the ODE methods (by default
    100 for implicit Euler and 1 otherwise). Root finding gets one row per
    entry of ``tolerances``.
    """
    phi = get_map(map_name)
    g_front = phi(np.atleast_2d(p_front))[0]
    g_back = phi(np.atleast_2d(p_back))[0]
    table = ConvergenceTable(map_name, [float(d) for d in ds_list])
    for method in methods:
        runs = [(None, f"{method}")] if method != "rf" else [(t, f"rf (tol={t:g})") for t in tolerances]
        for tol, label in runs:
            t0 = time.perf_counter()
            errors = []
            for ds in ds_list:
                spec = IntegratorSpec(method, c=c, ds=float(ds), tol=tol)
                params = walk_segment(phi, p_front, p_back, spec)
                errors.append(line_error(phi, g_front, g_back, params))
            spec_c = IntegratorSpec(method, c=c).c
            table.rows.append(ConvergenceRow(label, method, float(spec_c), tol, errors, time.perf_counter() - t0))
    return table
