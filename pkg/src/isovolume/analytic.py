"""Closed-form test maps with exact first and second derivatives.

Planar maps f(x, y) are embedded in three dimensions as
(x, y, z) -> (f1(x, y), f2(x, y), z) so that they can be used wherever a
volume geometry is expected.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .splinecore import SplineJet


class AnalyticMap:
    """A map R^3 -> R^3 given by vectorized value/Jacobian/Hessian callables.

    ``func(p)`` takes points of shape (N, 3) and returns
    ``(value (N,3), jacobian (N,3,3), hessian (N,3,3,3))``.
    """

    def __init__(self, name: str, func: Callable):
        self.name = name
        self._func = func

    def jet(self, points, order: int = 2) -> SplineJet:
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        value, jac, hess = self._func(np.atleast_2d(pts))
        if order < 2:
            hess = None
        if order < 1:
            jac = None
        if single:
            return SplineJet(value[0], None if jac is None else jac[0], None if hess is None else hess[0])
        return SplineJet(value, jac, hess)

    def __call__(self, points) -> np.ndarray:
        return self.jet(points, 0).value

    def take(self, idx):
        return self

    def self_test(self, n: int = 32, seed: int = 0, h: float = 1e-6) -> float:
        """Largest relative mismatch between the closed-form derivatives and central differences."""
        rng = np.random.default_rng(seed)
        p = 0.1 + 0.8 * rng.random((n, 3))
        jet = self.jet(p, 2)
        worst = 0.0
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            jp, jm = self.jet(p + e, 1), self.jet(p - e, 1)
            fd_j = (jp.value - jm.value) / (2 * h)
            fd_h = (jp.jacobian - jm.jacobian) / (2 * h)
            scale_j = 1.0 + np.abs(jet.jacobian).max()
            scale_h = 1.0 + np.abs(jet.hessian).max()
            worst = max(worst, np.abs(fd_j - jet.jacobian[:, :, a]).max() / scale_j)
            worst = max(worst, np.abs(fd_h - jet.hessian[:, :, :, a]).max() / scale_h)
        return worst

    def __repr__(self):
        return f"AnalyticMap({self.name!r})"


def _identity(p):
    n = p.shape[0]
    return p.copy(), np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3, 3, 3))


def affine_map(A, b, name: str = "affine") -> AnalyticMap:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)

    def func(p):
        n = p.shape[0]
        return p @ A.T + b, np.broadcast_to(A, (n, 3, 3)).copy(), np.zeros((n, 3, 3, 3))

    return AnalyticMap(name, func)


def _sine_shear(p):
    """(x, 0.3 sin(2 pi x) + y, z)."""
    x = p[:, 0]
    n = p.shape[0]
    value = p.copy()
    value[:, 1] = 0.3 * np.sin(2 * np.pi * x) + p[:, 1]
    jac = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    jac[:, 1, 0] = 0.6 * np.pi * np.cos(2 * np.pi * x)
    hess = np.zeros((n, 3, 3, 3))
    hess[:, 1, 0, 0] = -1.2 * np.pi**2 * np.sin(2 * np.pi * x)
    return value, jac, hess


def _damped_wave(p):
    """(2x, y + 0.3 (1 - x) sin(10 pi x), z)."""
    x = p[:, 0]
    n = p.shape[0]
    s, c = np.sin(10 * np.pi * x), np.cos(10 * np.pi * x)
    value = p.copy()
    value[:, 0] = 2 * x
    value[:, 1] = p[:, 1] + 0.3 * (1 - x) * s
    jac = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    jac[:, 0, 0] = 2.0
    jac[:, 1, 0] = -0.3 * s + 3 * np.pi * (1 - x) * c
    hess = np.zeros((n, 3, 3, 3))
    hess[:, 1, 0, 0] = -6 * np.pi * c - 30 * np.pi**2 * (1 - x) * s
    return value, jac, hess


_REGISTRY: dict[str, Callable[[], AnalyticMap]] = {
    "identity": lambda: AnalyticMap("identity", _identity),
    "sine-shear": lambda: AnalyticMap("sine-shear", _sine_shear),
    "damped-wave": lambda: AnalyticMap("damped-wave", _damped_wave),
}

# endpoints of the convergence-study segment on the damped-wave map
DAMPED_WAVE_FRONT = np.array([0.0, 0.3, 0.5])
DAMPED_WAVE_BACK = np.array([1.0, 0.7, 0.5])


def get_map(name: str) -> AnalyticMap:
    """Look up a registered map and verify its derivatives."""
    try:
        m = _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown map {name!r}; known: {sorted(_REGISTRY)}") from None
    err = m.self_test()
    if err > 1e-5:
        raise RuntimeError(f"map {name} failed its derivative self-test ({err:.2e})")
    return m


def registered_maps() -> list[str]:
    return sorted(_REGISTRY)
