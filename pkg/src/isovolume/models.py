"""Synthetic B-spline models used as test scenes.

* ``twisted_bar``: a quadratic bar whose square cross-section turns a quarter
  revolution along its length and bulges slightly on its sides.
* ``collapsed_edge``: a trilinear wedge with one edge collapsed to a point
  (singular Jacobian along that edge) joined to a bent quadratic block.
* ``channel``: two quadratic blocks sharing a curved interface.
"""
from __future__ import annotations

import numpy as np

from .splinecore import BSplineVolume


def open_uniform_knots(n_basis: int, degree: int) -> np.ndarray:
    """Clamped knot vector on [0, 1] with uniformly spaced interior knots."""
    inner = np.linspace(0.0, 1.0, n_basis - degree + 1)
    return np.concatenate([np.zeros(degree), inner, np.ones(degree)])


def volume_from_net(net, degrees) -> BSplineVolume:
    net = np.asarray(net, dtype=float)
    knots = [open_uniform_knots(net.shape[a], degrees[a]) for a in range(3)]
    return BSplineVolume(knots, degrees, net)


def unit_cube(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> BSplineVolume:
    """Trilinear box, the identity map for the default corners."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    t = np.array([0.0, 1.0])
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return volume_from_net(lo + g * (hi - lo), (1, 1, 1))


def twisted_bar(length: float = 4.0, width: float = 1.0, twist: float = 0.5 * np.pi, bulge: float = 0.15, layers: int = 9):
    """Quadratic bar along z with a twisting, bulging square cross-section."""
    s = np.array([-0.5, 0.0, 0.5]) * width
    x, y = np.meshgrid(s, s, indexing="ij")
    # push the mid-side control points outwards so the faces are curved
    scale = np.ones((3, 3))
    scale[1, 0] = scale[1, 2] = scale[0, 1] = scale[2, 1] = 1.0 + bulge
    x, y = x * scale, y * scale
    net = np.empty((3, 3, layers, 3))
    for k, z in enumerate(np.linspace(0.0, length, layers)):
        a = twist * z / length
        ca, sa = np.cos(a), np.sin(a)
        net[:, :, k, 0] = ca * x - sa * y
        net[:, :, k, 1] = sa * x + ca * y
        net[:, :, k, 2] = z
    return volume_from_net(net, (2, 2, 2))


def collapsed_wedge(size: float = 1.0) -> BSplineVolume:
    """(u, v, w) -> size * (u (1 - v (1 - w)), v, w).

    The edge v = 1, w = 0 collapses to a single point, where the Jacobian
    determinant ``1 - v (1 - w)`` vanishes.
    """
    t = np.array([0.0, 1.0])
    u, v, w = np.meshgrid(t, t, t, indexing="ij")
    net = np.stack([u * (1 - v * (1 - w)), v, w], axis=-1) * size
    return volume_from_net(net, (1, 1, 1))


def bent_block(size: float = 1.0, height: float = 1.0, bend: float = 0.35, z0: float = 1.0) -> BSplineVolume:
    """Quadratic block on top of the wedge, leaning in x as z grows.

    Its face w = 0 coincides with the wedge face w = 1.
    """
    t = np.array([0.0, 1.0])
    wz = np.array([0.0, 0.5, 1.0])
    u, v, w = np.meshgrid(t, t, wz, indexing="ij")
    shift = bend * w**2
    net = np.stack([(u + shift) * size, v * size, (z0 + w * height) * size], axis=-1)
    return volume_from_net(net, (1, 1, 2))


def collapsed_edge_assembly(size: float = 1.0) -> list[BSplineVolume]:
    return [collapsed_wedge(size), bent_block(size, z0=1.0)]


def channel(bump: float = 0.15) -> list[BSplineVolume]:
    """Two quadratic blocks side by side in x with a curved shared face."""
    ys = np.linspace(0.0, 1.0, 3)
    zs = np.linspace(0.0, 1.0, 3)
    y, z = np.meshgrid(ys, zs, indexing="ij")
    iface = 1.0 + bump * (4 * y * (1 - y))  # middle control point bulges out

    def block(x_lo, x_hi):
        net = np.empty((3, 3, 3, 3))
        for i, a in enumerate((0.0, 0.5, 1.0)):
            net[i, :, :, 0] = (1 - a) * x_lo + a * x_hi
            net[i, :, :, 1] = y
            net[i, :, :, 2] = z
        return volume_from_net(net, (2, 2, 2))

    left = block(np.zeros_like(iface), iface)
    right = block(iface, np.full_like(iface, 2.0))
    return [left, right]
