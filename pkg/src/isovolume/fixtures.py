"""Ready-made scenes built from the synthetic models."""
from __future__ import annotations

import numpy as np

from .models import channel, collapsed_edge_assembly, twisted_bar, volume_from_net
from .pipeline import Block, Scene, XI_FRACTION, default_integrator, scene_bounds
from .rayscene import Camera
from .shading import FieldSource, TransferFunction

FIXTURES = ("twisted-bar", "collapsed-edge", "channel")


def _finish(camera, blocks, nodes, method, supersample=True) -> Scene:
    lo, hi = scene_bounds(blocks)
    diag = float(np.linalg.norm(hi - lo))
    tf = TransferFunction.from_nodes(nodes, xi=diag * XI_FRACTION)
    return Scene(camera, blocks, tf, default_integrator(method, diag), supersample=supersample)


def twisted_bar_scene(width: int = 320, height: int = 240, method: str = "rk2") -> Scene:
    """Twisted bar colored by parametrization quality."""
    cam = Camera([3.0, -5.0, 2.0], [0.0, 0.0, 2.0], [0.0, 0.0, 1.0], np.radians(45.0), width, height)
    blocks = [Block(twisted_bar(), FieldSource("quality"), "bar")]
    nodes = [
        (0.85, (0.1, 0.2, 0.9), 0.004),
        (1.0, (0.1, 0.8, 0.2), 0.02),
        (1.15, (0.9, 0.1, 0.1), 0.08),
    ]
    return _finish(cam, blocks, nodes, method)


def bent_displacement():
    """Displacement spline on the bent block's parameter domain."""
    t = np.array([0.0, 1.0])
    u, v, w = np.meshgrid(t, t, np.array([0.0, 0.5, 1.0]), indexing="ij")
    return volume_from_net(np.stack([0.3 * w**2, 0.1 * u * w, 0.2 * v * w], axis=-1), (1, 1, 2))


def collapsed_edge_scene(width: int = 320, height: int = 240, method: str = "rk2") -> Scene:
    """Wedge with a collapsed edge (quality) below a bent block (von Mises)."""
    wedge, bent = collapsed_edge_assembly()
    cam = Camera([3.2, 3.6, -0.8], [0.6, 0.5, 1.0], [0.0, 0.0, 1.0], np.radians(40.0), width, height)
    blocks = [
        Block(wedge, FieldSource("quality"), "wedge"),
        Block(bent, FieldSource("vonmises", bent_displacement()), "bent"),
    ]
    nodes = [
        (0.0, (0.9, 0.1, 0.1), 0.08),
        (0.1, (0.9, 0.7, 0.1), 0.03),
        (0.3, (0.1, 0.7, 0.3), 0.01),
        (0.6, (0.1, 0.2, 0.9), 0.004),
    ]
    return _finish(cam, blocks, nodes, method)


def channel_scene(width: int = 320, height: int = 240, method: str = "rk2") -> Scene:
    """Two blocks with a shared curved face; the scalar field is the parameter u."""
    blocks = []
    for vol in channel():
        t = np.array([0.0, 0.5, 1.0])
        u = np.broadcast_to(t[:, None, None], (3, 3, 3))
        rho = volume_from_net(u[..., None], (2, 2, 2))
        blocks.append(Block(vol, FieldSource("rho", rho)))
    cam = Camera([1.0, -2.5, 2.2], [1.0, 0.5, 0.5], [0.0, 0.0, 1.0], np.radians(50.0), width, height)
    nodes = [(0.0, (0.2, 0.3, 0.9), 0.01), (1.0, (0.9, 0.6, 0.1), 0.04)]
    return _finish(cam, blocks, nodes, method)


def fixture_scene(name: str, width: int = 320, height: int = 240, method: str = "rk2") -> Scene:
    makers = {"twisted-bar": twisted_bar_scene, "collapsed-edge": collapsed_edge_scene, "channel": channel_scene}
    try:
        return makers[name](width, height, method)
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {FIXTURES}") from None
