"""Pinhole camera, primary rays, screen projection and pixel-accuracy metrics.

Pixel ``(i, j)`` is column ``i`` and row ``j`` of an image stored row-major
with the origin at the top-left corner; its center sits at screen position
``(i + 0.5, j + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ProjectionError(ValueError):
    """Raised when a point at or behind the eye is projected."""


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Camera:
    """Perspective camera with square pixels.

    ``fov_y`` is the full vertical field of view in radians and ``near`` the
    distance of the near clip plane along the viewing axis.
    """

    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 1e-3
    forward: np.ndarray = field(init=False, repr=False)
    right: np.ndarray = field(init=False, repr=False)
    true_up: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        eye = np.asarray(self.eye, dtype=float)
        look = np.asarray(self.look_at, dtype=float)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not self.near > 0:
            raise ValueError("near plane distance must be positive")
        if not 0 < self.fov_y < np.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        fwd = _unit(look - eye)
        right = np.cross(fwd, np.asarray(self.up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right = _unit(right)
        up = np.cross(right, fwd)
        object.__setattr__(self, "eye", eye)
        object.__setattr__(self, "look_at", look)
        object.__setattr__(self, "up", np.asarray(self.up, dtype=float))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "true_up", up)

    @property
    def tan_y(self) -> float:
        return float(np.tan(0.5 * self.fov_y))

    @property
    def tan_x(self) -> float:
        return self.tan_y * self.width / self.height

    def pixel_size(self, zdepth) -> np.ndarray:
        """World-space edge length of a pixel at viewing-axis depth ``zdepth``."""
        return 2.0 * np.asarray(zdepth, dtype=float) * self.tan_y / self.height

    def directions(self, screen_xy) -> np.ndarray:
        """Unit ray directions through continuous screen positions (..., 2)."""
        xy = np.asarray(screen_xy, dtype=float)
        sx = (xy[..., 0] - 0.5 * self.width) / (0.5 * self.width) * self.tan_x
        sy = -(xy[..., 1] - 0.5 * self.height) / (0.5 * self.height) * self.tan_y
        d = self.forward + sx[..., None] * self.right + sy[..., None] * self.true_up
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_centers(self) -> np.ndarray:
        """Screen positions of all pixel centers, shape (H*W, 2), row-major."""
        jj, ii = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1)

    def zdepth(self, g) -> np.ndarray:
        return (np.asarray(g, dtype=float) - self.eye) @ self.forward

    def project(self, g) -> np.ndarray:
        """Continuous perspective projection of world points (..., 3) to pixels."""
        d = np.asarray(g, dtype=float) - self.eye
        z = d @ self.forward
        if np.any(z <= 0):
            raise ProjectionError("point is not in front of the eye")
        sx = (d @ self.right) / z
        sy = (d @ self.true_up) / z
        x = sx / self.tan_x * (0.5 * self.width) + 0.5 * self.width
        y = -sy / self.tan_y * (0.5 * self.height) + 0.5 * self.height
        return np.stack([x, y], axis=-1)

    def frustum_margin(self, pixels, g) -> np.ndarray:
        """Signed distance from ``g`` to the nearest side plane of the pixel frustum.

        Positive inside the frustum. A ball of this radius around ``g`` lies
        completely inside the frustum, so every point of the ball projects
        into the pixel.
        """
        px = np.asarray(pixels, dtype=float)
        d = np.asarray(g, dtype=float) - self.eye
        i, j = px[..., 0], px[..., 1]
        sx_l = (i - 0.5 * self.width) / (0.5 * self.width) * self.tan_x
        sx_r = (i + 1 - 0.5 * self.width) / (0.5 * self.width) * self.tan_x
        sy_t = -(j - 0.5 * self.height) / (0.5 * self.height) * self.tan_y
        sy_b = -(j + 1 - 0.5 * self.height) / (0.5 * self.height) * self.tan_y
        f, r, u = self.forward, self.right, self.true_up
        dr, du, df = d @ r, d @ u, d @ f
        # plane through the eye spanned by (f + s r) and u has normal r - s f
        left = (dr - sx_l * df) / np.sqrt(1 + sx_l**2)
        right = (sx_r * df - dr) / np.sqrt(1 + sx_r**2)
        top = (sy_t * df - du) / np.sqrt(1 + sy_t**2)
        bottom = (du - sy_b * df) / np.sqrt(1 + sy_b**2)
        return np.minimum(np.minimum(left, right), np.minimum(top, bottom))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


@dataclass(frozen=True)
class RaySegment:
    """Straight piece of a view-ray between an entry and an exit point."""

    g_front: np.ndarray
    g_back: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.asarray(self.g_back) - np.asarray(self.g_front)))

    @property
    def v_par(self) -> np.ndarray:
        return _unit(np.asarray(self.g_back, dtype=float) - np.asarray(self.g_front, dtype=float))


def primary_ray(cam: Camera, px) -> Ray:
    """Ray from the eye through the center of pixel ``px = (i, j)``."""
    i, j = int(px[0]), int(px[1])
    if not (0 <= i < cam.width and 0 <= j < cam.height):
        raise ValueError(f"pixel {px} outside the {cam.width}x{cam.height} image")
    d = cam.directions(np.array([i + 0.5, j + 0.5]))
    return Ray(cam.eye.copy(), d, (i, j))


def project_to_screen(cam: Camera, g) -> np.ndarray:
    return cam.project(g)


def delta_p(cam: Camera, px, g) -> np.ndarray:
    """Twice the max-norm distance between the projection of ``g`` and the pixel center."""
    center = np.asarray(px, dtype=float) + 0.5
    return 2.0 * np.max(np.abs(cam.project(g) - center), axis=-1)


def ray_depth(ray: Ray, g) -> np.ndarray:
    """Distance from the ray origin to the orthogonal projection of ``g`` onto the ray."""
    return np.sum((np.asarray(g, dtype=float) - ray.origin) * ray.direction, axis=-1)
