"""Transfer functions, front-to-back compositing and derived scalar fields.

Compositing operates on batches: a :class:`CompositeState` holds one
accumulated color and opacity per ray.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARLY_TERMINATION = 0.999
FIELD_KINDS = ("rho", "quality", "vonmises")


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear map from scalar values to color and opacity.

    Parameters
    ----------
    values : (K,) strictly increasing node positions
    colors : (K, 3) rgb in [0, 1]
    alphas : (K,) opacity in [0, 1] per reference length ``xi``
    xi : reference length in world units
    """

    values: np.ndarray
    colors: np.ndarray
    alphas: np.ndarray
    xi: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        c = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        a = np.asarray(self.alphas, dtype=float).ravel()
        if v.size < 1 or c.shape[0] != v.size or a.size != v.size:
            raise ValueError("transfer function needs matching node, color and alpha lists")
        if np.any(np.diff(v) <= 0):
            raise ValueError("transfer function node values must be strictly increasing")
        if np.any((c < 0) | (c > 1)) or np.any((a < 0) | (a > 1)):
            raise ValueError("colors and opacities must lie in [0, 1]")
        if not self.xi > 0:
            raise ValueError("reference length xi must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "xi", float(self.xi))

    @classmethod
    def from_nodes(cls, nodes, xi: float = 1.0) -> "TransferFunction":
        """Build from ``[(value, (r, g, b), alpha), ...]``."""
        nodes = list(nodes)
        return cls(
            np.array([n[0] for n in nodes], dtype=float),
            np.array([n[1] for n in nodes], dtype=float),
            np.array([n[2] for n in nodes], dtype=float),
            xi,
        )

    def with_xi(self, xi: float) -> "TransferFunction":
        return TransferFunction(self.values, self.colors, self.alphas, xi)

    def nodes(self) -> list:
        return [(float(v), tuple(map(float, c)), float(a)) for v, c, a in zip(self.values, self.colors, self.alphas)]


def sample_transfer(tf: TransferFunction, value):
    """Color (..., 3) and opacity (...) at ``value``, clamped to the end nodes."""
    x = np.asarray(value, dtype=float)
    if tf.values.size == 1:
        shape = x.shape
        return np.broadcast_to(tf.colors[0], shape + (3,)).copy(), np.full(shape, tf.alphas[0])
    color = np.stack([np.interp(x, tf.values, tf.colors[:, k]) for k in range(3)], axis=-1)
    alpha = np.interp(x, tf.values, tf.alphas)
    return color, alpha


@dataclass
class CompositeState:
    """Accumulated premultiplied color and opacity of a batch of rays."""

    color: np.ndarray
    alpha: np.ndarray

    @classmethod
    def empty(cls, n: int = 1) -> "CompositeState":
        return cls(np.zeros((n, 3)), np.zeros(n))

    @property
    def terminated(self) -> np.ndarray:
        return self.alpha > EARLY_TERMINATION

    def copy(self) -> "CompositeState":
        return CompositeState(self.color.copy(), self.alpha.copy())

    def take(self, rows) -> "CompositeState":
        return CompositeState(self.color[rows], self.alpha[rows])

    def put(self, rows, other: "CompositeState") -> None:
        self.color[rows] = other.color
        self.alpha[rows] = other.alpha

    def over(self, background) -> np.ndarray:
        """Final color with ``background`` (..., 3) showing through the remaining transparency."""
        return self.color + (1.0 - self.alpha)[..., None] * np.asarray(background, dtype=float)


def composite_step(state: CompositeState, c_src, a_src, ds, xi: float) -> CompositeState:
    """One front-to-back compositing step with opacity correction for length ``ds``.

    Updates ``state`` in place and returns it.
    """
    a_src = np.asarray(a_src, dtype=float)
    if np.any((a_src < 0) | (a_src > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    ds = np.asarray(ds, dtype=float)
    T = np.power(1.0 - a_src, ds / xi)
    w = (1.0 - T) * (1.0 - state.alpha)
    state.color += w[..., None] * np.asarray(c_src, dtype=float)
    state.alpha += w
    return state


def _crossing_fractions(tf: TransferFunction, rho_prev, rho_cur):
    """Sorted fractions in [0, 1] where the linear ramp crosses a node (N, K + 2)."""
    d = rho_cur - rho_prev
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (tf.values[None, :] - rho_prev[:, None]) / d[:, None]
    inside = (t > 0) & (t < 1)
    t = np.where(inside, t, 1.0)
    n = rho_prev.shape[0]
    return np.sort(np.concatenate([np.zeros((n, 1)), t, np.ones((n, 1))], axis=1), axis=1)


def supersample_segment(
    tf: TransferFunction,
    rho_prev,
    rho_cur,
    ds,
    state: CompositeState,
    substeps: int | None = None,
    per_piece: int = 2,
) -> CompositeState:
    """Composite an interval across which the field is taken to be linear.

    With an explicit ``substeps`` the interval is split into that many equal
    substeps, each composited at its midpoint value. By default the interval
    is first cut where the value ramp crosses transfer-function nodes, so that
    color and opacity are linear on every piece, and each piece receives
    ``per_piece`` equal substeps.
    """
    rho_prev = np.atleast_1d(np.asarray(rho_prev, dtype=float))
    rho_cur = np.atleast_1d(np.asarray(rho_cur, dtype=float))
    n = rho_prev.shape[0]
    ds = np.broadcast_to(np.asarray(ds, dtype=float), (n,))
    if substeps is not None:
        if substeps < 1:
            raise ValueError("substeps must be at least 1")
        cuts = np.linspace(0.0, 1.0, substeps + 1)[None, :].repeat(n, axis=0)
        inner = 1
    else:
        if per_piece < 1:
            raise ValueError("per_piece must be at least 1")
        cuts = _crossing_fractions(tf, rho_prev, rho_cur)
        inner = per_piece
    for j in range(cuts.shape[1] - 1):
        a, b = cuts[:, j], cuts[:, j + 1]
        width = (b - a) / inner
        if not np.any(width > 0):
            continue
        for k in range(inner):
            tm = a + (k + 0.5) * width
            c, al = sample_transfer(tf, rho_prev + tm * (rho_cur - rho_prev))
            composite_step(state, c, al, width * ds, tf.xi)
    return state


# ---------------------------------------------------------------------------
# derived fields
# ---------------------------------------------------------------------------


def field_param_quality(jacobian) -> np.ndarray:
    """det(J) / ||J||_F, and 0 where the Frobenius norm vanishes."""
    J = np.asarray(jacobian, dtype=float)
    det = np.linalg.det(J)
    fro = np.sqrt(np.sum(J * J, axis=(-2, -1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(fro > 0, det / np.where(fro > 0, fro, 1.0), 0.0)


def strain_tensor(jac_phi, jac_u):
    """Symmetrized displacement gradient in geometry coordinates.

    Solves ``J_phi^T X = J_u^T`` for ``X``, the transpose of the gradient of
    ``u o phi^-1``, and returns ``(X + X^T) / 2`` plus a mask of points with a
    singular ``J_phi``.
    """
    Jp = np.asarray(jac_phi, dtype=float)
    Ju = np.asarray(jac_u, dtype=float)
    single = Jp.ndim == 2
    if single:
        Jp, Ju = Jp[None], Ju[None]
    det = np.linalg.det(Jp)
    scale = np.maximum(np.sum(Jp * Jp, axis=(-2, -1)) ** 1.5, np.finfo(float).tiny)
    singular = np.abs(det) <= 1e-12 * scale
    safe = np.where(singular[:, None, None], np.eye(3), Jp)
    X = np.linalg.solve(np.swapaxes(safe, -1, -2), np.swapaxes(Ju, -1, -2))
    sigma = 0.5 * (X + np.swapaxes(X, -1, -2))
    sigma[singular] = np.nan
    if single:
        return sigma[0], singular[0]
    return sigma, singular


def von_mises_value(sigma) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    s11, s22, s33 = s[..., 0, 0], s[..., 1, 1], s[..., 2, 2]
    s12, s23, s31 = s[..., 0, 1], s[..., 1, 2], s[..., 2, 0]
    return 0.5 * ((s11 - s22) ** 2 + (s22 - s33) ** 2 + (s33 - s11) ** 2 + 6.0 * (s12**2 + s23**2 + s31**2))


def field_von_mises(jac_phi, jac_u) -> np.ndarray:
    """Von Mises measure of the strain induced by displacement ``u``.

    Points where ``J_phi`` is singular yield NaN.
    """
    sigma, _ = strain_tensor(jac_phi, jac_u)
    return von_mises_value(sigma)


@dataclass(frozen=True)
class FieldSource:
    """Which scalar is rendered for a block.

    ``kind`` is ``"rho"`` (a scalar spline on the parameter domain),
    ``"quality"`` (of the geometry map) or ``"vonmises"`` (needs a
    displacement spline with three components).
    """

    kind: str = "rho"
    spline: object = None

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}; choose from {FIELD_KINDS}")
        if self.kind == "rho" and self.spline is None:
            raise ValueError("a rho field needs a scalar spline")
        if self.kind == "vonmises":
            if self.spline is None or getattr(self.spline, "dim", 3) != 3:
                raise ValueError("a von Mises field needs a displacement spline with three components")

    @property
    def needs_geometry_jacobian(self) -> bool:
        return self.kind != "rho"

    def evaluate(self, p, jac_phi=None):
        """Field values at parameter points ``p`` (N, 3) and a mask of failed points."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if self.kind == "rho":
            v = self.spline.jet(p, 0).value
            v = v[:, 0] if v.ndim == 2 else v
            return v, np.zeros(p.shape[0], bool)
        if jac_phi is None:
            raise ValueError(f"{self.kind} field needs the geometry Jacobian")
        if self.kind == "quality":
            return field_param_quality(jac_phi), np.zeros(p.shape[0], bool)
        ju = self.spline.jet(p, 1).jacobian
        sigma, bad = strain_tensor(jac_phi, ju)
        return von_mises_value(sigma), bad
