"""Knot vectors and tensor-product B-spline evaluation.

Volumes (three parameters) and boundary patches (two parameters) share the
same evaluation kernel. Every evaluation computes the one-dimensional basis
functions and their derivatives once per direction and reuses them for the
value, the Jacobian and the Hessian.

Parameter domains are normalized to the unit interval in every direction at
construction time, so all derivatives are taken with respect to the
normalized parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when a parameter value lies outside the spline domain."""


# ---------------------------------------------------------------------------
# knot vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnotVector:
    """Non-decreasing knot sequence together with its polynomial degree."""

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        p = int(self.degree)
        if p < 0:
            raise ValueError("degree must be non-negative")
        if knots.ndim != 1 or len(knots) < 2 * (p + 1):
            raise ValueError(
                f"knot vector of degree {p} needs at least {2 * (p + 1)} knots, got {knots.size}"
            )
        if np.any(np.diff(knots) < 0):
            raise ValueError("knot vector must be non-decreasing")
        if not knots[p] < knots[len(knots) - p - 1]:
            raise ValueError("knot vector has no non-degenerate span")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", p)

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        p = self.degree
        return float(self.knots[p]), float(self.knots[self.n_basis])

    def normalized(self) -> "KnotVector":
        """Return the affinely rescaled knot vector whose domain is [0, 1]."""
        a, b = self.domain
        return KnotVector((self.knots - a) / (b - a), self.degree)

    def greville(self) -> np.ndarray:
        """Greville abscissae (knot averages), one per basis function."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array(
            [self.knots[i + 1 : i + p + 1].mean() for i in range(self.n_basis)]
        )


def find_span(kv: KnotVector, t):
    """Index of the knot span containing ``t``.

    Works on scalars and arrays. The span satisfies
    ``knots[span] <= t < knots[span + 1]``; at the right end of the domain the
    last non-degenerate span is returned.
    """
    knots = kv.knots
    lo, hi = kv.domain
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < lo) or np.any(t_arr > hi) or np.any(np.isnan(t_arr)):
        raise DomainError(f"parameter outside [{lo}, {hi}]")
    span = np.searchsorted(knots, t_arr, side="right") - 1
    span = np.clip(span, kv.degree, kv.n_basis - 1)
    if np.ndim(t) == 0:
        return int(span)
    return span


def _basis_ders(knots: np.ndarray, p: int, span: np.ndarray, t: np.ndarray, nders: int) -> np.ndarray:
    """Vectorized basis functions and derivatives (The NURBS Book, A2.3).

    Returns an array of shape (N, nders + 1, p + 1); entry [:, k, r] is the
    k-th derivative of basis function ``span - p + r``.
    """
    n_pts = t.shape[0]
    out = np.zeros((n_pts, nders + 1, p + 1))
    ndu = np.zeros((n_pts, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((n_pts, p + 1))
    right = np.zeros((n_pts, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(n_pts)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved
    out[:, 0, :] = ndu[:, :, p]

    top = min(nders, p)
    for r in range(p + 1):
        a = np.zeros((n_pts, 2, p + 1))
        a[:, 0, 0] = 1.0
        s1, s2 = 0, 1
        for k in range(1, top + 1):
            d = np.zeros(n_pts)
            rk, pk = r - k, p - k
            if r >= k:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d += a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d += a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                d += a[:, s2, k] * ndu[:, r, pk]
            out[:, k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, top + 1):
        out[:, k, :] *= fac
        fac *= p - k
    return out


def basis_with_derivatives(kv: KnotVector, span, t, nders: int = 0) -> np.ndarray:
    """Non-zero basis functions on ``span`` and their derivatives at ``t``.

    Parameters
    ----------
    kv : KnotVector
    span : int or array of int
        Span index as returned by :func:`find_span`.
    t : float or array
        Parameter value(s).
    nders : int
        Highest derivative order requested (0, 1 or 2). Derivatives of order
        above the degree are identically zero.

    Returns
    -------
    ndarray
        Shape ``(nders + 1, p + 1)`` for scalar input, ``(N, nders + 1, p + 1)``
        for array input. Row ``k`` holds the k-th derivatives of the basis
        functions ``span - p, ..., span``.
    """
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    span_arr = np.broadcast_to(np.atleast_1d(np.asarray(span, dtype=int)), t_arr.shape)
    out = _basis_ders(kv.knots, kv.degree, span_arr, t_arr, nders)
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# tensor-product splines
# ---------------------------------------------------------------------------


@dataclass
class SplineJet:
    """Value and derivatives of a map at one or many parameter points.

    For a batch of N points ``value`` has shape (N, d), ``jacobian``
    (N, d, k) and ``hessian`` (N, d, k, k), where k is the number of
    parameters. Single-point evaluation drops the leading axis.
    Derivatives that were not requested are ``None``.
    """

    value: np.ndarray
    jacobian: np.ndarray | None = None
    hessian: np.ndarray | None = None


class TensorSpline:
    """Tensor-product B-spline with ``k`` parameters and values in R^d."""

    def __init__(self, knots: Sequence, degrees, coefs):
        coefs = np.asarray(coefs, dtype=float)
        ndim = len(knots)
        if np.ndim(degrees) == 0:
            degrees = [int(degrees)] * ndim
        if len(degrees) != ndim:
            raise ValueError("one degree per parameter direction is required")
        kvs = []
        for kn, p in zip(knots, degrees):
            kv = kn if isinstance(kn, KnotVector) else KnotVector(kn, p)
            if kv.degree != int(p):
                raise ValueError("knot vector degree disagrees with degrees")
            kvs.append(kv)
        if coefs.ndim == ndim:
            coefs = coefs[..., None]
        expected = tuple(kv.n_basis for kv in kvs)
        if coefs.ndim != ndim + 1 or coefs.shape[:ndim] != expected:
            raise ValueError(f"control net shape {coefs.shape[:ndim]} does not match knots {expected}")
        self.original_domains = [kv.domain for kv in kvs]
        self.knot_vectors = [kv.normalized() for kv in kvs]
        self.coefs = np.ascontiguousarray(coefs)
        self.coefs.setflags(write=False)

    @property
    def ndim(self) -> int:
        return len(self.knot_vectors)

    @property
    def dim(self) -> int:
        return self.coefs.shape[-1]

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(kv.degree for kv in self.knot_vectors)

    def __call__(self, points) -> np.ndarray:
        return self.jet(points, 0).value

    def jet(self, points, order: int = 2) -> SplineJet:
        """Evaluate value and, for ``order`` >= 1 / 2, Jacobian and Hessian."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.ndim:
            raise ValueError(f"expected points with {self.ndim} coordinates")
        n_pts = pts.shape[0]
        k = self.ndim
        bases, index = [], []
        for a, kv in enumerate(self.knot_vectors):
            span = find_span(kv, pts[:, a])
            span = np.atleast_1d(span)
            bases.append(_basis_ders(kv.knots, kv.degree, span, pts[:, a], order))
            index.append(span[:, None] - kv.degree + np.arange(kv.degree + 1))
        # gather the local control net, shape (N, p0+1, ..., d)
        grids = []
        for a in range(k):
            shape = [n_pts] + [1] * k
            shape[a + 1] = index[a].shape[1]
            grids.append(index[a].reshape(shape))
        # contract one parameter direction at a time; afterwards
        # table[n, o_0, ..., o_{k-1}] is the mixed partial of orders o_a
        table = self.coefs[tuple(grids)]
        for a in range(k - 1, -1, -1):
            moved = np.moveaxis(table, a + 1, -2)
            basis = bases[a].reshape((n_pts,) + (1,) * (k - 1) + bases[a].shape[1:])
            table = np.moveaxis(basis @ moved, -2, a + 1)

        def partial(orders):
            return table[(slice(None),) + tuple(orders)]

        value = partial((0,) * k)
        jac = hess = None
        if order >= 1:
            jac = np.empty((n_pts, self.dim, k))
            for a in range(k):
                o = [0] * k
                o[a] = 1
                jac[:, :, a] = partial(o)
        if order >= 2:
            hess = np.empty((n_pts, self.dim, k, k))
            for a, b in product(range(k), repeat=2):
                if b < a:
                    continue
                o = [0] * k
                o[a] += 1
                o[b] += 1
                hess[:, :, a, b] = partial(o)
                hess[:, :, b, a] = hess[:, :, a, b]
        if single:
            return SplineJet(value[0], None if jac is None else jac[0], None if hess is None else hess[0])
        return SplineJet(value, jac, hess)


class BSplineVolume(TensorSpline):
    """Trivariate tensor-product B-spline on the unit cube."""

    def __init__(self, knots: Sequence, degrees, coefs):
        if len(knots) != 3:
            raise ValueError("a volume needs three knot vectors")
        super().__init__(knots, degrees, coefs)

    def take(self, idx):
        return self


class BSplinePatch(TensorSpline):
    """Bivariate tensor-product B-spline on the unit square."""

    def __init__(self, knots: Sequence, degrees, coefs):
        if len(knots) != 2:
            raise ValueError("a patch needs two knot vectors")
        super().__init__(knots, degrees, coefs)


def eval_volume(vol: TensorSpline, p, jet_order: int = 0) -> SplineJet:
    """Evaluate ``vol`` and its derivatives up to ``jet_order`` at ``p``."""
    return vol.jet(p, jet_order)


# ---------------------------------------------------------------------------
# boundary patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryPatch:
    """Restriction of a volume to one face of the parameter cube.

    ``axis`` is the fixed parameter direction and ``side`` its value (0 or 1).
    The patch parameters (s, t) run along the remaining two directions in
    increasing order. ``orientation`` is +1 when ds x dt points along the
    outward normal of the parameter cube and -1 otherwise.
    """

    surface: BSplinePatch
    axis: int
    side: int

    @property
    def free_axes(self) -> tuple[int, int]:
        a, b = [x for x in range(3) if x != self.axis]
        return a, b

    @property
    def orientation(self) -> int:
        a, b = self.free_axes
        normal = np.cross(np.eye(3)[a], np.eye(3)[b])[self.axis]
        outward = 1 if self.side == 1 else -1
        return int(normal * outward)

    def embed(self, st) -> np.ndarray:
        """Map patch parameters (..., 2) to points (..., 3) of the cube face."""
        st = np.asarray(st, dtype=float)
        out = np.empty(st.shape[:-1] + (3,))
        a, b = self.free_axes
        out[..., a] = st[..., 0]
        out[..., b] = st[..., 1]
        out[..., self.axis] = float(self.side)
        return out


def extract_boundary_patches(vol: BSplineVolume) -> list[BoundaryPatch]:
    """The six faces u=0, u=1, v=0, v=1, w=0, w=1 as bivariate patches."""
    patches = []
    for axis in range(3):
        kv = vol.knot_vectors[axis]
        others = [a for a in range(3) if a != axis]
        for side in (0, 1):
            t = float(side)
            span = find_span(kv, t)
            basis = basis_with_derivatives(kv, span, t, 0)[0]
            idx = np.arange(span - kv.degree, span + 1)
            slab = np.take(vol.coefs, idx, axis=axis)
            face = np.tensordot(basis, np.moveaxis(slab, axis, 0), axes=(0, 0))
            surface = BSplinePatch(
                [vol.knot_vectors[a] for a in others],
                [vol.knot_vectors[a].degree for a in others],
                face,
            )
            patches.append(BoundaryPatch(surface, axis, side))
    return patches


def derivative_net(coefs: np.ndarray, kv: KnotVector, axis: int) -> tuple[np.ndarray, KnotVector | None]:
    """Control net and knot vector of the partial derivative along ``axis``.

    Returns ``(zeros, None)`` for degree-0 directions.
    """
    p = kv.degree
    if p == 0:
        shape = list(coefs.shape)
        return np.zeros(shape), None
    U = kv.knots
    n = kv.n_basis
    diff = np.diff(coefs, axis=axis)
    denom = U[p + 1 : n + p] - U[1:n]
    scale = np.divide(p, denom, out=np.zeros_like(denom), where=denom > 0)
    shape = [1] * coefs.ndim
    shape[axis] = n - 1
    return diff * scale.reshape(shape), KnotVector(U[1:-1], p - 1)


def second_derivative_bound(patch) -> tuple[float, float, float]:
    """Upper bounds (B_ss, B_tt, B_st) on the norms of the second partials.

    The second-derivative spline of a B-spline is again a B-spline whose
    basis is non-negative and sums to one, so the largest control-point
    norm of the differenced net bounds the derivative everywhere.
    """
    surf = patch.surface if isinstance(patch, BoundaryPatch) else patch
    kv_s, kv_t = surf.knot_vectors
    net = surf.coefs

    def bound(axes):
        c = net
        kvs = [kv_s, kv_t]
        for ax in axes:
            if kvs[ax] is None or kvs[ax].degree == 0:
                return 0.0
            c, kvs[ax] = derivative_net(c, kvs[ax], ax)
        if c.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(c, axis=-1)))

    return bound((0, 0)), bound((1, 1)), bound((0, 1))
