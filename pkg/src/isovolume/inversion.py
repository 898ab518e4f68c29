"""Pixel-accurate preimages of view-ray segments.

Two families of methods produce parameter points whose images follow a
straight segment from ``g_front`` to ``g_back``:

* root finding: Newton's method on ``phi(p) - g_i`` for every sample point
  ``g_i`` on the segment, with clamping to the unit cube, backtracking line
  search and a face-restricted fallback when the target lies outside the
  block;
* ODE pullback: the geometry-space field ``V = V_par + c V_perp`` is pulled
  back through ``J_phi`` and integrated in the parameter domain with an
  explicit Runge-Kutta method or with implicit Euler.

All routines work on batches: points have shape (N, 3) and every row is an
independent segment. A *map* is any object with ``jet(points, order)``
returning a :class:`~isovolume.splinecore.SplineJet` and ``take(rows)``
returning the map restricted to a subset of rows (maps that do not depend on
the row simply return themselves).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

SINGULAR_RCOND = 1e-12
NEWTON_MAX_ITER = 50
LINE_SEARCH_MAX = 20
FACE_CLAMP_LIMIT = 3
MAX_BOUNDARY_WALKS = 4

# Newton status codes
CONVERGED, STALLED, BOUNDARY, SINGULAR, MAXITER = range(5)
STATUS_NAMES = ("converged", "stalled", "boundary", "singular", "maxiter")


class InversionError(ArithmeticError):
    """Base class for failures of the inversion methods."""


class SingularJacobianError(InversionError):
    pass


class NoConvergenceError(InversionError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


METHODS = ("rk1", "irk1", "rk2", "rk3", "rk4", "rk4-38", "rkf", "rf")

# Butcher tableaus (A, b) of the explicit methods
TABLEAUS = {
    "rk1": ([[]], [1.0]),
    "rk2": ([[], [0.5]], [0.0, 1.0]),
    "rk3": ([[], [0.5], [-1.0, 2.0]], [1 / 6, 2 / 3, 1 / 6]),
    "rk4": ([[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]], [1 / 6, 1 / 3, 1 / 3, 1 / 6]),
    "rk4-38": (
        [[], [1 / 3], [-1 / 3, 1.0], [1.0, -1.0, 1.0]],
        [1 / 8, 3 / 8, 3 / 8, 1 / 8],
    ),
    # Fehlberg 4(5), propagating the fifth-order solution
    "rkf": (
        [
            [],
            [1 / 4],
            [3 / 32, 9 / 32],
            [1932 / 2197, -7200 / 2197, 7296 / 2197],
            [439 / 216, -8.0, 3680 / 513, -845 / 4104],
            [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
        ],
        [16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55],
    ),
}
ORDERS = {"rk1": 1, "irk1": 1, "rk2": 2, "rk3": 3, "rk4": 4, "rk4-38": 4, "rkf": 5}


@dataclass
class IntegratorSpec:
    """Choice of inversion method and its parameters.

    ``c`` defaults to 100 for implicit Euler and 1 otherwise. ``tol`` is the
    root-finding stopping tolerance; ``None`` means the distance of the
    sample point to its pixel frustum boundary.
    """

    method: str = "rk2"
    c: float | None = None
    ds: float = 0.01
    tol: float | None = None

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.c is None:
            self.c = 100.0 if self.method == "irk1" else 1.0
        if self.c < 0:
            raise ValueError("c must be non-negative")
        if not self.ds > 0:
            raise ValueError("ds must be positive")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tol must be positive")


# ---------------------------------------------------------------------------
# vector field and linear algebra
# ---------------------------------------------------------------------------


@dataclass
class SegmentField:
    """The field V = V_par + c V_perp attached to one or many segments."""

    g_front: np.ndarray
    v_par: np.ndarray
    c: float | np.ndarray = 1.0

    def __post_init__(self):
        self.g_front = np.asarray(self.g_front, dtype=float)
        self.v_par = np.asarray(self.v_par, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if np.any(self.c < 0):
            raise ValueError("c must be non-negative")

    @classmethod
    def from_points(cls, g_front, g_back, c=1.0) -> "SegmentField":
        g_front = np.asarray(g_front, dtype=float)
        d = np.asarray(g_back, dtype=float) - g_front
        return cls(g_front, d / np.linalg.norm(d, axis=-1, keepdims=True), c)

    def take(self, rows) -> "SegmentField":
        def sub(a, nd):
            return a[rows] if a.ndim == nd else a

        return SegmentField(sub(self.g_front, 2), sub(self.v_par, 2), sub(self.c, 1))


def vector_field_V(field: SegmentField, g) -> np.ndarray:
    """Velocity along the segment plus a pull towards the segment line."""
    g = np.asarray(g, dtype=float)
    v = field.v_par
    d = field.g_front - g
    perp = d - np.sum(d * v, axis=-1, keepdims=True) * v
    return v + field.c[..., None] * perp


def jacobian_V(field: SegmentField) -> np.ndarray:
    """Constant Jacobian c (v v^T - I) of :func:`vector_field_V`."""
    v = field.v_par
    outer = v[..., :, None] * v[..., None, :]
    return field.c[..., None, None] * (outer - np.eye(3))


def qr_factor(J: np.ndarray):
    """Batched QR factorization with a reciprocal condition estimate from diag(R)."""
    Q, R = np.linalg.qr(J)
    d = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    rcond = d.min(axis=-1) / np.maximum(d.max(axis=-1), np.finfo(float).tiny)
    return Q, R, rcond


def qr_solve(Q: np.ndarray, R: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(Q R) x = b`` for stacked right-hand sides (N, n) or (N, n, k)."""
    vec = b.ndim == Q.ndim - 1
    y = np.swapaxes(Q, -1, -2) @ (b[..., None] if vec else b)
    n = R.shape[-1]
    x = np.empty_like(y)
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    safe = np.where(diag == 0, 1.0, diag)
    for i in range(n - 1, -1, -1):
        acc = y[..., i, :] - np.einsum("...j,...jk->...k", R[..., i, i + 1 :], x[..., i + 1 :, :])
        x[..., i, :] = acc / safe[..., i, None]
    return x[..., 0] if vec else x


def _pullback(phi, p, field: SegmentField, order: int = 1):
    jet = phi.jet(p, order)
    Q, R, rcond = qr_factor(jet.jacobian)
    singular = rcond < SINGULAR_RCOND
    W = qr_solve(Q, R, vector_field_V(field, jet.value))
    W[singular] = 0.0
    return W, singular, jet, (Q, R)


def pullback_W(phi, p, field: SegmentField) -> np.ndarray:
    """Parameter-space velocity W solving ``J_phi(p) W = V(phi(p))``.

    Raises :class:`SingularJacobianError` if the Jacobian is numerically
    singular at any of the points.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    W, singular, _, _ = _pullback(phi, P, field)
    if np.any(singular):
        raise SingularJacobianError("Jacobian of the geometry map is singular")
    return W[0] if single else W


def clamp_unit(p: np.ndarray) -> np.ndarray:
    return np.clip(p, 0.0, 1.0)


# ---------------------------------------------------------------------------
# root finding
# ---------------------------------------------------------------------------


@dataclass
class NewtonResult:
    p: np.ndarray
    residual: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    walks: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return self.status == CONVERGED


_FREE_AXES = np.array([[1, 2], [0, 2], [0, 1]])


def _face_solve(phi, target, x, axis, side, tol, max_iter=NEWTON_MAX_ITER):
    """Minimize ``|phi(p) - target|`` over the cube face ``p[axis] = side``.

    Gauss-Newton on the two free coordinates with a QR least-squares solve,
    clamping and backtracking. Returns the face point and its residual.
    """
    n = x.shape[0]
    x = x.copy()
    x[np.arange(n), axis] = side
    free = _FREE_AXES[axis]
    jet = phi.jet(x, 1)
    F = jet.value - target
    r = np.linalg.norm(F, axis=1)
    J = jet.jacobian
    active = np.flatnonzero(r > tol)
    for _ in range(max_iter):
        if active.size == 0:
            break
        Jr = J[active[:, None], :, free[active]]  # (k, 2, 3) -> reorder
        Jr = np.swapaxes(Jr, 1, 2)  # (k, 3, 2)
        Q, R = np.linalg.qr(Jr)
        d = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
        ok = d.min(axis=1) > SINGULAR_RCOND * np.maximum(d.max(axis=1), 1e-300)
        step = np.zeros((active.size, 2))
        if np.any(ok):
            step[ok] = -_lstsq_qr(Q[ok], R[ok], F[active[ok]])
        pending = active[ok]
        st = step[ok]
        alpha = 1.0
        improved = np.zeros(n, bool)
        for _ in range(LINE_SEARCH_MAX):
            if pending.size == 0:
                break
            x_try = x[pending].copy()
            fa = free[pending]
            cols = x_try[np.arange(pending.size)[:, None], fa] + alpha * st
            x_try[np.arange(pending.size)[:, None], fa] = np.clip(cols, 0.0, 1.0)
            jt = phi.take(pending).jet(x_try, 1)
            Ft = jt.value - target[pending]
            rt = np.linalg.norm(Ft, axis=1)
            acc = rt < r[pending]
            idx = pending[acc]
            x[idx], F[idx], r[idx], J[idx] = x_try[acc], Ft[acc], rt[acc], jt.jacobian[acc]
            improved[idx] = True
            pending, st = pending[~acc], st[~acc]
            alpha *= 0.5
        moved = improved[active]
        small = np.zeros(active.size, bool)
        small[ok] = np.linalg.norm(step[ok], axis=1) < 1e-15
        keep = moved & ~small & (r[active] > tol[active])
        active = active[keep]
    return x, r


def _lstsq_qr(Q, R, F):
    """Least-squares solution of ``J d = F`` from the reduced QR of J (k, 3, 2)."""
    y = np.einsum("kij,ki->kj", Q, F)
    d1 = y[:, 1] / R[:, 1, 1]
    d0 = (y[:, 0] - R[:, 0, 1] * d1) / R[:, 0, 0]
    return np.stack([d0, d1], axis=1)


def newton_solve(
    phi,
    target,
    x0,
    tol,
    max_iter: int = NEWTON_MAX_ITER,
    allow_boundary: bool = True,
) -> NewtonResult:
    """Batched Newton-Raphson on ``F(p) = phi(p) - target`` inside the unit cube.

    Each step solves ``J_phi dx = -F`` by QR, clamps ``x + dx`` to the cube
    and backtracks (halving, at most 20 times) until ``|F|`` strictly
    decreases. Iteration stops once ``|F| <= tol``. When the full step leaves
    the cube through the same face three times in a row (or backtracking
    fails against a face) the problem is restricted to that face; if the
    unrestricted Newton direction at the face minimizer points back into the
    cube the full iteration resumes, otherwise the face point is returned with
    status ``BOUNDARY``.
    """
    target = np.atleast_2d(np.asarray(target, dtype=float))
    x = clamp_unit(np.atleast_2d(np.asarray(x0, dtype=float)).copy())
    n = x.shape[0]
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (n,)).copy()
    status = np.full(n, MAXITER)
    iters = np.zeros(n, int)
    walks = np.zeros(n, int)
    face_count = np.zeros(n, int)
    last_face = np.full(n, -1)

    jet = phi.jet(x, 1)
    F = jet.value - target
    J = jet.jacobian.copy()
    r = np.linalg.norm(F, axis=1)
    active = np.arange(n)
    for _ in range(max_iter):
        conv = r[active] <= tol[active]
        status[active[conv]] = CONVERGED
        active = active[~conv]
        if active.size == 0:
            break
        iters[active] += 1
        Q, R, rcond = qr_factor(J[active])
        sing = rcond < SINGULAR_RCOND
        status[active[sing]] = SINGULAR
        active, Q, R = active[~sing], Q[~sing], R[~sing]
        if active.size == 0:
            break
        dx = -qr_solve(Q, R, F[active])
        full = x[active] + dx
        viol = np.maximum(np.maximum(-full, full - 1.0), 0.0)
        ax = np.argmax(viol, axis=1)
        has = viol[np.arange(active.size), ax] > 0
        face = np.where(has, 2 * ax + (full[np.arange(active.size), ax] > 1.0), -1)
        same = has & (face == last_face[active])
        face_count[active] = np.where(same, face_count[active] + 1, has.astype(int))
        last_face[active] = face

        # backtracking line search on |F|
        pending = np.arange(active.size)
        alpha = 1.0
        accepted = np.zeros(active.size, bool)
        for _ in range(LINE_SEARCH_MAX):
            if pending.size == 0:
                break
            rows = active[pending]
            x_try = clamp_unit(x[rows] + alpha * dx[pending])
            jt = phi.take(rows).jet(x_try, 1)
            Ft = jt.value - target[rows]
            rt = np.linalg.norm(Ft, axis=1)
            acc = rt < r[rows]
            good = rows[acc]
            x[good], F[good], r[good], J[good] = x_try[acc], Ft[acc], rt[acc], jt.jacobian[acc]
            accepted[pending[acc]] = True
            pending = pending[~acc]
            alpha *= 0.5

        to_face = has & ((face_count[active] >= FACE_CLAMP_LIMIT) | ~accepted)
        to_face &= allow_boundary
        failed = ~accepted & ~to_face
        status[active[failed]] = STALLED
        if np.any(to_face):
            rows = active[to_face]
            fax = face[to_face] // 2
            fside = (face[to_face] % 2).astype(float)
            xf, rf = _face_solve(phi.take(rows), target[rows], x[rows], fax, fside, tol[rows])
            better = rf <= r[rows]
            upd = rows[better]
            x[upd], r[upd] = xf[better], rf[better]
            jt = phi.take(rows).jet(x[rows], 1)
            F[rows], J[rows] = jt.value - target[rows], jt.jacobian
            walks[rows] += 1
            # resume full Newton if its direction re-enters the cube
            Qb, Rb, rcb = qr_factor(J[rows])
            dxb = -qr_solve(Qb, Rb, F[rows])
            comp = dxb[np.arange(rows.size), fax]
            inward = np.where(fside == 0.0, comp > 0, comp < 0) & (rcb >= SINGULAR_RCOND)
            resume = inward & (walks[rows] < MAX_BOUNDARY_WALKS) & (r[rows] > tol[rows])
            face_count[rows[resume]] = 0
            last_face[rows[resume]] = -1
            done = ~resume & (r[rows] > tol[rows])
            status[rows[done]] = BOUNDARY
            to_face_rows_done = rows[done]
        else:
            to_face_rows_done = np.empty(0, int)
        keep = ~failed
        active = active[keep]
        active = active[~np.isin(active, to_face_rows_done)]
    else:
        conv = r[active] <= tol[active]
        status[active[conv]] = CONVERGED
    return NewtonResult(x, r, status, iters, walks)


def newton_invert(phi, g_target, x0, frustum_tol: float, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Parameter point p with ``|phi(p) - g_target| <= frustum_tol``.

    Stops early (returning the best iterate) when the residual stops
    decreasing or when the target lies outside the block, in which case the
    point on the nearest cube face is returned.

    Raises
    ------
    SingularJacobianError
        The Jacobian became singular.
    NoConvergenceError
        The iteration cap was reached; ``best`` holds the last iterate.
    """
    res = newton_solve(phi, np.asarray(g_target, float)[None], np.asarray(x0, float)[None], frustum_tol, max_iter)
    st = res.status[0]
    if st == SINGULAR:
        raise SingularJacobianError("singular Jacobian during Newton iteration")
    if st == MAXITER:
        raise NoConvergenceError("Newton iteration cap reached", best=res.p[0])
    return res.p[0]


def boundary_walk(phi, p, g_target, tol: float = 0.0, face=None) -> np.ndarray:
    """Closest point to ``g_target`` on the cube face through ``p``, then re-entry.

    ``face`` is ``(axis, side)``; by default the first coordinate of ``p``
    lying on 0 or 1 selects it. If the unrestricted Newton step at the face
    minimizer points into the cube, the full Newton iteration is resumed from
    there.
    """
    p = np.asarray(p, dtype=float)
    g = np.asarray(g_target, dtype=float)
    if face is None:
        on = np.flatnonzero((p == 0.0) | (p == 1.0))
        if on.size == 0:
            raise ValueError("p does not lie on a face of the parameter cube")
        face = (int(on[0]), int(p[on[0]]))
    axis, side = face
    xf, rf = _face_solve(phi, g[None], p[None], np.array([axis]), np.array([float(side)]), np.array([tol]))
    jet = phi.jet(xf, 1)
    Q, R, rc = qr_factor(jet.jacobian)
    dx = -qr_solve(Q, R, jet.value - g[None])[0]
    inward = dx[axis] > 0 if side == 0 else dx[axis] < 0
    if inward and rf[0] > tol and rc[0] >= SINGULAR_RCOND:
        res = newton_solve(phi, g[None], xf, tol)
        if res.residual[0] <= rf[0]:
            return res.p[0]
    return xf[0]


# ---------------------------------------------------------------------------
# ODE steps
# ---------------------------------------------------------------------------


def rk_step(phi, p, field: SegmentField, h, method: str):
    """One explicit Runge-Kutta step of size ``h`` (scalar or per row).

    Stage points and the result are clamped to the unit cube. Returns the
    new points and a mask of rows that met a singular Jacobian.
    """
    A, b = TABLEAUS[method]
    p = np.atleast_2d(p)
    h = np.broadcast_to(np.asarray(h, dtype=float), (p.shape[0],))[:, None]
    ks = []
    singular = np.zeros(p.shape[0], bool)
    for i, row in enumerate(A):
        y = p.copy()
        for aij, kj in zip(row, ks):
            if aij != 0.0:
                y += h * aij * kj
        W, sing, _, _ = _pullback(phi, clamp_unit(y), field, 1)
        singular |= sing
        ks.append(W)
    incr = sum(bi * ki for bi, ki in zip(b, ks) if bi != 0.0)
    return clamp_unit(p + h * incr), singular


def implicit_euler_solve(phi, p, field: SegmentField, h, tol: float = 1e-12, max_iter: int = 25):
    """Implicit Euler step ``p + z`` with ``z - h W(p + z) = 0``.

    Newton's method on the increment z uses the exact Jacobian of
    ``G(z) = z - h W(p + z)``, obtained from
    ``J_phi J_G = H_phi[h W] + (I - h J_V) J_phi`` with the QR factors of
    ``J_phi`` that also give W. Iterates are clamped to the unit cube; when
    a clamped iterate stops moving it is accepted as the step. Returns the new points and a status array
    (``CONVERGED``, ``SINGULAR`` or ``MAXITER``).
    """
    p = np.atleast_2d(p)
    n = p.shape[0]
    h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
    JV = np.broadcast_to(jacobian_V(field), (n, 3, 3))
    eye = np.eye(3)
    z = np.zeros_like(p)
    status = np.full(n, MAXITER)
    active = np.arange(n)
    q_prev = np.full_like(p, np.nan)
    for _ in range(max_iter):
        if active.size == 0:
            break
        q = clamp_unit(p[active] + z[active])
        # a clamped iterate that no longer moves is the clamped solution
        on_face = np.any((q == 0.0) | (q == 1.0), axis=1)
        stuck = on_face & (np.linalg.norm(q - q_prev[active], axis=1) <= 1e-14)
        if np.any(stuck):
            z[active[stuck]] = q[stuck] - p[active[stuck]]
            status[active[stuck]] = CONVERGED
            active, q = active[~stuck], q[~stuck]
            if active.size == 0:
                break
        q_prev[active] = q
        zr = q - p[active]
        sub = field.take(active)
        jet = phi.take(active).jet(q, 2)
        Q, R, rcond = qr_factor(jet.jacobian)
        sing = rcond < SINGULAR_RCOND
        W = qr_solve(Q, R, vector_field_V(sub, jet.value))
        hs = h[active][:, None]
        G = zr - hs * W
        z[active] = zr
        conv = (np.linalg.norm(G, axis=1) <= tol) & ~sing
        status[active[sing]] = SINGULAR
        status[active[conv]] = CONVERGED
        live = ~sing & ~conv
        if not np.any(live):
            active = active[live]
            break
        hW = (hs * W)[live]
        M = np.einsum("nikj,nk->nij", jet.hessian[live], hW)
        rhs = M + (eye - h[active][live, None, None] * JV[active[live]]) @ jet.jacobian[live]
        JG = qr_solve(Q[live], R[live], rhs)
        dz = -np.linalg.solve(JG, G[live][..., None])[..., 0]
        rows = active[live]
        z[rows] = zr[live] + dz
        tiny = np.linalg.norm(dz, axis=1) <= 1e-15
        status[rows[tiny]] = CONVERGED
        active = rows[~tiny]
    return clamp_unit(p + z), status


def jacobian_G(phi, p, z, field: SegmentField, h: float) -> np.ndarray:
    """Exact Jacobian of ``G(z) = z - h W(p + z)`` at a single increment."""
    q = np.atleast_2d(np.asarray(p, float) + np.asarray(z, float))
    jet = phi.jet(q, 2)
    Q, R, _ = qr_factor(jet.jacobian)
    W = qr_solve(Q, R, vector_field_V(field, jet.value))
    M = np.einsum("nikj,nk->nij", jet.hessian, h * W)
    rhs = M + (np.eye(3) - h * jacobian_V(field)) @ jet.jacobian
    return qr_solve(Q, R, rhs)[0]


# ---------------------------------------------------------------------------
# per-segment state and single-segment convenience API
# ---------------------------------------------------------------------------


@dataclass
class InversionState:
    """Progress of one segment: current parameter point, its image and arc length."""

    p: np.ndarray
    g: np.ndarray
    s: float
    field: SegmentField
    method: str
    iterations: int = 0
    rejected: int = 0

    @classmethod
    def start(cls, phi, p_front, g_front, g_back, spec: IntegratorSpec) -> "InversionState":
        p = np.asarray(p_front, dtype=float)
        fld = SegmentField.from_points(g_front, g_back, spec.c)
        return cls(p, phi.jet(p, 0).value, 0.0, fld, spec.method)


def explicit_rk_step(phi, state: InversionState, spec: IntegratorSpec) -> np.ndarray:
    if spec.method not in TABLEAUS:
        raise ValueError(f"{spec.method} is not an explicit method")
    p_new, sing = rk_step(phi, state.p[None], state.field, spec.ds, spec.method)
    if sing[0]:
        raise SingularJacobianError("singular Jacobian at a Runge-Kutta stage")
    return p_new[0]


def implicit_euler_step(phi, state: InversionState, spec: IntegratorSpec) -> np.ndarray:
    p_new, st = implicit_euler_solve(phi, state.p[None], state.field, spec.ds)
    if st[0] == SINGULAR:
        raise SingularJacobianError("singular Jacobian in implicit Euler step")
    if st[0] != CONVERGED:
        raise NoConvergenceError("implicit Euler Newton iteration failed", best=p_new[0])
    return p_new[0]


# ---------------------------------------------------------------------------
# degenerate entry points
# ---------------------------------------------------------------------------


def fix_degenerate_entries(
    phi,
    g_front,
    g_back,
    p_front,
    p_back,
    tol,
    delta0: float = 1e-3,
    eps0: float = 1e-3,
    cap: float = 1e-1,
):
    """Move entry points away from singular Jacobians.

    For rows where ``J_phi(p_front)`` is singular the entry is advanced to
    ``g_front + delta v_par`` and re-inverted by Newton starting from
    ``p_front + eps (p_back - p_front)/|p_back - p_front|``; ``delta`` and
    ``eps`` start at ``delta0`` / ``eps0`` times the segment length in
    geometry / parameter space and double until ``cap`` times that length.

    Returns ``(g_front, p_front, ok, shift)`` where ``shift`` is the distance
    the entry moved along the segment and ``ok`` is False for rows that
    could not be repaired.
    """
    g_front = np.array(g_front, dtype=float, ndmin=2)
    g_back = np.array(g_back, dtype=float, ndmin=2)
    p_front = np.array(p_front, dtype=float, ndmin=2)
    p_back = np.array(p_back, dtype=float, ndmin=2)
    n = g_front.shape[0]
    tol_fn = tol if callable(tol) else (lambda rows, g: np.broadcast_to(np.asarray(tol, float), (len(rows),)))
    shift = np.zeros(n)
    ok = np.ones(n, bool)
    rc = qr_factor(phi.jet(p_front, 1).jacobian)[2]
    bad = np.flatnonzero(rc < SINGULAR_RCOND)
    if bad.size == 0:
        return g_front, p_front, ok, shift
    L = np.linalg.norm(g_back - g_front, axis=1)
    dg = (g_back - g_front) / np.where(L > 0, L, 1.0)[:, None]
    dpv = p_back - p_front
    Lp = np.linalg.norm(dpv, axis=1)
    dp = dpv / np.where(Lp > 0, Lp, 1.0)[:, None]
    g_new, p_new = g_front.copy(), p_front.copy()
    factor = 1.0
    pending = bad
    while pending.size and delta0 * factor <= cap:
        delta = delta0 * factor * L[pending]
        eps = eps0 * factor * Lp[pending]
        g_try = g_front[pending] + delta[:, None] * dg[pending]
        x0 = clamp_unit(p_front[pending] + eps[:, None] * dp[pending])
        sub = phi.take(pending)
        res = newton_solve(sub, g_try, x0, tol_fn(pending, g_try))
        rc_new = qr_factor(sub.jet(res.p, 1).jacobian)[2]
        good = (res.status == CONVERGED) & (rc_new >= SINGULAR_RCOND)
        log.debug("degenerate entry: factor %g repaired %d of %d", factor, good.sum(), pending.size)
        rows = pending[good]
        g_new[rows], p_new[rows], shift[rows] = g_try[good], res.p[good], delta[good]
        pending = pending[~good]
        factor *= 2.0
    ok[pending] = False
    return g_new, p_new, ok, shift


def handle_degenerate_entry(phi, g_front, g_back, p_front, p_back, tol: float):
    """Single-segment form of :func:`fix_degenerate_entries`.

    Returns the (possibly moved) entry point pair ``(g_front, p_front)``.
    Raises :class:`SingularJacobianError` if no admissible entry was found.
    """
    g, p, ok, _ = fix_degenerate_entries(phi, g_front, g_back, p_front, p_back, tol)
    if not ok[0]:
        raise SingularJacobianError("could not move the entry point off the degeneracy")
    return g[0], p[0]


# ---------------------------------------------------------------------------
# batched segment sampler
# ---------------------------------------------------------------------------


ToleranceFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SegmentSampler:
    """Walks many segments in lock-step, one sample per call to :meth:`step`.

    Sample points are spaced ``spec.ds`` apart along each segment; the last
    step is shortened to end exactly at ``g_back``. A remainder shorter than
    ``min_last_fraction * spec.ds`` is instead absorbed into the step before
    it. ``tol(rows, g)`` gives the
    root-finding tolerance for target points ``g`` of the given rows; it is
    used by the root-finding method and by the fallbacks of the ODE methods
    (a singular stage or a failed implicit solve re-computes that sample by
    root finding and counts it as rejected).
    """

    phi: object
    p_front: np.ndarray
    g_front: np.ndarray
    g_back: np.ndarray
    spec: IntegratorSpec
    tol: float | ToleranceFn | None = None
    min_last_fraction: float = 0.0
    p: np.ndarray = dc_field(init=False)
    s: np.ndarray = dc_field(init=False)
    length: np.ndarray = dc_field(init=False)
    active: np.ndarray = dc_field(init=False)
    rejected: np.ndarray = dc_field(init=False)
    newton_iterations: np.ndarray = dc_field(init=False)
    field: SegmentField = dc_field(init=False)

    def __post_init__(self):
        self.p_front = np.array(self.p_front, dtype=float, ndmin=2)
        self.g_front = np.array(self.g_front, dtype=float, ndmin=2)
        self.g_back = np.array(self.g_back, dtype=float, ndmin=2)
        n = self.p_front.shape[0]
        d = self.g_back - self.g_front
        self.length = np.linalg.norm(d, axis=1)
        v = d / np.where(self.length > 0, self.length, 1.0)[:, None]
        self.field = SegmentField(self.g_front, v, np.full(n, self.spec.c))
        self.p = clamp_unit(self.p_front.copy())
        self.s = np.zeros(n)
        self.active = self.length > 0
        self.rejected = np.zeros(n, int)
        self.newton_iterations = np.zeros(n, int)
        if self.spec.method == "rf" and self.tol is None and self.spec.tol is None:
            raise ValueError("root finding needs a tolerance")

    def _tol(self, rows, g):
        if self.spec.tol is not None and self.spec.method == "rf":
            return np.full(len(rows), self.spec.tol)
        if callable(self.tol):
            return self.tol(rows, g)
        t = self.spec.tol if self.tol is None else self.tol
        return np.full(len(rows), t)

    def _root_find(self, rows, s_new):
        target = self.g_front[rows] + s_new[:, None] * self.field.v_par[rows]
        res = newton_solve(self.phi.take(rows), target, self.p[rows], self._tol(rows, target))
        self.newton_iterations[rows] += res.iterations
        return res.p

    def step(self):
        """Advance every active segment by one sample.

        Returns ``(rows, p_new, s_new)`` for the rows that moved.
        """
        rows = np.flatnonzero(self.active)
        if rows.size == 0:
            return rows, np.empty((0, 3)), np.empty(0)
        remaining = self.length[rows] - self.s[rows]
        h = np.minimum(self.spec.ds, remaining)
        s_new = self.s[rows] + h
        tail = self.min_last_fraction * self.spec.ds
        last = (remaining - h <= 1e-12 * self.length[rows]) | (remaining - h < tail)
        s_new[last] = self.length[rows][last]
        h = s_new - self.s[rows]
        method = self.spec.method
        phi = self.phi.take(rows)
        fld = self.field.take(rows)
        if method == "rf":
            p_new = self._root_find(rows, s_new)
        elif method == "irk1":
            p_new, st = implicit_euler_solve(phi, self.p[rows], fld, h)
            bad = st != CONVERGED
            if np.any(bad):
                p_new[bad] = self._root_find(rows[bad], s_new[bad])
                self.rejected[rows[bad]] += 1
        else:
            p_new, sing = rk_step(phi, self.p[rows], fld, h, method)
            if np.any(sing):
                p_new[sing] = self._root_find(rows[sing], s_new[sing])
                self.rejected[rows[sing]] += 1
        self.p[rows] = p_new
        self.s[rows] = s_new
        self.active[rows[last]] = False
        return rows, p_new, s_new

    def run(self):
        """Iterate to the end of every segment; yields ``(rows, p, s)`` per step."""
        while np.any(self.active):
            yield self.step()
