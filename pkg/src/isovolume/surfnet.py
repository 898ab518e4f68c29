"""View-dependent tessellation of block boundaries and ray-surface intersection.

Every block boundary face is triangulated on a uniform parameter grid that is
fine enough for the linear-interpolation error to stay below a fraction of
the pixel footprint at the face's nearest depth. A bounding-volume hierarchy
over all triangles is then queried with the primary rays, and every hit is
stored in a per-pixel list of :class:`IntersectionRecord`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rayscene import Camera
from .splinecore import BoundaryPatch, BSplineVolume, extract_boundary_patches, second_derivative_bound

log = logging.getLogger(__name__)

DEFAULT_TOL_PX = 0.25
MAX_LEVEL = 512
LEAF_SIZE = 4


# ---------------------------------------------------------------------------
# tessellation
# ---------------------------------------------------------------------------


def _nearest_depth(cam: Camera, control_points: np.ndarray) -> float:
    """Lower bound of the viewing-axis depth over the convex hull of a control net."""
    z = cam.zdepth(control_points.reshape(-1, 3)).min()
    return max(float(z), cam.near)


def world_tolerance(cam: Camera, zdepth: float, tol_px: float = DEFAULT_TOL_PX) -> float:
    """World distance that stays within ``tol_px`` pixels anywhere on screen at ``zdepth``.

    The pixel footprint grows towards the image corners by at most
    ``sqrt(1 + tan_x^2 + tan_y^2)``, which is divided out.
    """
    corner = np.sqrt(1.0 + cam.tan_x**2 + cam.tan_y**2)
    return tol_px * float(cam.pixel_size(zdepth)) / corner


def tessellation_level(
    patch,
    cam: Camera,
    bounds=None,
    tol_px: float = DEFAULT_TOL_PX,
    max_level: int = MAX_LEVEL,
) -> tuple[int, int]:
    """Grid subdivisions (N_s, N_t) of a boundary patch for the given camera.

    With ``h = 1/N`` the interpolation error is bounded by
    ``(h_s^2 B_ss + 2 h_s h_t B_st + h_t^2 B_tt) / 8``; choosing
    ``N_s = ceil(sqrt((B_ss + B_st) / (4 tol)))`` and likewise for ``N_t``
    keeps it below ``tol``.
    """
    surf = patch.surface if isinstance(patch, BoundaryPatch) else patch
    b_ss, b_tt, b_st = second_derivative_bound(patch) if bounds is None else bounds
    tol = world_tolerance(cam, _nearest_depth(cam, surf.coefs), tol_px)
    n_s = int(np.ceil(np.sqrt((b_ss + b_st) / (4.0 * tol))))
    n_t = int(np.ceil(np.sqrt((b_tt + b_st) / (4.0 * tol))))
    if max(n_s, n_t) > max_level:
        log.warning("tessellation level (%d, %d) capped at %d", n_s, n_t, max_level)
    return min(max(n_s, 1), max_level), min(max(n_t, 1), max_level)


@dataclass(frozen=True)
class SurfaceTriangle:
    geometry: np.ndarray  # (3, 3) vertices in world space
    params: np.ndarray  # (3, 3) vertices in the parameter cube
    block: int

    @property
    def normal(self) -> np.ndarray:
        a, b, c = self.geometry
        return np.cross(b - a, c - a)


@dataclass
class TriangleMesh:
    """A batch of triangles with parameter-space vertices and block ids.

    ``face`` holds ``2 * axis + side`` of the cube face each triangle lies on.
    """

    geometry: np.ndarray  # (T, 3, 3)
    params: np.ndarray  # (T, 3, 3)
    block: np.ndarray  # (T,)
    face: np.ndarray  # (T,)

    def __len__(self) -> int:
        return self.geometry.shape[0]

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3, 3)), np.zeros((0, 3, 3)), np.zeros(0, int), np.zeros(0, int))

    @classmethod
    def concatenate(cls, meshes) -> "TriangleMesh":
        meshes = [m for m in meshes if len(m)]
        if not meshes:
            return cls.empty()
        return cls(
            np.concatenate([m.geometry for m in meshes]),
            np.concatenate([m.params for m in meshes]),
            np.concatenate([m.block for m in meshes]),
            np.concatenate([m.face for m in meshes]),
        )

    @property
    def normals(self) -> np.ndarray:
        g = self.geometry
        return np.cross(g[:, 1] - g[:, 0], g[:, 2] - g[:, 0])

    def triangles(self) -> list[SurfaceTriangle]:
        return [SurfaceTriangle(g, p, int(b)) for g, p, b in zip(self.geometry, self.params, self.block)]


def _grid_triangles(n_s: int, n_t: int) -> np.ndarray:
    """Vertex indices of a uniform (n_s x n_t) quad grid split along the diagonals."""
    i, j = np.meshgrid(np.arange(n_s), np.arange(n_t), indexing="ij")
    v00 = (i * (n_t + 1) + j).ravel()
    v10 = ((i + 1) * (n_t + 1) + j).ravel()
    v01 = (i * (n_t + 1) + j + 1).ravel()
    v11 = v10 + 1
    return np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])


def tessellate(patch: BoundaryPatch, level, volume=None, block: int = 0, flip: bool = False) -> TriangleMesh:
    """Uniform parameter-grid triangulation of a boundary patch.

    Geometry vertices are evaluated through ``volume`` at the embedded
    parameter points when it is given, otherwise through the patch surface.
    Triangles are wound so that their normals point out of the parameter
    cube (reversed when ``flip`` is set, for left-handed maps).
    """
    n_s, n_t = int(level[0]), int(level[1])
    if n_s < 1 or n_t < 1:
        raise ValueError("tessellation level must be at least 1 in each direction")
    s, t = np.meshgrid(np.linspace(0.0, 1.0, n_s + 1), np.linspace(0.0, 1.0, n_t + 1), indexing="ij")
    st = np.stack([s.ravel(), t.ravel()], axis=1)
    params = patch.embed(st)
    if volume is not None:
        verts = volume.jet(params, 0).value
    else:
        verts = patch.surface.jet(st, 0).value
    tri = _grid_triangles(n_s, n_t)
    if (patch.orientation < 0) != flip:
        tri = tri[:, ::-1]
    n = tri.shape[0]
    return TriangleMesh(
        verts[tri],
        params[tri],
        np.full(n, block, dtype=int),
        np.full(n, 2 * patch.axis + patch.side, dtype=int),
    )


def block_levels(volume: BSplineVolume, cam: Camera, tol_px: float = DEFAULT_TOL_PX, patches=None) -> np.ndarray:
    """Per-parameter-axis subdivisions shared by all faces of a block.

    Using the maximum over the faces that contain an axis makes adjacent
    faces sample their common edges at identical parameters.
    """
    patches = extract_boundary_patches(volume) if patches is None else patches
    levels = np.ones(3, dtype=int)
    for patch in patches:
        n_s, n_t = tessellation_level(patch, cam, tol_px=tol_px)
        a, b = patch.free_axes
        levels[a] = max(levels[a], n_s)
        levels[b] = max(levels[b], n_t)
    return levels


def tessellate_block(volume: BSplineVolume, cam: Camera, block: int = 0, tol_px: float = DEFAULT_TOL_PX) -> TriangleMesh:
    patches = extract_boundary_patches(volume)
    levels = block_levels(volume, cam, tol_px, patches)
    jac = volume.jet(np.full(3, 0.5), 1).jacobian
    flip = bool(np.linalg.det(jac) < 0)
    meshes = []
    for patch in patches:
        a, b = patch.free_axes
        meshes.append(tessellate(patch, (levels[a], levels[b]), volume=volume, block=block, flip=flip))
    return TriangleMesh.concatenate(meshes)


def write_tessellation(mesh: TriangleMesh, path) -> None:
    """Indexed-triangle text dump: ``v x y z``, ``p u v w`` and ``f i j k block`` lines."""
    with open(path, "w") as fh:
        fh.write(f"# {len(mesh)} triangles\n")
        for g, p in zip(mesh.geometry.reshape(-1, 3), mesh.params.reshape(-1, 3)):
            fh.write(f"v {g[0]:.17g} {g[1]:.17g} {g[2]:.17g}\n")
            fh.write(f"p {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for k, b in enumerate(mesh.block):
            fh.write(f"f {3 * k} {3 * k + 1} {3 * k + 2} {b}\n")


# ---------------------------------------------------------------------------
# bounding-volume hierarchy
# ---------------------------------------------------------------------------


@dataclass
class BVH:
    lo: np.ndarray  # (M, 3) node boxes
    hi: np.ndarray
    left: np.ndarray  # child index or -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf triangle range in ``order``
    count: np.ndarray
    order: np.ndarray

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> "BVH":
        g = mesh.geometry
        tri_lo, tri_hi = g.min(axis=1), g.max(axis=1)
        centroid = 0.5 * (tri_lo + tri_hi)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(mesh))
        stack = [(0, len(mesh), -1, False)]
        # iterative median split; ranges refer to ``order``
        while stack:
            a, b, parent, is_right = stack.pop()
            idx = len(lo)
            if parent >= 0:
                (right if is_right else left)[parent] = idx
            sel = order[a:b]
            lo.append(tri_lo[sel].min(axis=0) if b > a else np.zeros(3))
            hi.append(tri_hi[sel].max(axis=0) if b > a else np.zeros(3))
            left.append(-1)
            right.append(-1)
            if b - a <= leaf_size:
                start.append(a)
                count.append(b - a)
                continue
            start.append(0)
            count.append(0)
            ext = centroid[sel].max(axis=0) - centroid[sel].min(axis=0)
            axis = int(np.argmax(ext))
            sel = sel[np.argsort(centroid[sel, axis], kind="stable")]
            order[a:b] = sel
            mid = (a + b) // 2
            stack.append((mid, b, idx, True))
            stack.append((a, mid, idx, False))
        return cls(
            np.array(lo).reshape(-1, 3),
            np.array(hi).reshape(-1, 3),
            np.array(left, dtype=int),
            np.array(right, dtype=int),
            np.array(start, dtype=int),
            np.array(count, dtype=int),
            order,
        )

    def candidates(self, origins: np.ndarray, dirs: np.ndarray):
        """All (ray, triangle) pairs whose leaf box the ray passes through."""
        n = origins.shape[0]
        if self.lo.shape[0] == 0 or n == 0:
            return np.zeros(0, int), np.zeros(0, int)
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        pad = 1e-9 * (1.0 + np.abs(self.hi - self.lo).max())
        rays = np.arange(n)
        nodes = np.zeros(n, dtype=int)
        out_r, out_t = [], []
        while rays.size:
            o, iv = origins[rays], inv[rays]
            with np.errstate(invalid="ignore"):
                t1 = (self.lo[nodes] - pad - o) * iv
                t2 = (self.hi[nodes] + pad - o) * iv
            tmin = np.nanmax(np.fmin(t1, t2), axis=1)
            tmax = np.nanmin(np.fmax(t1, t2), axis=1)
            hit = tmax >= np.maximum(tmin, 0.0)
            rays, nodes = rays[hit], nodes[hit]
            leaf = self.left[nodes] < 0
            lr, ln = rays[leaf], nodes[leaf]
            cnt = self.count[ln]
            if cnt.sum():
                rep_r = np.repeat(lr, cnt)
                first = np.repeat(self.start[ln], cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                out_r.append(rep_r)
                out_t.append(self.order[first + offs])
            ir, inn = rays[~leaf], nodes[~leaf]
            rays = np.concatenate([ir, ir])
            nodes = np.concatenate([self.left[inn], self.right[inn]])
        if not out_r:
            return np.zeros(0, int), np.zeros(0, int)
        return np.concatenate(out_r), np.concatenate(out_t)


# ---------------------------------------------------------------------------
# ray-triangle intersection
# ---------------------------------------------------------------------------


def _owned(ex, ey, sign):
    """Fixed tie-break: an edge lying exactly on the ray belongs to one side only."""
    ex, ey = sign * ex, sign * ey
    return (ey > 0) | ((ey == 0) & (ex > 0))


def intersect_triangles(origins, dirs, tri_geom):
    """Watertight ray-triangle test for paired rays and triangles.

    Works in a ray-aligned frame (shear so that the ray becomes the z axis)
    with edge functions evaluated in double precision. Points exactly on an
    edge are assigned to one of the two triangles sharing it. Both windings
    count as hits.

    Returns ``(hit, t, bary, det_sign)`` where ``bary`` holds the weights
    of the three vertices.
    """
    d = dirs
    kz = np.argmax(np.abs(d), axis=1)
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    rows = np.arange(d.shape[0])
    dz = d[rows, kz]
    swap = dz < 0
    kx, ky = np.where(swap, ky, kx), np.where(swap, kx, ky)
    sx, sy, sz = d[rows, kx] / dz, d[rows, ky] / dz, 1.0 / dz
    rel = tri_geom - origins[:, None, :]
    ax = rel[rows, :, kx]
    ay = rel[rows, :, ky]
    az = rel[rows, :, kz]
    X = ax - sx[:, None] * az
    Y = ay - sy[:, None] * az
    Ax, Bx, Cx = X[:, 0], X[:, 1], X[:, 2]
    Ay, By, Cy = Y[:, 0], Y[:, 1], Y[:, 2]
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    det = U + V + W
    sign = np.sign(det)
    ok = sign != 0

    def edge_ok(E, px, py, qx, qy):
        return (sign * E > 0) | ((E == 0) & _owned(qx - px, qy - py, sign))

    ok &= edge_ok(U, Bx, By, Cx, Cy) & edge_ok(V, Cx, Cy, Ax, Ay) & edge_ok(W, Ax, Ay, Bx, By)
    T = sz * (U * az[:, 0] + V * az[:, 1] + W * az[:, 2])
    safe = np.where(ok, det, 1.0)
    t = T / safe
    bary = np.stack([U, V, W], axis=1) / safe[:, None]
    return ok, t, bary, sign


@dataclass(frozen=True)
class IntersectionRecord:
    depth: float
    param_point: np.ndarray
    block: int
    front_facing: bool
    used: bool = False


@dataclass
class PixelIntersections:
    """All records of a frame in compressed per-pixel form.

    Records of pixel ``k`` are ``offsets[k]:offsets[k + 1]``, sorted by depth.
    """

    n_pixels: int
    offsets: np.ndarray
    depth: np.ndarray
    param: np.ndarray
    block: np.ndarray
    front: np.ndarray
    pixel: np.ndarray

    def __len__(self) -> int:
        return self.depth.shape[0]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def records(self, k: int) -> list[IntersectionRecord]:
        a, b = self.offsets[k], self.offsets[k + 1]
        return [
            IntersectionRecord(float(self.depth[i]), self.param[i].copy(), int(self.block[i]), bool(self.front[i]))
            for i in range(a, b)
        ]


def intersect_scene(mesh: TriangleMesh, origins, dirs, near: float = 0.0, forward=None, bvh: BVH | None = None) -> PixelIntersections:
    """Intersect every ray with every triangle and collect the hits per ray.

    Hits closer than ``near`` along ``forward`` (the camera viewing axis)
    are discarded. Parameter points are barycentric combinations of the
    triangle's parameter vertices, snapped onto their cube face.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if origins.shape[0] == 1 and dirs.shape[0] > 1:
        origins = np.repeat(origins, dirs.shape[0], axis=0)
    n = dirs.shape[0]
    bvh = BVH.build(mesh) if bvh is None else bvh
    r, tri = bvh.candidates(origins, dirs)
    hit, t, bary, sign = intersect_triangles(origins[r], dirs[r], mesh.geometry[tri])
    if forward is None:
        along = t
    else:
        along = t * (dirs[r] @ np.asarray(forward, dtype=float))
    keep = hit & (t > 0) & (along > near)
    r, tri, t, bary = r[keep], tri[keep], t[keep], bary[keep]
    param = np.einsum("ki,kij->kj", bary, mesh.params[tri])
    param = np.clip(param, 0.0, 1.0)
    face = mesh.face[tri]
    param[np.arange(param.shape[0]), face // 2] = (face % 2).astype(float)
    normals = mesh.normals[tri]
    front = np.einsum("ij,ij->i", normals, dirs[r]) < 0
    order = np.lexsort((tri, t, r))
    r, t, param, tri, front = r[order], t[order], param[order], tri[order], front[order]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
    return PixelIntersections(n, offsets, t, param, mesh.block[tri], front, r)


def intersect_camera(mesh: TriangleMesh, cam: Camera, bvh: BVH | None = None) -> PixelIntersections:
    """Records for all pixel-center rays of ``cam`` (row-major pixel order)."""
    dirs = cam.directions(cam.pixel_centers())
    return intersect_scene(mesh, cam.eye[None], dirs, near=cam.near, forward=cam.forward, bvh=bvh)
