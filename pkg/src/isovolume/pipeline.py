"""Frame rendering: surface intersections, blockwise depth sorting, ray integration.

Work is organised in batches over pixels. After the intersection stage each
pixel holds a depth-ordered list of boundary records; pairing them yields
one or more segments per pixel. Segments are then integrated in *rounds*: the
k-th round handles the k-th nearest segment of every pixel, which keeps the
front-to-back compositing order intact while every round is processed as a
single vectorized batch.

A voxelized baseline renderer (trilinear interpolation on a regular grid)
is included for comparison.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .inversion import (
    CONVERGED,
    IntegratorSpec,
    SegmentSampler,
    fix_degenerate_entries,
    newton_solve,
)
from .rayscene import Camera
from .shading import CompositeState, FieldSource, TransferFunction, supersample_segment
from .splinecore import BSplineVolume, derivative_net
from .surfnet import BVH, DEFAULT_TOL_PX, IntersectionRecord, TriangleMesh, intersect_camera, tessellate_block

log = logging.getLogger(__name__)

# default sample distance as a fraction of the scene diagonal
DEFAULT_DS_FRACTION = {
    "rk1": 1 / 512,
    "irk1": 1 / 256,
    "rk2": 1 / 256,
    "rk3": 1 / 128,
    "rk4": 1 / 128,
    "rk4-38": 1 / 128,
    "rkf": 1 / 128,
    "rf": 1 / 128,
}
XI_FRACTION = 1 / 512

# pixel flag bits
FLAG_INVERSION = 1
FLAG_DELTA_P = 2
FLAG_DEPTH = 4
FLAG_UNMATCHED = 8
FLAG_CLIP = 16
FLAG_FIELD = 32
FLAG_NAMES = {
    FLAG_INVERSION: "inversion",
    FLAG_DELTA_P: "delta_p",
    FLAG_DEPTH: "depth_order",
    FLAG_UNMATCHED: "unmatched_record",
    FLAG_CLIP: "clip",
    FLAG_FIELD: "field",
}


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass
class Block:
    volume: BSplineVolume
    field: FieldSource
    name: str = ""


@dataclass(frozen=True)
class CutPlane:
    """Plane through ``point``; the half-space ``normal`` points into is removed."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("cut plane normal must be non-zero")
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "normal", n / norm)

    def signed(self, g) -> np.ndarray:
        return (np.asarray(g, dtype=float) - self.point) @ self.normal


def scene_bounds(blocks) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box containing every block (from the control nets)."""
    if not blocks:
        return np.zeros(3), np.ones(3)
    pts = np.concatenate([b.volume.coefs.reshape(-1, 3) for b in blocks])
    return pts.min(axis=0), pts.max(axis=0)


def default_integrator(method: str, diagonal: float, c=None) -> IntegratorSpec:
    return IntegratorSpec(method, c=c, ds=DEFAULT_DS_FRACTION[method.lower()] * diagonal)


@dataclass
class Scene:
    camera: Camera
    blocks: list[Block]
    transfer: TransferFunction
    integrator: IntegratorSpec
    cut_planes: list[CutPlane] = field(default_factory=list)
    background: object = "checker"
    supersample: bool = True
    tol_px: float = DEFAULT_TOL_PX

    @property
    def diagonal(self) -> float:
        lo, hi = scene_bounds(self.blocks)
        return float(np.linalg.norm(hi - lo))

    def background_image(self) -> np.ndarray:
        h, w = self.camera.height, self.camera.width
        if isinstance(self.background, str):
            if self.background != "checker":
                raise ValueError(f"unknown background {self.background!r}")
            jj, ii = np.mgrid[0:h, 0:w]
            light = ((ii // 8) + (jj // 8)) % 2 == 0
            grey = np.where(light, 0.8, 0.6)
            return np.repeat(grey[..., None], 3, axis=2)
        return np.broadcast_to(np.asarray(self.background, dtype=float), (h, w, 3)).copy()

    def with_integrator(self, spec: IntegratorSpec) -> "Scene":
        return Scene(self.camera, self.blocks, self.transfer, spec, self.cut_planes, self.background, self.supersample, self.tol_px)


class BlockMap:
    """Row-wise dispatch of evaluations to the volume of each row's block."""

    def __init__(self, volumes, ids):
        self.volumes = volumes
        self.ids = np.asarray(ids, dtype=int)

    def take(self, rows) -> "BlockMap":
        return BlockMap(self.volumes, self.ids[rows])

    def jet(self, points, order: int = 2):
        from .splinecore import SplineJet

        points = np.atleast_2d(points)
        n = points.shape[0]
        value = np.empty((n, 3))
        jac = np.empty((n, 3, 3)) if order >= 1 else None
        hess = np.empty((n, 3, 3, 3)) if order >= 2 else None
        for b in np.unique(self.ids):
            rows = np.flatnonzero(self.ids == b)
            j = self.volumes[b].jet(points[rows], order)
            value[rows] = j.value
            if jac is not None:
                jac[rows] = j.jacobian
            if hess is not None:
                hess[rows] = j.hessian
        return SplineJet(value, jac, hess)

    def __call__(self, points):
        return self.jet(points, 0).value


def evaluate_fields(blocks, ids, p, jac) -> tuple[np.ndarray, np.ndarray]:
    """Scalar field values of each row's block and a mask of failed rows."""
    n = p.shape[0]
    values = np.empty(n)
    bad = np.zeros(n, bool)
    for b in np.unique(ids):
        rows = np.flatnonzero(ids == b)
        v, f = blocks[b].field.evaluate(p[rows], None if jac is None else jac[rows])
        values[rows], bad[rows] = v, f | ~np.isfinite(v)
    return values, bad


# ---------------------------------------------------------------------------
# blockwise depth sorting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentPair:
    """Entry and exit record of one block along a ray.

    ``front`` is ``None`` when the near plane lies inside the block and the
    segment starts on the near plane.
    """

    front: IntersectionRecord | None
    back: IntersectionRecord
    block: int


def _pair_indices(depth, front, block):
    """Pairing on depth-ordered arrays; returns ``(pairs, leftovers)`` of indices.

    Each pair is ``(front_index or -1, back_index)``; -1 marks a segment that
    starts at the near plane.
    """
    n = len(depth)
    used = np.zeros(n, bool)
    pairs, leftovers = [], []
    block_count = np.bincount(block, minlength=block.max() + 1) if n else np.zeros(0, int)
    while True:
        backs = np.flatnonzero(~used & ~front)
        if backs.size == 0:
            break
        b = backs[0]
        used[b] = True
        cand = np.flatnonzero(~used & front & (block == block[b]) & (depth <= depth[b]))
        if cand.size:
            f = cand[0]
            used[f] = True
            pairs.append((f, b))
        elif block_count[block[b]] % 2 == 1 and not np.any(block[:b] == block[b]):
            pairs.append((-1, b))
        else:
            leftovers.append(b)
    leftovers.extend(np.flatnonzero(~used).tolist())
    pairs.sort(key=lambda fb: -np.inf if fb[0] < 0 else depth[fb[0]])
    return pairs, sorted(leftovers)


def depth_sort_pairs(records) -> tuple[list[SegmentPair], list[IntersectionRecord]]:
    """Pair the records of one pixel block by block.

    Repeatedly takes the nearest unused back-facing record and matches it with
    the nearest unused front-facing record of the same block that is not
    behind it. A back-facing record without a front that is the nearest of an
    odd number of records of its block starts at the near plane; any other
    unmatched record is returned as a leftover.
    """
    records = sorted(records, key=lambda r: r.depth)
    if not records:
        return [], []
    depth = np.array([r.depth for r in records])
    front = np.array([r.front_facing for r in records], bool)
    block = np.array([r.block for r in records], int)
    pairs, left = _pair_indices(depth, front, block)
    out = [SegmentPair(None if f < 0 else records[f], records[b], int(block[b])) for f, b in pairs]
    return out, [records[i] for i in left]


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------


def clip_segments(plane: CutPlane, g_front, g_back, p_front, p_back, phi, tol):
    """Clip a batch of segments against one cut plane.

    Returns ``(g_front, g_back, p_front, p_back, keep, failed)``. Segments
    entirely in the removed half-space get ``keep = False``. Replaced
    endpoints are found by Newton from the parameter of the known endpoint
    nearer to the plane intersection; rows where that fails are marked in
    ``failed`` (and not kept).
    """
    g_front, g_back = g_front.copy(), g_back.copy()
    p_front, p_back = p_front.copy(), p_back.copy()
    sf, sb = plane.signed(g_front), plane.signed(g_back)
    # drop segments lying in the removed half-space (touching the plane counts)
    keep = ~((sf >= 0) & (sb >= 0) & ((sf > 0) | (sb > 0)))
    failed = np.zeros(len(sf), bool)
    rows = np.flatnonzero(keep & ((sf > 0) | (sb > 0)))
    if rows.size:
        a = sf[rows] / (sf[rows] - sb[rows])
        g_star = g_front[rows] + a[:, None] * (g_back[rows] - g_front[rows])
        near_front = np.linalg.norm(g_star - g_front[rows], axis=1) <= np.linalg.norm(g_star - g_back[rows], axis=1)
        x0 = np.where(near_front[:, None], p_front[rows], p_back[rows])
        sub = phi.take(rows)
        t = tol(rows, g_star) if callable(tol) else tol
        res = newton_solve(sub, g_star, x0, t)
        ok = res.status == CONVERGED
        replace_front = sf[rows] > 0
        fr, bk = rows[ok & replace_front], rows[ok & ~replace_front]
        g_front[fr], p_front[fr] = g_star[ok & replace_front], res.p[ok & replace_front]
        g_back[bk], p_back[bk] = g_star[ok & ~replace_front], res.p[ok & ~replace_front]
        failed[rows[~ok]] = True
        keep[rows] = ok
    return g_front, g_back, p_front, p_back, keep, failed


def clip_segment(plane: CutPlane, g_front, g_back, p_front, p_back, phi, tol: float):
    """Single-segment form of :func:`clip_segments`.

    Returns the adjusted ``(g_front, g_back, p_front, p_back)`` or ``None``
    when the segment lies in the removed half-space. Raises
    :class:`~isovolume.inversion.NoConvergenceError` if the plane point
    cannot be inverted.
    """
    from .inversion import NoConvergenceError

    arrs = [np.asarray(a, dtype=float)[None] for a in (g_front, g_back, p_front, p_back)]
    gf, gb, pf, pb, keep, failed = clip_segments(plane, *arrs, phi, tol)
    if failed[0]:
        raise NoConvergenceError("could not invert the cut-plane intersection")
    if not keep[0]:
        return None
    return gf[0], gb[0], pf[0], pb[0]


def _seed_grid(volume, n: int = 9):
    t = np.linspace(0.0, 1.0, n)
    p = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
    return p, volume.jet(p, 0).value


def seed_radius(volume, grid: int) -> float:
    """Distance within which every point of the block has a seed of the grid.

    Each parameter point is within half a grid spacing of a node along every
    axis, and the derivative control nets bound ``|d phi / d p_a|``.
    """
    r = 0.0
    for a, kv in enumerate(volume.knot_vectors):
        net, _ = derivative_net(volume.coefs, kv, a)
        r += float(np.linalg.norm(net, axis=-1).max(initial=0.0)) / (2 * (grid - 1))
    return r


def invert_points(volume, g, tol, seeds: int = 3, grid: int = 9, allow_boundary: bool = True):
    """Invert world points in one block, trying the nearest coarse-grid seeds.

    Returns ``(p, ok)``; ``ok`` is False where no seed converged inside the
    cube. ``allow_boundary=False`` skips the face-restricted solves, which
    only help for targets reached through the cube boundary.
    """
    g = np.atleast_2d(g)
    n = g.shape[0]
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (n,))
    p_grid, g_grid = _seed_grid(volume, grid)
    dist, nn = cKDTree(g_grid).query(g, k=seeds)
    nn = nn.reshape(n, -1)
    dist = dist.reshape(n, -1)[:, 0]
    p = np.zeros((n, 3))
    ok = np.zeros(n, bool)
    # every image point lies within seed_radius of some seed image
    retry = dist <= seed_radius(volume, grid) + tol
    for k in range(nn.shape[1]):
        rows = np.flatnonzero(~ok & retry)
        if rows.size == 0:
            break
        res = newton_solve(volume, g[rows], p_grid[nn[rows, k]], tol[rows], allow_boundary=allow_boundary)
        good = res.status == CONVERGED
        p[rows[good]] = res.p[good]
        ok[rows[good]] = True
        # a target outside the block drives the iterate onto the cube
        # boundary; only interior stalls are worth another seed
        interior = np.all((res.p > 0.0) & (res.p < 1.0), axis=1)
        retry[rows[~good]] = interior[~good]
    return p, ok


# ---------------------------------------------------------------------------
# segment integration
# ---------------------------------------------------------------------------


@dataclass
class MarchStats:
    max_delta_p: np.ndarray
    samples: np.ndarray
    depth_violations: np.ndarray
    rejected: np.ndarray
    field_errors: np.ndarray


def march_segments(
    blocks,
    block_ids,
    tf: TransferFunction,
    spec: IntegratorSpec,
    g_front,
    g_back,
    p_front,
    state: CompositeState,
    tol=None,
    cam: Camera | None = None,
    pixels=None,
    dirs=None,
    supersample: bool = True,
) -> MarchStats:
    """Integrate a batch of segments front to back into ``state`` (one row per segment).

    A remainder shorter than half a step is merged into the preceding step.
    When ``cam`` and ``pixels`` are given every sample is audited: its
    projection error ``delta_p`` and the monotonicity of its depth along the
    ray direction ``dirs``.
    """
    n = len(block_ids)
    volumes = [b.volume for b in blocks]
    phi = BlockMap(volumes, block_ids)
    audit = cam is not None
    stats = MarchStats(np.zeros(n), np.zeros(n, int), np.zeros(n, int), np.zeros(n, int), np.zeros(n, bool))
    if n == 0:
        return stats
    sampler = SegmentSampler(phi, p_front, g_front, g_back, spec, tol=tol, min_last_fraction=0.5)
    sampler.active &= ~state.terminated
    if dirs is None:
        dirs = sampler.field.v_par
    if pixels is not None:
        pix_xy = np.stack([pixels % cam.width, pixels // cam.width], axis=1) if audit else None
    jac_order = 1
    jet = phi.jet(sampler.p, jac_order)
    rho_prev, bad = evaluate_fields(blocks, block_ids, sampler.p, jet.jacobian)
    stats.field_errors |= bad
    rho_prev = np.where(bad, 0.0, rho_prev)
    depth_prev = np.einsum("ij,ij->i", jet.value - cam.eye, dirs) if audit else None
    if audit:
        stats.max_delta_p = _delta_p(cam, pix_xy, jet.value)
    s_prev = np.zeros(n)
    for rows, p_new, s_new in sampler.run():
        jet = phi.take(rows).jet(p_new, jac_order)
        rho, bad = evaluate_fields(blocks, block_ids[rows], p_new, jet.jacobian)
        stats.field_errors[rows] |= bad
        rho = np.where(bad, rho_prev[rows], rho)
        h = s_new - s_prev[rows]
        sub = state.take(rows)
        supersample_segment(tf, rho_prev[rows], rho, h, sub, substeps=None if supersample else 1)
        state.put(rows, sub)
        rho_prev[rows], s_prev[rows] = rho, s_new
        stats.samples[rows] += 1
        if audit:
            dp = _delta_p(cam, pix_xy[rows], jet.value)
            stats.max_delta_p[rows] = np.maximum(stats.max_delta_p[rows], dp)
            depth = np.einsum("ij,ij->i", jet.value - cam.eye, dirs[rows])
            slack = 1e-9 * (1.0 + np.abs(depth))
            stats.depth_violations[rows] += depth < depth_prev[rows] - slack
            depth_prev[rows] = depth
        done = state.terminated[rows]
        sampler.active[rows[done]] = False
    stats.rejected = sampler.rejected.copy()
    return stats


def _delta_p(cam: Camera, pix_xy, g) -> np.ndarray:
    d = g - cam.eye
    z = d @ cam.forward
    out = np.full(len(z), np.inf)
    front = z > 0
    if np.any(front):
        center = pix_xy[front] + 0.5
        out[front] = 2.0 * np.max(np.abs(cam.project(g[front]) - center), axis=1)
    return out


def march_segment(block: Block, tf, spec: IntegratorSpec, g_front, g_back, p_front, tol=None, state=None, supersample=True):
    """Integrate one segment of one block; returns the updated single-row state."""
    state = CompositeState.empty(1) if state is None else state
    march_segments(
        [block],
        np.zeros(1, int),
        tf,
        spec,
        np.asarray(g_front, float)[None],
        np.asarray(g_back, float)[None],
        np.asarray(p_front, float)[None],
        state,
        tol=tol,
        supersample=supersample,
    )
    return state


# ---------------------------------------------------------------------------
# full frame
# ---------------------------------------------------------------------------


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    alpha: np.ndarray  # (H, W)
    flags: np.ndarray  # (H, W) bit mask
    max_delta_p: np.ndarray  # (H, W), 0 where nothing was sampled
    samples: np.ndarray  # (H, W)
    depth_violations: np.ndarray  # (H, W)
    stats: dict

    def flag_image(self) -> np.ndarray:
        """Diagnostic image: flagged pixels red, others a dimmed copy of the render."""
        out = 0.3 * self.image
        out[self.flags != 0] = (1.0, 0.0, 0.0)
        return out


_MESH_CACHE: dict = {}


def build_mesh(scene: Scene) -> TriangleMesh:
    cam = scene.camera
    key = (
        tuple(cam.eye), tuple(cam.look_at), tuple(cam.up), cam.fov_y, cam.width, cam.height, cam.near,
        tuple(id(b.volume) for b in scene.blocks), scene.tol_px,
    )
    mesh = _MESH_CACHE.get(key)
    if mesh is None:
        mesh = TriangleMesh.concatenate(
            [tessellate_block(b.volume, cam, block=k, tol_px=scene.tol_px) for k, b in enumerate(scene.blocks)]
        )
        _MESH_CACHE.clear()
        _MESH_CACHE[key] = mesh
    return mesh


def _collect_segments(recs, n_pixels):
    """Pair every pixel's records; returns flat segment arrays and unmatched flags."""
    seg_pixel, seg_rank, seg_front, seg_back = [], [], [], []
    unmatched = np.zeros(n_pixels, bool)
    counts = recs.counts()
    for k in np.flatnonzero(counts):
        a, b = recs.offsets[k], recs.offsets[k + 1]
        pairs, left = _pair_indices(recs.depth[a:b], recs.front[a:b], recs.block[a:b])
        if left:
            unmatched[k] = True
        for rank, (f, bk) in enumerate(pairs):
            seg_pixel.append(k)
            seg_rank.append(rank)
            seg_front.append(-1 if f < 0 else a + f)
            seg_back.append(a + bk)
    as_int = lambda x: np.asarray(x, dtype=int)
    return as_int(seg_pixel), as_int(seg_rank), as_int(seg_front), as_int(seg_back), unmatched


def render(scene: Scene, audit: bool = True) -> RenderResult:
    """Render one frame.

    Deterministic for a fixed scene. Pixels where inversion fails, records
    cannot be paired, or (with ``audit``) a sample misses its pixel or moves
    backwards along the ray are flagged rather than aborting the frame.
    """
    t0 = time.perf_counter()
    cam = scene.camera
    h, w = cam.height, cam.width
    n_pix = h * w
    blocks = scene.blocks
    tf = scene.transfer
    spec = scene.integrator
    flags = np.zeros(n_pix, dtype=np.int32)
    max_dp = np.zeros(n_pix)
    samples = np.zeros(n_pix, int)
    depth_viol = np.zeros(n_pix, int)
    state = CompositeState.empty(n_pix)
    stats = {"triangles": 0, "records": 0, "segments": 0, "rejected": 0, "degenerate_entries": 0}

    dirs_all = cam.directions(cam.pixel_centers())
    if blocks:
        mesh = build_mesh(scene)
        stats["triangles"] = len(mesh)
        recs = intersect_camera(mesh, cam, bvh=BVH.build(mesh))
        stats["records"] = len(recs)
        pix, rank, fi, bi, unmatched = _collect_segments(recs, n_pix)
        flags[unmatched] |= FLAG_UNMATCHED
    else:
        pix = rank = fi = bi = np.zeros(0, int)

    def frustum_tol(pixels):
        xy = np.stack([pixels % w, pixels // w], axis=1)

        def tol(rows, g):
            return np.maximum(cam.frustum_margin(xy[rows], g), 1e-12)

        return tol

    if pix.size:
        dirs = dirs_all[pix]
        block_ids = recs.block[bi]
        g_back = cam.eye + recs.depth[bi][:, None] * dirs
        p_back = recs.param[bi]
        has_front = fi >= 0
        g_front = np.empty_like(g_back)
        p_front = np.empty_like(p_back)
        g_front[has_front] = cam.eye + recs.depth[fi[has_front]][:, None] * dirs[has_front]
        p_front[has_front] = recs.param[fi[has_front]]
        keep = np.ones(pix.size, bool)
        tol_all = frustum_tol(pix)

        # segments starting on the near plane
        near_rows = np.flatnonzero(~has_front)
        if near_rows.size:
            g_front[near_rows] = cam.eye + (cam.near / (dirs[near_rows] @ cam.forward))[:, None] * dirs[near_rows]
            for b in np.unique(block_ids[near_rows]):
                rows = near_rows[block_ids[near_rows] == b]
                p, ok = invert_points(blocks[b].volume, g_front[rows], tol_all(rows, g_front[rows]))
                p_front[rows] = p
                keep[rows[~ok]] = False
                flags[pix[rows[~ok]]] |= FLAG_CLIP

        phi_all = BlockMap([b.volume for b in blocks], block_ids)
        for plane in scene.cut_planes:
            rows = np.flatnonzero(keep)
            gf, gb, pf, pb, kp, failed = clip_segments(
                plane, g_front[rows], g_back[rows], p_front[rows], p_back[rows], phi_all.take(rows),
                lambda r, g, rows=rows: tol_all(rows[r], g),
            )
            g_front[rows], g_back[rows], p_front[rows], p_back[rows] = gf, gb, pf, pb
            keep[rows] = kp
            flags[pix[rows[failed]]] |= FLAG_CLIP

        # entries with a singular Jacobian
        rows = np.flatnonzero(keep & (np.linalg.norm(g_back - g_front, axis=1) > 0))
        keep[np.setdiff1d(np.flatnonzero(keep), rows)] = False
        if rows.size:
            gf, pf, ok, shift = fix_degenerate_entries(
                phi_all.take(rows), g_front[rows], g_back[rows], p_front[rows], p_back[rows],
                lambda r, g, rows=rows: tol_all(rows[r], g),
            )
            stats["degenerate_entries"] = int(np.count_nonzero(shift > 0) + np.count_nonzero(~ok))
            g_front[rows], p_front[rows] = gf, pf
            keep[rows[~ok]] = False
            flags[pix[rows[~ok]]] |= FLAG_INVERSION
            # segments shorter than the shift collapse
            short = np.linalg.norm(g_back[rows] - g_front[rows], axis=1) <= 0
            keep[rows[short]] = False

        stats["segments"] = int(np.count_nonzero(keep))
        for r in range(int(rank.max()) + 1 if rank.size else 0):
            rows = np.flatnonzero(keep & (rank == r))
            if rows.size == 0:
                continue
            px = pix[rows]
            sub = state.take(px)
            ms = march_segments(
                blocks, block_ids[rows], tf, spec, g_front[rows], g_back[rows], p_front[rows], sub,
                tol=lambda rr, g, rows=rows: tol_all(rows[rr], g),
                cam=cam if audit else None, pixels=px, dirs=dirs[rows], supersample=scene.supersample,
            )
            state.put(px, sub)
            samples[px] += ms.samples + 1
            stats["rejected"] += int(ms.rejected.sum())
            flags[px[ms.rejected > 0]] |= FLAG_INVERSION
            flags[px[ms.field_errors]] |= FLAG_FIELD
            if audit:
                max_dp[px] = np.maximum(max_dp[px], ms.max_delta_p)
                depth_viol[px] += ms.depth_violations
                flags[px[ms.max_delta_p > 1.0]] |= FLAG_DELTA_P
                flags[px[ms.depth_violations > 0]] |= FLAG_DEPTH

    bg = scene.background_image().reshape(-1, 3)
    image = np.clip(state.over(bg), 0.0, 1.0).reshape(h, w, 3)
    stats.update(
        {
            "max_delta_p": float(max_dp.max()) if audit else None,
            "depth_violations": int(depth_viol.sum()),
            "samples": int(samples.sum()),
            "flagged_pixels": int(np.count_nonzero(flags)),
            "seconds": time.perf_counter() - t0,
            "method": spec.method,
            "ds": spec.ds,
            "c": spec.c,
        }
    )
    for bit, name in FLAG_NAMES.items():
        stats[f"flag_{name}"] = int(np.count_nonzero(flags & bit))
    return RenderResult(
        image,
        state.alpha.reshape(h, w),
        flags.reshape(h, w),
        max_dp.reshape(h, w),
        samples.reshape(h, w),
        depth_viol.reshape(h, w),
        stats,
    )


# ---------------------------------------------------------------------------
# voxelized baseline
# ---------------------------------------------------------------------------


@dataclass
class VoxelGrid:
    """Scalar values and inside flags sampled at voxel centers of a box."""

    lo: np.ndarray
    hi: np.ndarray
    value: np.ndarray  # (nx, ny, nz)
    inside: np.ndarray  # (nx, ny, nz) float, 1 inside and 0 outside

    def __post_init__(self):
        if min(self.value.shape) < 2:
            raise ValueError("voxel grids need at least two voxels per axis")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.value.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.resolution)

    def centers(self) -> np.ndarray:
        axes = [self.lo[a] + (np.arange(n) + 0.5) * self.spacing[a] for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def sample(self, g) -> tuple[np.ndarray, np.ndarray]:
        """Trilinearly interpolated value and inside flag at world points (N, 3)."""
        idx = (np.atleast_2d(g) - self.lo) / self.spacing - 0.5
        coords = idx.T
        v = map_coordinates(self.value, coords, order=1, mode="nearest")
        ins = map_coordinates(self.inside, coords, order=1, mode="grid-constant", cval=0.0)
        return v, ins


def voxelize(blocks, resolution=64, pad: float = 0.0) -> VoxelGrid:
    """Sample the scene's scalar field at the centers of a regular grid.

    Each voxel center is inverted in every block (Newton seeded from the
    nearest points of a coarse parameter grid); the first block that
    contains it provides the value. Centers outside all blocks get value 0
    and an inside flag of 0.
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    lo, hi = scene_bounds(blocks)
    ext = hi - lo
    lo, hi = lo - pad * ext, hi + pad * ext
    shape = tuple(int(r) for r in res)
    grid = VoxelGrid(lo, hi, np.zeros(shape), np.zeros(shape))
    g = grid.centers().reshape(-1, 3)
    value = np.zeros(g.shape[0])
    inside = np.zeros(g.shape[0], bool)
    tol = 1e-10 * float(np.linalg.norm(ext))
    for k, blk in enumerate(blocks):
        vol = blk.volume
        cmin, cmax = vol.coefs.reshape(-1, 3).min(axis=0), vol.coefs.reshape(-1, 3).max(axis=0)
        rows = np.flatnonzero(~inside & np.all((g >= cmin) & (g <= cmax), axis=1))
        if rows.size == 0:
            continue
        p, ok = invert_points(vol, g[rows], tol, grid=33, allow_boundary=False)
        rows, p = rows[ok], p[ok]
        jac = vol.jet(p, 1).jacobian
        v, bad = blk.field.evaluate(p, jac)
        value[rows] = np.where(bad, 0.0, v)
        inside[rows] = True
    grid.value[...] = value.reshape(shape)
    grid.inside[...] = inside.reshape(shape).astype(float)
    return grid


def render_voxel(scene: Scene, grid: VoxelGrid, ds: float | None = None) -> RenderResult:
    """Classic ray marching through the voxel grid with the same compositing.

    Samples are placed every ``ds`` from the grid box entry; a pair of
    consecutive samples is composited only when both have an interpolated
    inside flag of at least 0.5.
    """
    t0 = time.perf_counter()
    cam = scene.camera
    h, w = cam.height, cam.width
    ds = scene.integrator.ds if ds is None else ds
    dirs = cam.directions(cam.pixel_centers())
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (grid.lo - cam.eye) * inv
        t2 = (grid.hi - cam.eye) * inv
    tmin = np.nanmax(np.fmin(t1, t2), axis=1)
    tmax = np.nanmin(np.fmax(t1, t2), axis=1)
    t_near = cam.near / (dirs @ cam.forward)
    tmin = np.maximum(tmin, t_near)
    hit = tmax > tmin
    state = CompositeState.empty(n)
    rows = np.flatnonzero(hit)
    t = tmin[rows].copy()
    prev_v, prev_in = None, None
    count = np.zeros(n, int)
    while rows.size:
        g = cam.eye + t[:, None] * dirs[rows]
        v, ins = grid.sample(g)
        inside = ins >= 0.5
        for plane in scene.cut_planes:
            inside &= plane.signed(g) <= 0
        if prev_v is not None:
            both = inside & prev_in
            if np.any(both):
                r = rows[both]
                sub = state.take(r)
                supersample_segment(scene.transfer, prev_v[both], v[both], ds, sub, substeps=None if scene.supersample else 1)
                state.put(r, sub)
        count[rows] += 1
        t = t + ds
        alive = (t <= tmax[rows]) & ~state.terminated[rows]
        rows, t, prev_v, prev_in = rows[alive], t[alive], v[alive], inside[alive]
    bg = scene.background_image().reshape(-1, 3)
    image = np.clip(state.over(bg), 0.0, 1.0).reshape(h, w, 3)
    stats = {"samples": int(count.sum()), "seconds": time.perf_counter() - t0, "resolution": list(grid.resolution)}
    zeros = np.zeros((h, w))
    return RenderResult(image, state.alpha.reshape(h, w), zeros.astype(np.int32), zeros, count.reshape(h, w), zeros.astype(int), stats)
