import numpy as np
import pytest

from isovolume.models import open_uniform_knots, twisted_bar, unit_cube
from isovolume.rayscene import Camera, delta_p
from isovolume.splinecore import BSplinePatch, extract_boundary_patches, second_derivative_bound
from isovolume.surfnet import (
    BVH,
    TriangleMesh,
    intersect_camera,
    intersect_scene,
    intersect_triangles,
    tessellate,
    tessellate_block,
    tessellation_level,
    world_tolerance,
    write_tessellation,
    _nearest_depth,
)


def camera(w=64, h=48):
    return Camera([0.5, -3.0, 0.5], [0.5, 0.5, 0.5], [0, 0, 1], np.radians(40.0), w, h)


def sine_patch(amp=0.1, n=12):
    """Cubic patch whose control net samples z = amp sin(2 pi s)."""
    kv = open_uniform_knots(n, 3)
    s = np.linspace(0, 1, n)
    net = np.zeros((n, 2, 3))
    net[:, :, 0] = s[:, None]
    net[:, :, 1] = np.array([0.0, 1.0])[None, :]
    net[:, :, 2] = (amp * np.sin(2 * np.pi * s))[:, None]
    return BSplinePatch([kv, [0, 0, 1, 1]], (3, 1), net)


def test_planar_patch_level_one():
    cam = camera()
    for patch in extract_boundary_patches(unit_cube()):
        assert tessellation_level(patch, cam) == (1, 1)


def test_square_root_law():
    cam = camera()
    patch = extract_boundary_patches(twisted_bar())[0]
    b = second_derivative_bound(patch)
    n1 = tessellation_level(patch, cam, bounds=b)
    n4 = tessellation_level(patch, cam, bounds=tuple(4 * x for x in b))
    assert all(m <= 2 * n + 1 for n, m in zip(n1, n4))


def test_level_capped():
    cam = camera()
    patch = extract_boundary_patches(twisted_bar())[0]
    assert max(tessellation_level(patch, cam, bounds=(1e12, 1e12, 0), max_level=32)) == 32


def test_sine_patch_interpolation_error_within_tolerance():
    cam = Camera([0.5, 0.5, -2.0], [0.5, 0.5, 0.0], [0, 1, 0], np.radians(45.0), 200, 200)
    surf = sine_patch()
    n_s, n_t = tessellation_level(surf, cam)
    tol = world_tolerance(cam, _nearest_depth(cam, surf.coefs))
    # dense samples against the piecewise-linear interpolant on the same grid
    rng = np.random.default_rng(0)
    st = rng.uniform(0, 1, (100_000, 2))
    exact = surf.jet(st, 0).value
    i = np.minimum((st[:, 0] * n_s).astype(int), n_s - 1)
    j = np.minimum((st[:, 1] * n_t).astype(int), n_t - 1)
    fs, ft = st[:, 0] * n_s - i, st[:, 1] * n_t - j
    def node(a, b):
        return surf.jet(np.stack([a / n_s, b / n_t], axis=1), 0).value
    p00, p10, p01, p11 = node(i, j), node(i + 1, j), node(i, j + 1), node(i + 1, j + 1)
    lower = (fs >= ft)[:, None]  # triangle (00, 10, 11) vs (00, 11, 01)
    lin = np.where(
        lower,
        p00 + fs[:, None] * (p10 - p00) + ft[:, None] * (p11 - p10),
        p00 + ft[:, None] * (p01 - p00) + fs[:, None] * (p11 - p01),
    )
    err = np.linalg.norm(exact - lin, axis=1).max()
    assert err <= tol
    assert err <= float(cam.pixel_size(_nearest_depth(cam, surf.coefs)))


def test_level_one_tessellation_two_triangles():
    patch = extract_boundary_patches(unit_cube())[4]
    mesh = tessellate(patch, (1, 1))
    assert len(mesh) == 2
    areas = 0.5 * np.linalg.norm(np.cross(mesh.params[:, 1] - mesh.params[:, 0], mesh.params[:, 2] - mesh.params[:, 0]), axis=1)
    assert np.isclose(areas.sum(), 1.0, atol=1e-12)


@pytest.mark.parametrize("level", [(1, 1), (3, 5), (7, 2)])
def test_vertex_count_and_parameter_area(level):
    patch = extract_boundary_patches(twisted_bar())[2]
    mesh = tessellate(patch, level)
    unique = np.unique(mesh.params.reshape(-1, 3), axis=0)
    assert unique.shape[0] == (level[0] + 1) * (level[1] + 1)
    p = mesh.params
    areas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    assert abs(areas.sum() - 1.0) <= 1e-12
    assert np.all(areas > 0)


def test_triangle_vertices_are_images_of_parameter_vertices():
    vol = twisted_bar()
    mesh = tessellate_block(vol, camera())
    g = vol.jet(mesh.params.reshape(-1, 3), 0).value
    assert np.abs(g - mesh.geometry.reshape(-1, 3)).max() <= 1e-12


def test_block_tessellation_is_closed():
    # every edge is shared by exactly two triangles (watertight across faces)
    mesh = tessellate_block(twisted_bar(), camera())
    edges = {}
    for tri in mesh.params:
        for a, b in [(0, 1), (1, 2), (2, 0)]:
            key = tuple(sorted([tuple(tri[a]), tuple(tri[b])]))
            edges[key] = edges.get(key, 0) + 1
    assert set(edges.values()) == {2}


def test_normals_point_outward():
    vol = unit_cube()
    mesh = tessellate_block(vol, camera())
    centers = mesh.geometry.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", mesh.normals, centers - 0.5) > 0)


def square_mesh(z=1.0):
    g = np.array([[[-1, -1, z], [1, -1, z], [1, 1, z]], [[-1, -1, z], [1, 1, z], [-1, 1, z]]], float)
    p = np.array([[[0, 0, 0], [1, 0, 0], [1, 1, 0]], [[0, 0, 0], [1, 1, 0], [0, 1, 0]]], float)
    return TriangleMesh(g, p, np.zeros(2, int), np.full(2, 4))


def test_ray_through_square():
    recs = intersect_scene(square_mesh(), [[0.2, 0.1, 0.0]], [[0.0, 0.0, 1.0]])
    assert len(recs) == 1
    assert np.isclose(recs.depth[0], 1.0)
    assert np.allclose(recs.param[0], [0.6, 0.55, 0.0])


def test_ray_missing_everything():
    recs = intersect_scene(square_mesh(), [[3.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
    assert len(recs) == 0 and recs.counts()[0] == 0


def test_ray_through_shared_diagonal_counted_once():
    # the diagonal of the square is shared by both triangles
    recs = intersect_scene(square_mesh(), [[0.3, 0.3, 0.0]], [[0.0, 0.0, 1.0]])
    assert len(recs) == 1


def test_edge_hits_counted_once_on_dense_grid():
    mesh = tessellate_block(unit_cube(), camera(), tol_px=0.25)
    # rays aimed exactly at the vertex grid of the front face
    xs = np.linspace(0.0, 1.0, 9)[1:-1]
    o = np.array([[x, -2.0, z] for x in xs for z in xs])
    d = np.tile([0.0, 1.0, 0.0], (o.shape[0], 1))
    recs = intersect_scene(mesh, o, d)
    assert np.all(recs.counts() == 2)


def test_cube_center_ray():
    full = tessellate_block(unit_cube(), camera())
    assert len(full) == 12
    recs = intersect_scene(full, [[0.5, -1.0, 0.5]], [[0.0, 1.0, 0.0]])
    assert len(recs) == 2
    assert recs.front.tolist() == [True, False]
    assert np.allclose(recs.depth, [1.0, 2.0])
    # symmetric about the cube center
    assert np.isclose(recs.depth.mean(), 1.5)


def test_bvh_candidates_superset_of_brute_force():
    mesh = tessellate_block(twisted_bar(), camera(32, 24))
    rng = np.random.default_rng(1)
    o = rng.uniform(-2, 2, (200, 3)) + [0, -5, 2]
    d = rng.normal(size=(200, 3)) + [0, 3, 0]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    fast = intersect_scene(mesh, o, d, bvh=BVH.build(mesh))
    n, t = len(o), len(mesh)
    hit, tt, _, _ = intersect_triangles(np.repeat(o, t, 0), np.repeat(d, t, 0), np.tile(mesh.geometry, (n, 1, 1)))
    brute = (hit & (tt > 0)).reshape(n, t).sum(axis=1)
    assert np.array_equal(fast.counts(), brute)


def test_camera_records_project_into_their_pixel():
    vol = twisted_bar()
    cam = Camera([3.0, -5.0, 2.0], [0, 0, 2.0], [0, 0, 1], np.radians(45), 40, 30)
    mesh = tessellate_block(vol, cam)
    recs = intersect_camera(mesh, cam)
    assert len(recs) > 0
    g = vol.jet(recs.param, 0).value
    px = np.stack([recs.pixel % cam.width, recs.pixel // cam.width], axis=1)
    assert delta_p(cam, px, g).max() <= 1.0
    # closed surface, eye outside: every pixel has an even record count
    assert np.all(recs.counts() % 2 == 0)


def test_records_sorted_and_on_faces():
    cam = Camera([3.0, -5.0, 2.0], [0, 0, 2.0], [0, 0, 1], np.radians(45), 24, 18)
    recs = intersect_camera(tessellate_block(twisted_bar(), cam), cam)
    for k in range(recs.n_pixels):
        a, b = recs.offsets[k], recs.offsets[k + 1]
        assert np.all(np.diff(recs.depth[a:b]) >= 0)
    on_face = np.any((recs.param == 0) | (recs.param == 1), axis=1)
    assert on_face.all()


def test_tessellation_dump(tmp_path):
    mesh = tessellate_block(unit_cube(), camera())
    path = tmp_path / "mesh.txt"
    write_tessellation(mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# 12 triangles"
    assert sum(l.startswith("v ") for l in lines) == 36
    assert sum(l.startswith("f ") for l in lines) == 12
