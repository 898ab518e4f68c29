"""Acceptance checks.

Every check appends one ``[PASS]``/``[FAIL]`` line to the report printed at
the end of the pytest run. Tolerances are module constants.
"""
import time

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from conftest import ACCEPTANCE_LINES
from isovolume.color import compare_images
from isovolume.convergence import DEFAULT_DS, convergence_study
from isovolume.fixtures import FIXTURES, fixture_scene, twisted_bar_scene
from isovolume.inversion import METHODS, IntegratorSpec
from isovolume.pipeline import depth_sort_pairs, render, render_voxel, voxelize
from isovolume.shading import (
    CompositeState,
    TransferFunction,
    composite_step,
    field_param_quality,
    field_von_mises,
    sample_transfer,
    strain_tensor,
    supersample_segment,
)
from isovolume.splinecore import BSplineVolume
from isovolume.surfnet import IntersectionRecord
from oracles import central_jacobian, naive_volume_array, random_clamped_knots, slab_interval

# criterion 1
ORDER_TARGETS = {"rk1": 1, "rk2": 2, "rk3": 3, "rk4": 4, "rk4-38": 4, "rkf": 5}
ORDER_TOL = {"rk1": 0.4, "rk2": 0.4, "rk3": 0.4, "rk4": 0.4, "rk4-38": 0.4, "rkf": 0.5}
C1_SECONDS = 10.0
# criterion 2: published errors at the four sample distances
TABLE1 = {
    "rk2": [8.6e-04, 2.1e-04, 5.2e-05, 1.3e-05],
    "rk3": [1.5e-06, 1.7e-07, 2.1e-08, 2.5e-09],
    "rk4": [4.2e-07, 3.0e-08, 2.0e-09, 1.3e-10],
    "rk4-38": [1.7e-07, 1.3e-08, 8.8e-10, 5.7e-11],
    "rkf": [3.0e-08, 9.5e-10, 2.9e-11, 9.2e-13],
}
TABLE1_FACTOR = 4.0
RF_LOOSE, RF_TIGHT, RF_TIGHT_MAX = 1e-3, 1e-14, 1e-13
# criterion 3
C3_SIZE = (320, 240)
C3_SECONDS = 60.0
# criterion 4
SPLINE_POINTS = 10_000
SPLINE_ATOL = 1e-12
JAC_RTOL, HESS_RTOL = 1e-6, 1e-4
# criterion 5
ABSORBER_SAMPLES = 512
ABSORBER_RTOL = 0.01
HALF_STEP_ATOL = 1e-12
SUPERSAMPLE_RATIO = 10.0
TRUTH_SUBSTEPS = 10_000
# criterion 6
C6_SIZE = (160, 120)
C6_DS_FRACTIONS = (1 / 64, 1 / 128, 1 / 256)
C6_REF_FACTOR = 8
C6_VOXELS = 64
C6_MEAN_RATIO = 2.0
C6_BOUNDARY_DE = 5.0
# criterion 7
ALG2_TRIALS = 4000
ALG2_MIN_TESTED = 1000
ALG2_MIN_GAP = 1e-6
# criterion 8
FIELD_ATOL = 1e-10


def report(criterion, name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] C{criterion} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_c1_convergence_orders():
    t0 = time.perf_counter()
    table = convergence_study(methods=list(ORDER_TARGETS), ds_list=DEFAULT_DS, tolerances=())
    seconds = time.perf_counter() - t0
    ok = [report(1, "runtime", seconds < C1_SECONDS, f"{seconds:.2f} s < {C1_SECONDS} s")]
    for m, target in ORDER_TARGETS.items():
        order = table.row(m).order(table.ds)
        ok.append(report(1, f"order {m}", abs(order - target) <= ORDER_TOL[m], f"{order:.3f} vs {target} +- {ORDER_TOL[m]}"))
    # not part of the timed set
    order = convergence_study(methods=["irk1"], ds_list=DEFAULT_DS, tolerances=()).row("irk1").order(table.ds)
    ok.append(report(1, "order irk1 (c=100)", abs(order - 1) <= 0.4, f"{order:.3f} vs 1 +- 0.4"))
    assert all(ok)


def test_c2_error_magnitudes():
    table = convergence_study(methods=list(TABLE1) + ["rf"], ds_list=DEFAULT_DS, tolerances=(RF_LOOSE, RF_TIGHT))
    ok = []
    for m, ref in TABLE1.items():
        err = np.array(table.row(m).errors)
        ratio = np.maximum(err / ref, ref / err)
        detail = " ".join(f"{e:.1e}" for e in err) + f" (worst factor {ratio.max():.2f})"
        ok.append(report(2, f"{m} within x{TABLE1_FACTOR:g} of table", bool(np.all(ratio <= TABLE1_FACTOR)), detail))
    loose = np.array(table.row(f"rf (tol={RF_LOOSE:g})").errors)
    ok.append(report(2, "rf tol=1e-3 never exceeds 1e-3", bool(np.all(loose <= RF_LOOSE)), f"max {loose.max():.2e}"))
    tight = np.array(table.row(f"rf (tol={RF_TIGHT:g})").errors)
    ok.append(report(2, "rf tol=1e-14 reaches 1e-13", bool(np.all(tight <= RF_TIGHT_MAX)), f"max {tight.max():.2e}"))
    assert all(ok)


@pytest.mark.slow
@pytest.mark.parametrize("scene_name", ["twisted-bar", "collapsed-edge"])
def test_c3_pixel_accuracy_audit(scene_name):
    ok = []
    total = 0.0
    for method in METHODS:
        res = render(fixture_scene(scene_name, *C3_SIZE, method))
        s = res.stats
        total += s["seconds"]
        good = s["max_delta_p"] <= 1.0 and s["depth_violations"] == 0
        ok.append(report(3, f"{scene_name} {method} audit", good, f"max dP {s['max_delta_p']:.3f}, depth violations {s['depth_violations']}, flagged {s['flagged_pixels']}"))
        ok.append(report(3, f"{scene_name} {method} runtime", s["seconds"] < C3_SECONDS, f"{s['seconds']:.1f} s < {C3_SECONDS:g} s"))
    report(3, f"{scene_name} all integrators (informational)", True, f"{total:.1f} s in total")
    assert all(ok)


def test_c4_spline_oracle():
    rng = np.random.default_rng(40)
    degrees, n = (2, 3, 1), (6, 7, 4)
    knots = [random_clamped_knots(rng, n[a], degrees[a]) for a in range(3)]
    coefs = rng.normal(size=n + (3,))
    vol = BSplineVolume(knots, degrees, coefs)
    p = rng.uniform(0, 1, (SPLINE_POINTS, 3))
    err = np.abs(vol.jet(p, 0).value - naive_volume_array(knots, degrees, coefs, p)).max()
    ok = [report(4, "evaluation vs Cox-de Boor", err <= SPLINE_ATOL, f"{err:.1e} <= {SPLINE_ATOL:g} at {SPLINE_POINTS} points")]

    # cubic in every direction so that second derivatives are continuous
    knots3 = [random_clamped_knots(rng, 7, 3) for _ in range(3)]
    vol3 = BSplineVolume(knots3, (3, 3, 3), rng.normal(size=(7, 7, 7, 3)))
    q = rng.uniform(0.02, 0.98, (1000, 3))
    jet = vol3.jet(q, 2)
    fd_j = central_jacobian(lambda x: vol3.jet(x, 0).value, q)
    fd_h = np.stack([central_jacobian(lambda x, a=a: vol3.jet(x, 1).jacobian[:, :, a], q) for a in range(3)], axis=2)
    rel_j = np.abs(jet.jacobian - fd_j).max() / np.abs(jet.jacobian).max()
    rel_h = np.abs(jet.hessian - fd_h).max() / np.abs(jet.hessian).max()
    ok.append(report(4, "Jacobian vs finite differences", rel_j <= JAC_RTOL, f"{rel_j:.1e} <= {JAC_RTOL:g} relative"))
    ok.append(report(4, "Hessian vs finite differences", rel_h <= HESS_RTOL, f"{rel_h:.1e} <= {HESS_RTOL:g} relative"))
    assert all(ok)


def test_c5_compositing():
    # constant opacity, emission ramping from black to white over a unit path
    L, xi, a = 1.0, 0.25, 0.3
    kappa = -np.log(1 - a) / xi
    tf = TransferFunction.from_nodes([(0.0, (0, 0, 0), a), (1.0, (1, 1, 1), a)], xi)
    s = CompositeState.empty()
    for x in (np.arange(ABSORBER_SAMPLES) + 0.5) / ABSORBER_SAMPLES:
        c, al = sample_transfer(tf, x)
        composite_step(s, c, al, L / ABSORBER_SAMPLES, xi)
    exact_c = (1 - np.exp(-kappa * L) * (1 + kappa * L)) / (kappa * L)
    rel = abs(s.color[0, 0] - exact_c) / exact_c
    ok = [report(5, "absorber vs closed form", rel <= ABSORBER_RTOL, f"relative error {rel:.2e} <= {ABSORBER_RTOL:g}")]

    c, al, ds, xi2 = np.array([0.7, 0.2, 0.4]), 0.35, 0.8, 0.3
    one = composite_step(CompositeState.empty(), c, al, ds, xi2)
    two = composite_step(composite_step(CompositeState.empty(), c, al, ds / 2, xi2), c, al, ds / 2, xi2)
    gap = max(np.abs(one.color - two.color).max(), abs(one.alpha[0] - two.alpha[0]))
    ok.append(report(5, "two half steps equal one step", gap <= HALF_STEP_ATOL, f"{gap:.1e} <= {HALF_STEP_ATOL:g}"))

    step = TransferFunction.from_nodes(
        [(0.0, (0.2, 0.2, 0.2), 0.0), (0.499, (0.2, 0.2, 0.2), 0.0), (0.501, (1.0, 0.5, 0.0), 0.9), (1.0, (1.0, 0.5, 0.0), 0.9)],
        0.05,
    )
    args = (step, 0.1, 0.8, 0.2)
    truth = supersample_segment(*args, CompositeState.empty(), substeps=TRUTH_SUBSTEPS)

    def err(state):
        return max(np.abs(state.color - truth.color).max(), abs(state.alpha[0] - truth.alpha[0]))

    e_ss = err(supersample_segment(*args, CompositeState.empty()))
    e_plain = err(supersample_segment(*args, CompositeState.empty(), substeps=1))
    ratio = e_plain / max(e_ss, 1e-300)
    ok.append(report(5, "supersampling vs single sample", ratio >= SUPERSAMPLE_RATIO, f"errors {e_ss:.1e} vs {e_plain:.1e}, ratio {ratio:.0f} >= {SUPERSAMPLE_RATIO:g}"))
    assert all(ok)


@pytest.mark.slow
def test_c6_voxel_baseline_trend():
    sc = twisted_bar_scene(*C6_SIZE, "rf")
    diag = sc.diagonal
    finest = min(C6_DS_FRACTIONS) * diag
    ref = render(sc.with_integrator(IntegratorSpec("rf", ds=finest / C6_REF_FACTOR)), audit=False)
    mask = ref.alpha > 1e-6
    boundary = mask & ~binary_erosion(mask)
    grid = voxelize(sc.blocks, C6_VOXELS)
    ok = []
    maxima = []
    for frac in C6_DS_FRACTIONS:
        ds = frac * diag
        direct = render(sc.with_integrator(IntegratorSpec("rf", ds=ds)), audit=False)
        voxel = render_voxel(sc, grid, ds=ds)
        sd, _, _ = compare_images(ref.image, direct.image, mask)
        sv, dev, _ = compare_images(ref.image, voxel.image, mask)
        maxima.append(sd["max"])
        label = f"ds = diag/{round(1 / frac)}"
        ratio = sv["mean"] / sd["mean"]
        ok.append(report(6, f"{label} voxel mean dE >= {C6_MEAN_RATIO:g}x direct", ratio >= C6_MEAN_RATIO, f"{sv['mean']:.3f} vs {sd['mean']:.3f} (x{ratio:.1f})"))
        b_mean = float(dev[boundary].mean())
        ok.append(report(6, f"{label} voxel boundary mean dE > {C6_BOUNDARY_DE:g}", b_mean > C6_BOUNDARY_DE, f"{b_mean:.2f} over {boundary.sum()} boundary pixels, {np.mean(dev[boundary] > C6_BOUNDARY_DE):.0%} above {C6_BOUNDARY_DE:g}"))
    mono = all(b < a for a, b in zip(maxima, maxima[1:]))
    ok.append(report(6, "direct max dE decreases as samples double", mono, " > ".join(f"{m:.3f}" for m in maxima)))
    assert all(ok)


def random_block(rng):
    A = np.diag(rng.uniform(0.5, 2.0, 3)) + rng.uniform(-0.4, 0.4, (3, 3))
    return A, rng.uniform(-1.5, 1.5, 3) - A @ np.full(3, 0.5)


def ray_records(blocks, origin, direction):
    """Entry and exit records of every block hit by the ray, plus the true pairing."""
    recs, truth = [], set()
    for k, (A, b) in enumerate(blocks):
        t_in, t_out = slab_interval(A, b, origin, direction)
        if t_out <= max(t_in, 0.0):
            continue
        q_out = np.linalg.solve(A, origin + t_out * direction - b)
        recs.append(IntersectionRecord(float(t_out), q_out, k, False))
        if t_in > 0:
            recs.append(IntersectionRecord(float(t_in), np.linalg.solve(A, origin + t_in * direction - b), k, True))
            truth.add((float(t_in), float(t_out), k))
        else:
            truth.add((None, float(t_out), k))
    return recs, truth


def test_c7_pairing_property_suite():
    rng = np.random.default_rng(70)
    tested = matched = crossed = skipped = multi = 0
    for _ in range(ALG2_TRIALS):
        blocks = [random_block(rng) for _ in range(rng.integers(1, 5))]
        if len(blocks) > 1 and rng.uniform() < 0.3:
            # second block strictly inside the first
            A, b = blocks[0]
            blocks[1] = (0.5 * A, b + A @ np.full(3, 0.25))
        # a few rays start inside a block, exercising the near-plane rule
        origin = rng.uniform(-1.5, 1.5, 3) if rng.uniform() < 0.2 else rng.uniform(-1, 1, 3) + [0, 0, -6]
        target = rng.uniform(-1, 1, 3)
        direction = (target - origin) / np.linalg.norm(target - origin)
        recs, truth = ray_records(blocks, origin, direction)
        if not recs:
            continue
        depths = np.sort([r.depth for r in recs])
        if np.any(np.diff(depths) < ALG2_MIN_GAP) or depths[0] < ALG2_MIN_GAP:
            skipped += 1  # grazing ray or coincident records
            continue
        order = rng.permutation(len(recs))
        pairs, left = depth_sort_pairs([recs[i] for i in order])
        got = {(None if p.front is None else p.front.depth, p.back.depth, p.block) for p in pairs}
        crossed += sum(p.front is not None and p.front.block != p.back.block for p in pairs)
        tested += 1
        multi += len(truth) > 1
        matched += got == truth and not left
    ok = [
        report(7, "pairing equals geometric ground truth", matched == tested, f"{matched}/{tested} rays, {multi} crossing several blocks ({skipped} grazing skipped)"),
        report(7, "pairs never cross block ids", crossed == 0, f"{crossed} crossing pairs"),
    ]
    assert tested >= ALG2_MIN_TESTED
    assert all(ok)


def rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


SHEAR_GAMMA = 0.2
SHEAR_JP = np.array([[1.0, 0.2, 0.0], [0.0, 2.0, 0.0], [0.1, 0.0, 1.0]])


def shear_value():
    G = np.zeros((3, 3))
    G[0, 1] = SHEAR_GAMMA
    return field_von_mises(SHEAR_JP, G @ SHEAR_JP), strain_tensor(SHEAR_JP, G @ SHEAR_JP)[0]


def test_c8_field_examples():
    ok = []
    q = field_param_quality(rotation(80))
    ok.append(report(8, "quality of a rotation is 1/sqrt(3)", abs(q - 1 / np.sqrt(3)) <= FIELD_ATOL, f"{q:.15f}"))
    ok.append(report(8, "quality of a singular Jacobian is 0", field_param_quality(np.diag([1.0, 2.0, 0.0])) == 0.0))
    s = 2.5
    q = field_param_quality(s * np.eye(3))
    ok.append(report(8, "quality of a uniform scale is s^2/sqrt(3)", abs(q - s**2 / np.sqrt(3)) <= FIELD_ATOL, f"{q:.12f}"))
    J = np.random.default_rng(81).normal(size=(200, 3, 3))
    base = field_param_quality(J)
    worst = max(np.abs(field_param_quality(J @ rotation(90 + k)) - base).max() for k in range(10))
    ok.append(report(8, "quality invariant under rotation", worst <= FIELD_ATOL, f"max change {worst:.1e}"))
    Jp = np.array([[2.0, 0.1, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 1.5]])
    v0 = abs(field_von_mises(Jp, np.zeros((3, 3))))
    ok.append(report(8, "von Mises of zero displacement", v0 <= FIELD_ATOL, f"{v0:.1e}"))
    vh = abs(field_von_mises(Jp, 0.3 * Jp))
    ok.append(report(8, "von Mises of hydrostatic strain", vh <= FIELD_ATOL, f"{vh:.1e}"))
    value, sigma = shear_value()
    ok.append(report(8, "simple shear sigma_12 = gamma/2", abs(sigma[0, 1] - SHEAR_GAMMA / 2) <= FIELD_ATOL, f"{sigma[0, 1]:.12f}"))
    expected = 0.5 * 6 * (SHEAR_GAMMA / 2) ** 2
    ok.append(report(8, "simple shear value from the stated formula (3 gamma^2 / 4)", abs(value - expected) <= FIELD_ATOL, f"{value:.12f} vs {expected:.12f}"))
    assert all(ok)


@pytest.mark.xfail(strict=True, reason="the listed shear value 3 gamma^2 / 2 disagrees with the stated formula")
def test_c8_listed_shear_value():
    value, _ = shear_value()
    listed = 1.5 * SHEAR_GAMMA**2
    ok = report(8, "simple shear value as listed (3 gamma^2 / 2)", abs(value - listed) <= FIELD_ATOL, f"{value:.6f} vs {listed:.6f}; see decisions ledger")
    assert ok


@pytest.mark.parametrize("name", FIXTURES)
def test_c9_determinism(name):
    a = render(fixture_scene(name, 160, 120))
    b = render(fixture_scene(name, 160, 120))
    same = np.array_equal(a.image, b.image) and np.array_equal(a.flags, b.flags) and np.array_equal(a.max_delta_p, b.max_delta_p)
    assert report(9, f"{name} renders bit-identical", same)
