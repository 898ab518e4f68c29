import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isovolume.models import unit_cube
from isovolume.shading import (
    CompositeState,
    FieldSource,
    TransferFunction,
    composite_step,
    field_param_quality,
    field_von_mises,
    sample_transfer,
    strain_tensor,
    supersample_segment,
)


def ramp_tf(xi=1.0):
    return TransferFunction.from_nodes(
        [(0.0, (0.0, 0.0, 1.0), 0.0), (0.5, (0.0, 1.0, 0.0), 0.4), (1.0, (1.0, 0.0, 0.0), 0.9)], xi
    )


def step_tf(xi=0.05):
    # near-discontinuous opacity at 0.5
    return TransferFunction.from_nodes(
        [(0.0, (0.2, 0.2, 0.2), 0.0), (0.499, (0.2, 0.2, 0.2), 0.0), (0.501, (1.0, 0.5, 0.0), 0.9), (1.0, (1.0, 0.5, 0.0), 0.9)],
        xi,
    )


def scan_lerp(tf, x):
    """Linear-scan lookup of the bracketing nodes."""
    v = tf.values
    if x <= v[0]:
        return tf.colors[0], tf.alphas[0]
    if x >= v[-1]:
        return tf.colors[-1], tf.alphas[-1]
    for k in range(len(v) - 1):
        if v[k] <= x <= v[k + 1]:
            t = (x - v[k]) / (v[k + 1] - v[k])
            return (1 - t) * tf.colors[k] + t * tf.colors[k + 1], (1 - t) * tf.alphas[k] + t * tf.alphas[k + 1]


def test_transfer_validation():
    with pytest.raises(ValueError):
        TransferFunction.from_nodes([(0.0, (0, 0, 0), 0.1), (0.0, (1, 1, 1), 0.2)])
    with pytest.raises(ValueError):
        TransferFunction.from_nodes([(0.0, (0, 0, 2), 0.1)])
    with pytest.raises(ValueError):
        TransferFunction.from_nodes([(0.0, (0, 0, 0), 0.1)], xi=0.0)


def test_transfer_at_nodes_and_midpoints():
    tf = ramp_tf()
    c, a = sample_transfer(tf, tf.values)
    assert np.array_equal(c, tf.colors) and np.array_equal(a, tf.alphas)
    c, a = sample_transfer(tf, 0.25)
    assert np.allclose(c, [0.0, 0.5, 0.5]) and np.isclose(a, 0.2)


def test_transfer_clamps_outside():
    tf = ramp_tf()
    c, a = sample_transfer(tf, [-5.0, 7.0])
    assert np.array_equal(c, tf.colors[[0, -1]]) and np.array_equal(a, tf.alphas[[0, -1]])


def test_transfer_matches_scan_oracle():
    tf = ramp_tf()
    x = np.random.default_rng(0).uniform(-0.2, 1.2, 1000)
    c, a = sample_transfer(tf, x)
    for k in range(x.size):
        ce, ae = scan_lerp(tf, x[k])
        assert np.allclose(c[k], ce, atol=1e-15) and np.isclose(a[k], ae, atol=1e-15)


def test_opaque_hit():
    s = composite_step(CompositeState.empty(), [0.3, 0.6, 0.9], 1.0, 0.5, 0.5)
    assert np.allclose(s.color, [[0.3, 0.6, 0.9]]) and s.alpha[0] == 1.0
    assert s.terminated[0]


def test_zero_alpha_leaves_state():
    s = CompositeState(np.array([[0.1, 0.2, 0.3]]), np.array([0.4]))
    composite_step(s, [1.0, 1.0, 1.0], 0.0, 0.3, 1.0)
    assert np.array_equal(s.color, [[0.1, 0.2, 0.3]]) and s.alpha[0] == 0.4


def test_two_half_steps_equal_one_step():
    c, a, ds, xi = np.array([0.7, 0.2, 0.4]), 0.35, 0.8, 0.3
    one = composite_step(CompositeState.empty(), c, a, ds, xi)
    two = composite_step(composite_step(CompositeState.empty(), c, a, ds / 2, xi), c, a, ds / 2, xi)
    assert np.abs(one.color - two.color).max() <= 1e-12
    assert abs(one.alpha[0] - two.alpha[0]) <= 1e-12


def test_rejects_invalid_alpha():
    with pytest.raises(ValueError):
        composite_step(CompositeState.empty(), [0, 0, 0], 1.5, 0.1, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(1e-4, 2.0)), min_size=1, max_size=30))
def test_accumulation_bounded_and_monotone(steps):
    s = CompositeState.empty()
    prev = 0.0
    for v, a, ds in steps:
        composite_step(s, [v, 1.0, 1 - v], a, ds, 0.1)
        assert prev <= s.alpha[0] <= 1.0
        assert np.all(s.color <= 1.0 + 1e-12)
        prev = s.alpha[0]


def test_exponential_absorber_closed_form():
    # constant opacity, emission ramping from black to white along the ray
    L, xi, a = 1.0, 0.25, 0.3
    kappa = -np.log(1 - a) / xi
    tf = TransferFunction.from_nodes([(0.0, (0, 0, 0), a), (1.0, (1, 1, 1), a)], xi)
    n = 512
    s = CompositeState.empty()
    mid = (np.arange(n) + 0.5) / n
    for x in mid:
        c, al = sample_transfer(tf, x)
        composite_step(s, c, al, L / n, xi)
    exact_c = (1 - np.exp(-kappa * L) * (1 + kappa * L)) / (kappa * L)
    exact_a = 1 - np.exp(-kappa * L)
    assert abs(s.color[0, 0] - exact_c) <= 0.01 * exact_c
    assert abs(s.alpha[0] - exact_a) <= 0.01 * exact_a


def test_single_substep_is_midpoint():
    tf = ramp_tf(0.2)
    a = supersample_segment(tf, 0.1, 0.7, 0.3, CompositeState.empty(), substeps=1)
    c, al = sample_transfer(tf, 0.4)
    b = composite_step(CompositeState.empty(), c, al, 0.3, 0.2)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.alpha, b.alpha)


def test_linear_transfer_substep_count_irrelevant():
    # the gap grows with the opacity gathered over the step, so the step is thin
    tf = ramp_tf(0.2)
    a = supersample_segment(tf, 0.05, 0.45, 0.004, CompositeState.empty(), substeps=1)
    b = supersample_segment(tf, 0.05, 0.45, 0.004, CompositeState.empty(), substeps=64)
    assert np.abs(a.color - b.color).max() <= 1e-3 and abs(a.alpha[0] - b.alpha[0]) <= 1e-3


def step_errors():
    tf = step_tf()
    rho0, rho1, ds = 0.1, 0.8, 0.2
    truth = supersample_segment(tf, rho0, rho1, ds, CompositeState.empty(), substeps=10_000)
    ss = supersample_segment(tf, rho0, rho1, ds, CompositeState.empty())
    plain = supersample_segment(tf, rho0, rho1, ds, CompositeState.empty(), substeps=1)
    def err(s):
        return max(np.abs(s.color - truth.color).max(), abs(s.alpha[0] - truth.alpha[0]))
    return err(ss), err(plain)


def test_step_transfer_needs_supersampling():
    e_ss, e_plain = step_errors()
    assert e_ss <= 1e-2
    assert e_plain > 1e-2


def test_supersampling_batched_rows_independent():
    tf = ramp_tf(0.2)
    rho0, rho1 = np.array([0.1, 0.9, 0.3]), np.array([0.6, 0.2, 0.3])
    batch = supersample_segment(tf, rho0, rho1, 0.1, CompositeState.empty(3))
    for k in range(3):
        one = supersample_segment(tf, rho0[k], rho1[k], 0.1, CompositeState.empty())
        assert np.allclose(batch.color[k], one.color[0], atol=1e-15)


def rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_quality_closed_forms():
    assert np.isclose(field_param_quality(rotation(0)), 1 / np.sqrt(3), atol=1e-10)
    assert field_param_quality(np.diag([1.0, 1.0, 0.0])) == 0.0
    assert field_param_quality(np.zeros((3, 3))) == 0.0
    s = 2.5
    assert np.isclose(field_param_quality(s * np.eye(3)), s**2 / np.sqrt(3), atol=1e-10)


def test_quality_invariant_under_rotation():
    rng = np.random.default_rng(5)
    J = rng.normal(size=(20, 3, 3))
    for seed in range(5):
        Q = rotation(seed + 10)
        assert np.allclose(field_param_quality(J @ Q), field_param_quality(J), atol=1e-10)


def test_von_mises_zero_and_hydrostatic():
    Jp = np.array([[2.0, 0.1, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 1.5]])
    assert abs(field_von_mises(Jp, np.zeros((3, 3)))) <= 1e-10
    # u o phi^-1 = lam * x  means  J_u = lam * J_phi
    assert abs(field_von_mises(Jp, 0.3 * Jp)) <= 1e-10


def test_von_mises_simple_shear_formula():
    gamma = 0.2
    G = np.array([[0.0, gamma, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    Jp = np.array([[1.0, 0.2, 0.0], [0.0, 2.0, 0.0], [0.1, 0.0, 1.0]])
    sigma, bad = strain_tensor(Jp, G @ Jp)
    assert not bad
    assert np.isclose(sigma[0, 1], gamma / 2, atol=1e-10)
    # the squared-difference expression with a single off-diagonal term
    assert abs(field_von_mises(Jp, G @ Jp) - 0.75 * gamma**2) <= 1e-10


def test_von_mises_singular_is_nan():
    v = field_von_mises(np.diag([1.0, 0.0, 1.0]), np.eye(3))
    assert np.isnan(v)


def test_field_source_validation_and_evaluate():
    with pytest.raises(ValueError):
        FieldSource("rho")
    with pytest.raises(ValueError):
        FieldSource("temperature")
    q = FieldSource("quality")
    p = np.full((2, 3), 0.5)
    with pytest.raises(ValueError):
        q.evaluate(p)
    v, bad = q.evaluate(p, np.broadcast_to(np.eye(3), (2, 3, 3)))
    assert np.allclose(v, 1 / np.sqrt(3)) and not bad.any()
    rho = FieldSource("rho", unit_cube())
    v, _ = rho.evaluate(np.array([[0.2, 0.3, 0.4]]))
    assert np.allclose(v, 0.2)
