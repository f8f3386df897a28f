import numpy as np
import pytest

from scdmd_lab.schedule import make_grid
from scdmd_lab.teacher import RECTIFIED, GaussianMixture, TeacherField, oracle_flow_map, two_mode_gmm
from scdmd_lab.transport import (
    IntervalDefect,
    RolloutTrace,
    cm_step,
    endpoints,
    euler_step,
    local_semigroup_defect,
    path_average_defect,
    path_defects,
    predicted_noise,
    sample_k_steps,
    semigroup_defects,
)


def zero_field(x, t, c=None):
    return np.zeros_like(x)


def const_field(value):
    value = np.asarray(value, dtype=np.float64)
    return lambda x, t, c=None: np.broadcast_to(value, np.shape(x)).copy()


def time_field(x, t, c=None):
    return np.broadcast_to(np.array([np.sin(3 * t), t**2]), np.shape(x)).copy()


def nonlinear_field(x, t, c=None):
    return np.tanh(x) * (1 + t) + np.array([0.3, -0.1])


def test_euler_examples():
    x = np.array([1.0, 1.0])
    np.testing.assert_array_equal(euler_step(zero_field, x, 0.9, 0.2), x)
    np.testing.assert_array_equal(euler_step(const_field([2.0, 0.0]), x, 1.0, 0.5), [0.0, 1.0])
    for bad in ((0.5, 0.5), (0.4, 0.6), (0.5, -0.1)):
        with pytest.raises(ValueError):
            euler_step(zero_field, x, *bad)


def test_zero_field_identity_everywhere():
    x = np.random.default_rng(0).normal(size=(5, 3))
    for t_from, t_to in ((1.0, 0.0), (0.3, 0.29), (0.8, 0.1)):
        np.testing.assert_array_equal(euler_step(zero_field, x, t_from, t_to), x)


def test_euler_error_is_first_order():
    gmm = GaussianMixture(np.array([1.0]), np.array([[1.0, -0.5]]), np.array([0.09]))
    teacher = TeacherField(gmm, RECTIFIED)
    x = np.random.default_rng(1).normal(size=(32, 2))
    errs = []
    for h in (0.2, 0.1, 0.05, 0.025):
        one = euler_step(teacher, x, 0.9, 0.9 - h)
        ref = oracle_flow_map(gmm, RECTIFIED, x, 0.9, 0.9 - h, substeps=4096)
        errs.append(np.abs(one - ref).max())
    # local error of one step is O(h^2), so halving h divides it by about four
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert (ratios > 3.0).all() and (ratios < 5.0).all()
    assert errs[-1] / 0.025 < errs[0] / 0.2


def test_single_step_readout():
    v = nonlinear_field
    noise = np.random.default_rng(2).normal(size=(4, 2))
    trace = sample_k_steps(v, make_grid(1), noise)
    assert trace.timesteps == [1.0, 0.0]
    np.testing.assert_array_equal(trace.final, noise - 1.0 * v(noise, 1.0))


def test_teacher_sampler_mean():
    gmm = GaussianMixture(np.array([1.0]), np.array([[3.0, 0.0]]), np.array([0.04]))
    noise = np.random.default_rng(3).standard_normal((4096, 2))
    out = sample_k_steps(TeacherField(gmm, RECTIFIED), make_grid(64, 1.0), noise).final
    assert np.linalg.norm(out.mean(axis=0) - [3.0, 0.0]) < 0.1


def test_trace_is_fold_of_euler_steps():
    grid = make_grid(4)
    noise = np.random.default_rng(4).normal(size=(6, 2))
    trace = sample_k_steps(nonlinear_field, grid, noise)
    assert len(trace.states) == grid.K + 1
    assert trace.states[0] is not noise and np.array_equal(trace.states[0], noise)
    x = noise
    pts = grid.with_terminal()
    for k, (a, b) in enumerate(zip(pts, pts[1:])):
        x = euler_step(nonlinear_field, x, a, b)
        np.testing.assert_allclose(trace.states[k + 1], x, atol=1e-14)


def test_cm_with_predicted_noise_is_euler():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 2))
    for t_from, t_to in ((1.0, 0.97), (0.9, 0.5), (0.3, 0.05)):
        eps = predicted_noise(nonlinear_field, x, t_from)
        np.testing.assert_allclose(
            cm_step(nonlinear_field, x, t_from, t_to, eps), euler_step(nonlinear_field, x, t_from, t_to), atol=1e-13
        )


def test_cm_with_zero_noise_scales_clean_prediction():
    # re-noising with eps = 0 lands on alpha(t_to) x0_hat, which differs from Euler
    x = np.array([[0.5, -1.0]])
    x0_hat = x - 0.9 * nonlinear_field(x, 0.9)
    out = cm_step(nonlinear_field, x, 0.9, 0.5, np.zeros_like(x))
    np.testing.assert_allclose(out, 0.5 * x0_hat)
    assert not np.allclose(out, euler_step(nonlinear_field, x, 0.9, 0.5))


def test_cm_sampler_needs_rng_and_ends_at_readout():
    grid = make_grid(4)
    noise = np.random.default_rng(6).normal(size=(3, 2))
    with pytest.raises(ValueError):
        sample_k_steps(nonlinear_field, grid, noise, solver="cm")
    with pytest.raises(ValueError):
        sample_k_steps(nonlinear_field, grid, noise, solver="heun")
    trace = sample_k_steps(nonlinear_field, grid, noise, solver="cm", rng=np.random.default_rng(0))
    last = trace.states[-2]
    np.testing.assert_allclose(trace.final, last - grid.points[-1] * nonlinear_field(last, grid.points[-1]))


def test_rollout_trace_lengths():
    with pytest.raises(ValueError):
        RolloutTrace([1.0, 0.0], [np.zeros(2)])


def test_constant_field_defect_is_zero():
    v = const_field([1.0, -2.0])
    # dyadic times and integer states keep every operation exact
    x = np.random.default_rng(7).integers(-5, 5, size=(16, 2)).astype(float)
    assert local_semigroup_defect(v, x, 0.75, 0.5, 0.25) == 0.0
    x = np.random.default_rng(7).normal(size=(16, 2))
    assert local_semigroup_defect(v, x, 0.9, 0.5, 0.2) < 1e-28


def test_time_only_field_numerator():
    x = np.random.default_rng(8).normal(size=(16, 2))
    t_s, t_m, t_e = 0.9, 0.6, 0.2
    x1, x2 = endpoints(time_field, x, t_s, t_m, t_e)
    num = ((x1 - x2) ** 2).sum(axis=1)
    expect = (t_m - t_e) ** 2 * ((time_field(x, t_s) - time_field(x, t_m)) ** 2).sum(axis=1)
    np.testing.assert_allclose(num, expect, rtol=1e-12)
    den = (t_s - t_e) ** 2 * (time_field(x, t_s) ** 2).sum(axis=1) + 1e-8
    np.testing.assert_allclose(semigroup_defects(time_field, x, t_s, t_m, t_e), expect / den, rtol=1e-12)


def test_defect_non_negative_and_ordering():
    x = np.random.default_rng(9).normal(size=(64, 2))
    d = semigroup_defects(nonlinear_field, x, 0.9, 0.5, 0.1)
    assert (d >= 0).all() and d.mean() > 0
    with pytest.raises(ValueError):
        local_semigroup_defect(nonlinear_field, x, 0.5, 0.6, 0.1)
    with pytest.raises(ValueError):
        local_semigroup_defect(nonlinear_field, np.zeros((0, 2)), 0.9, 0.5, 0.1)


def test_teacher_defect_shrinks_with_interval():
    teacher = TeacherField(two_mode_gmm(), RECTIFIED)
    x = np.random.default_rng(10).normal(size=(256, 2))
    defects = [local_semigroup_defect(teacher, x, 0.9, 0.9 - h / 2, 0.9 - h) for h in (0.4, 0.2, 0.1, 0.05)]
    assert all(a > b for a, b in zip(defects, defects[1:]))
    # numerator is O(h^4) and denominator O(h^2): each halving should divide by about four
    ratios = np.array(defects[:-1]) / np.array(defects[1:])
    assert (ratios[1:] > 2.5).all()


def test_path_defects_rows():
    grid_infer, grid_train = make_grid(4), make_grid(8, kind="training")
    noise = np.random.default_rng(11).normal(size=(32, 2))
    rows = path_defects(nonlinear_field, grid_infer, grid_train, noise)
    # each of the 4 intervals, readout included, holds exactly one training point
    assert [r.interval for r in rows] == list(zip(grid_infer.with_terminal(), grid_infer.with_terminal()[1:]))
    assert all(isinstance(r, IntervalDefect) and r.n == 32 for r in rows)
    row = rows[0].to_row()
    assert set(row) == {"interval", "t_m", "defect_mean", "defect_stderr", "n"}
    avg = path_average_defect(rows)
    assert avg == pytest.approx(np.mean([r.defect_mean for r in rows]))
    assert np.isnan(path_average_defect([]))
