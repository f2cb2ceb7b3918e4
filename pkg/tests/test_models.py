import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mempert.data import DataConfig, Dataset, Task, synthesize
from mempert.errors import InvalidParameter, NumericalFailure, UnsupportedCurvature, UnsupportedFamily
from mempert.expfam import BetaParams, GaussianPosterior
from mempert.models import (
    CurvatureKind,
    ModelSpec,
    curvature,
    example_grad_fn,
    expected_grad_smoothed,
    init_params,
    jacobian,
    link_derivative,
    loss_and_grad,
    output,
    output_and_jacobian,
    per_example_grads,
    residual,
)
from mempert.oracle import finite_difference_check
from mempert.tolerances import TOL


def _mlp_problem(seed=0):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.standard_normal((5, 2)), rng.standard_normal(5), Task.REGRESSION, 0.5)
    return ModelSpec.for_data("mlp", data, (4,)), data


def test_ridge_gradient_vanishes_at_solution(two_point):
    model = ModelSpec.for_data("linear", two_point)
    _, g = loss_and_grad(model, np.array([5 / 6]), two_point)
    assert abs(g[0]) <= 1e-8


def test_softmax_zero_logits_residual():
    data = Dataset(np.array([[1.0, -1.0]]), np.array([0]), Task.MULTICLASS, 1.0, 2)
    model = ModelSpec.for_data("softmax", data)
    theta = np.zeros(model.parameter_dim)
    np.testing.assert_allclose(residual(model, theta, data)[0], [-0.5, 0.5])
    # gradient is J^T e
    J = jacobian(model, theta, data.X)[0]
    np.testing.assert_allclose(per_example_grads(model, theta, data)[0], J.T @ [-0.5, 0.5], atol=1e-15)


def test_logistic_residual_at_zero():
    data = Dataset(np.array([[2.0]]), np.array([1]), Task.BINARY)
    model = ModelSpec.for_data("logistic", data)
    assert residual(model, np.zeros(1), data)[0, 0] == -0.5
    assert link_derivative(model, np.zeros((1, 1)))[0, 0] == 0.25


def test_two_point_residual(two_point):
    model = ModelSpec.for_data("linear", two_point)
    assert residual(model, np.array([5 / 6]), two_point)[0, 0] == pytest.approx(-1 / 6, abs=1e-15)
    assert residual(model, np.array([1.0]), two_point)[0, 0] == 0.0


def test_mlp_gradient_finite_differences():
    model, data = _mlp_problem()
    theta = init_params(model, 1, 0.5)
    _, g = loss_and_grad(model, theta, data)
    err = finite_difference_check(lambda t: loss_and_grad(model, t, data)[0], g, theta)
    assert err <= TOL.fd_mlp_rel


def test_mlp_jacobian_finite_differences():
    model, data = _mlp_problem(2)
    theta = init_params(model, 3, 0.5)
    for i in range(data.n):
        f, J = output_and_jacobian(model, theta, data, i)
        err = finite_difference_check(lambda t: output(model, t, data.X[i : i + 1])[0], J.T, theta)
        assert err <= TOL.fd_mlp_rel


def test_linear_jacobian_is_input():
    data = Dataset(np.array([[1.0, -2.0, 0.5]]), np.array([0.0]), Task.REGRESSION)
    model = ModelSpec.for_data("linear", data)
    f, J = output_and_jacobian(model, np.array([1.0, 1.0, 1.0]), data, 0)
    np.testing.assert_array_equal(J[:, 0], data.X[0])
    assert f[0] == pytest.approx(-0.5)


def test_zero_parameters_give_zero_output():
    model, data = _mlp_problem()
    np.testing.assert_array_equal(output(model, np.zeros(model.parameter_dim), data.X), 0.0)


def test_two_point_hessian(two_point):
    model = ModelSpec.for_data("linear", two_point)
    H = curvature(model, np.zeros(1), two_point, CurvatureKind.FULL_HESSIAN).values
    assert H[0, 0] == pytest.approx(6.0)


def test_regulariser_only_curvature(two_point):
    model = ModelSpec.for_data("linear", two_point)
    H = curvature(model, np.zeros(1), two_point, CurvatureKind.FULL_HESSIAN, subset=[]).values
    np.testing.assert_array_equal(H, [[two_point.delta]])


def test_softmax_hessian_finite_differences():
    train, _ = synthesize(DataConfig(kind="blobs", n=15, dim=3, n_classes=3, n_test=1, seed=5))
    model = ModelSpec.for_data("softmax", train)
    theta = init_params(model, 0, 0.7)
    H = curvature(model, theta, train, CurvatureKind.FULL_HESSIAN).values
    err = finite_difference_check(lambda t: loss_and_grad(model, t, train)[1], H, theta)
    assert err <= TOL.fd_rel


def test_mlp_has_no_exact_hessian():
    model, data = _mlp_problem()
    with pytest.raises(UnsupportedCurvature):
        curvature(model, np.zeros(model.parameter_dim), data, CurvatureKind.FULL_HESSIAN)


def test_diag_ggn_is_diagonal_of_full():
    train, _ = synthesize(DataConfig(kind="blobs", n=20, dim=2, n_classes=3, n_test=1))
    model = ModelSpec.for_data("mlp", train, (5,))
    theta = init_params(model, 0, 0.5)
    full = curvature(model, theta, train, CurvatureKind.FULL_GGN).values
    diag = curvature(model, theta, train, CurvatureKind.DIAG_GGN).values
    np.testing.assert_allclose(np.diag(full), diag, rtol=1e-12)
    scaled = curvature(model, theta, train, CurvatureKind.SCALED_IDENTITY).values
    assert scaled == pytest.approx(diag.mean())


ARCHS = [("linear", "linear", 1), ("logistic", "blobs", 2), ("softmax", "blobs", 3), ("mlp", "blobs", 3), ("mlp", "linear", 1)]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, len(ARCHS) - 1))
def test_derivatives_match_finite_differences(seed, which):
    arch, kind, c = ARCHS[which]
    data, _ = synthesize(DataConfig(kind=kind, n=8, dim=3, n_classes=max(c, 2), n_test=1, seed=seed))
    model = ModelSpec.for_data(arch, data, (4, 3))
    theta = init_params(model, seed, 0.5)
    _, g = loss_and_grad(model, theta, data)
    assert finite_difference_check(lambda t: loss_and_grad(model, t, data)[0], g, theta) <= TOL.fd_rel
    J = jacobian(model, theta, data.X)
    assert finite_difference_check(lambda t: output(model, t, data.X), J, theta) <= TOL.fd_rel
    if model.convex:
        H = curvature(model, theta, data, CurvatureKind.FULL_HESSIAN).values
        assert finite_difference_check(lambda t: loss_and_grad(model, t, data)[1], H, theta) <= TOL.fd_rel
    # curvature plus delta is positive definite
    Hg = curvature(model, theta, data, CurvatureKind.FULL_GGN).values
    np.linalg.cholesky(Hg)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_is_jacobian_times_residual(seed):
    data, _ = synthesize(DataConfig(kind="blobs", n=6, dim=2, n_classes=3, n_test=1, seed=seed))
    model = ModelSpec.for_data("mlp", data, (4,))
    theta = init_params(model, seed, 0.5)
    G = per_example_grads(model, theta, data)
    J = jacobian(model, theta, data.X)
    e = residual(model, theta, data)
    np.testing.assert_allclose(G, np.einsum("nkp,nk->np", J, e), atol=1e-12)


def test_weighted_loss_and_regulariser_toggle(rng):
    data = Dataset(rng.standard_normal((4, 2)), rng.standard_normal(4), Task.REGRESSION, 2.0)
    model = ModelSpec.for_data("linear", data)
    theta = rng.standard_normal(2)
    full, g_full = loss_and_grad(model, theta, data)
    bare, g_bare = loss_and_grad(model, theta, data, include_reg=False)
    assert full - bare == pytest.approx(theta @ theta)
    np.testing.assert_allclose(g_full - g_bare, 2.0 * theta)
    w, gw = loss_and_grad(model, theta, data, weights=[1, 1, 1, 0], include_reg=False)
    s, gs = loss_and_grad(model, theta, data, subset=[0, 1, 2], include_reg=False)
    assert w == pytest.approx(s)
    np.testing.assert_allclose(gw, gs)


def test_non_finite_output_raises():
    data = Dataset(np.array([[1e308, 1e308]]), np.array([0.0]), Task.REGRESSION)
    model = ModelSpec.for_data("linear", data)
    with pytest.raises(NumericalFailure):
        loss_and_grad(model, np.array([1e10, 1e10]), data)


def test_model_task_mismatch():
    data = Dataset(np.zeros((2, 1)), np.zeros(2), Task.REGRESSION)
    with pytest.raises(InvalidParameter):
        ModelSpec.for_data("logistic", data)
    with pytest.raises(InvalidParameter):
        output(ModelSpec.for_data("linear", data), np.zeros(3), data.X)


def test_parameter_count_and_init():
    model = ModelSpec(arch="mlp", input_dim=3, task="multiclass", n_classes=4, hidden=(5, 2))
    assert model.parameter_dim == 3 * 5 + 5 + 5 * 2 + 2 + 2 * 4 + 4
    a, b = init_params(model, 7), init_params(model, 7)
    np.testing.assert_array_equal(a, b)
    assert a.std() == pytest.approx(0.1, rel=0.3)


def test_smoothed_abs_gradient_matches_closed_form():
    m, s = 0.4, 1.3
    q = GaussianPosterior(np.array([m]), np.array([1 / s**2]))
    est, se = expected_grad_smoothed(q, 20_000, seed=5, grad_fn=np.sign, return_stderr=True)
    exact = 2 * stats.norm.cdf(m / s) - 1
    assert abs(est[0] - exact) <= TOL.mc_sigmas * se[0]


def test_score_form_matches_closed_form():
    m, s = -0.7, 0.8
    q = GaussianPosterior(np.array([m]), np.array([1 / s**2]))
    est, se = expected_grad_smoothed(q, 50_000, seed=6, loss_fn=lambda t: float(np.abs(t).sum()), return_stderr=True)
    exact = 2 * stats.norm.cdf(m / s) - 1
    assert abs(est[0] - exact) <= TOL.mc_sigmas * se[0]


def test_symmetric_abs_gradient_vanishes():
    q = GaussianPosterior(np.zeros(1), np.ones(1))
    est = [abs(expected_grad_smoothed(q, n, seed=1, grad_fn=np.sign)[0]) for n in (100, 10_000, 400_000)]
    assert est[-1] < 0.01 and est[-1] < est[0] + 1e-12


def test_single_sample_at_mean_is_plain_gradient(rng):
    data, _ = synthesize(DataConfig(kind="blobs", n=10, n_test=1))
    model = ModelSpec.for_data("logistic", data)
    theta = rng.standard_normal(model.parameter_dim)
    q = GaussianPosterior(theta, np.ones(model.parameter_dim))
    fn = example_grad_fn(model, data, 3)
    est = expected_grad_smoothed(q, 1, grad_fn=fn, noise=np.zeros((1, model.parameter_dim)))
    np.testing.assert_array_equal(est, fn(theta))


def test_smoothed_gradient_is_seeded_and_gaussian_only():
    q = GaussianPosterior(np.array([0.3, -0.1]), np.array([[2.0, 0.2], [0.2, 1.0]]))
    a = expected_grad_smoothed(q, 100, seed=3, grad_fn=np.sign)
    b = expected_grad_smoothed(q, 100, seed=3, grad_fn=np.sign)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(UnsupportedFamily):
        expected_grad_smoothed(BetaParams(1.0, 1.0), 10, grad_fn=np.sign)
