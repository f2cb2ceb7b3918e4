import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mempert.data import DataConfig, Dataset, Task, synthesize
from mempert.errors import InvalidParameter, SingularCurvature
from mempert.models import ModelSpec, init_params, loss_and_grad
from mempert.optim import (
    Algorithm,
    Hyper,
    PreconditionerView,
    ViewShape,
    factorize,
    fit_map,
    init_trainer,
    minibatches,
    preconditioner_view,
    step,
    train,
)
from mempert.tolerances import TOL


@pytest.fixture
def ridge():
    data, _ = synthesize(DataConfig(kind="linear", n=50, dim=3, n_test=1, seed=0))
    X = data.X
    theta_star = np.linalg.solve(X.T @ X + data.delta * np.eye(3), X.T @ data.y)
    return ModelSpec.for_data("linear", data), data, theta_star


def test_iblr_initial_state(ridge):
    model, data, _ = ridge
    st_ = init_trainer(model, data, "iblr", Hyper(h0=0.1))
    np.testing.assert_array_equal(st_.h, 0.1)
    np.testing.assert_array_equal(st_.g, 0.0)


def test_on_starts_at_prior_precision(ridge):
    model, data, _ = ridge
    np.testing.assert_array_equal(init_trainer(model, data, "on").precond, np.eye(3))


def test_seeded_initial_point(ridge):
    model, data, _ = ridge
    a = init_trainer(model, data, "sgd", Hyper(seed=4)).theta
    b = init_trainer(model, data, "sgd", Hyper(seed=4)).theta
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "kw",
    [dict(lr=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(h0=0.0), dict(schedule="step"), dict(batch_size=0), dict(mc_samples=-1)],
)
def test_invalid_hyper(ridge, kw):
    model, data, _ = ridge
    with pytest.raises(InvalidParameter):
        init_trainer(model, data, "iblr", Hyper(**kw))


def test_newton_solves_quadratic_in_one_step():
    a = 2.5
    data = Dataset(np.array([[1.0]]), np.array([a]), Task.REGRESSION, 0.0)
    model = ModelSpec.for_data("linear", data)
    st_ = step(init_trainer(model, data, "newton", theta0=[-3.0]), model, data)
    assert st_.theta[0] == pytest.approx(a, abs=1e-14)


def test_iblr_fixed_point_at_zero_gradient():
    # tanh MLP at zero weights with zero targets: gradient vanishes, delta term vanishes at m = 0
    data = Dataset(np.ones((4, 2)), np.zeros(4), Task.REGRESSION, 1.0)
    model = ModelSpec.for_data("mlp", data, (3,))
    st_ = init_trainer(model, data, "iblr", Hyper(mc_samples=0), theta0=np.zeros(model.parameter_dim))
    for _ in range(5):
        st_ = step(st_, model, data)
    np.testing.assert_array_equal(st_.theta, 0.0)


def test_on_full_step_solves_ridge(ridge):
    model, data, theta_star = ridge
    st_ = init_trainer(model, data, "on", Hyper(lr=1.0))
    for _ in range(50):
        st_ = step(st_, model, data)
        if np.abs(st_.theta - theta_star).max() <= 1e-8:
            break
    assert np.abs(st_.theta - theta_star).max() <= 1e-8


def test_on_with_unit_rate_equals_newton():
    data, _ = synthesize(DataConfig(kind="blobs", n=80, noise=1.5, n_test=1, bias=True, seed=3))
    model = ModelSpec.for_data("logistic", data)
    on = init_trainer(model, data, "on", Hyper(lr=1.0, seed=1))
    nt = init_trainer(model, data, "newton", Hyper(seed=1))
    worst = 0.0
    for _ in range(8):
        on, nt = step(on, model, data), step(nt, model, data)
        worst = max(worst, float(np.abs(on.theta - nt.theta).max()))
    assert worst <= TOL.newton_on_agreement


SETTINGS = {
    "newton": (Hyper(), 5),
    "on": (Hyper(lr=1.0), 5),
    "on_diag": (Hyper(lr=0.3), 2000),
    "sgd": (None, 5000),
    "iblr": (Hyper(lr=0.05, mc_samples=0, beta1=0.0, beta2=0.9), 3000),
    "adaptive": (Hyper(lr=0.05, schedule="cosine"), 5000),
}


@pytest.mark.parametrize("name", list(SETTINGS))
def test_all_trainers_reach_ridge_solution(ridge, name):
    model, data, theta_star = ridge
    hyper, epochs = SETTINGS[name]
    if hyper is None:
        X = data.X
        hyper = Hyper(lr=1.0 / np.linalg.eigvalsh(X.T @ X + np.eye(3)).max())
    st_ = train(model, data, name, hyper, epochs=epochs)
    assert np.abs(st_.theta - theta_star).max() <= TOL.trainer_agreement


def test_bitwise_reproducible_trajectory():
    data, _ = synthesize(DataConfig(kind="blobs", n=60, n_classes=3, n_test=1, seed=2))
    model = ModelSpec.for_data("mlp", data, (6,))
    runs = []
    for _ in range(2):
        trace = []
        train(model, data, "iblr", Hyper(lr=0.05, batch_size=16, seed=11), epochs=3, callback=lambda s, e: trace.append(s.theta.tobytes() + s.h.tobytes()))
        runs.append(trace)
    assert runs[0] == runs[1]


def test_iblr_precision_stays_positive_on_random_steps():
    rng = np.random.default_rng(0)
    smallest = np.inf
    for r in range(10):
        data, _ = synthesize(DataConfig(kind="moons", n=16, n_test=1, seed=r))
        model = ModelSpec.for_data("mlp", data, (5,))
        hyper = Hyper(lr=float(rng.uniform(0.05, 0.5)), beta2=float(rng.uniform(0.5, 0.99)), h0=1e-3, batch_size=2, seed=r)
        st_ = init_trainer(model, data, "iblr", hyper)
        for _ in range(1000):
            st_ = step(st_, model, data, np.sort(rng.choice(16, 2, replace=False)))
            smallest = min(smallest, float((st_.h + data.delta / data.n).min()))
    assert smallest > 0


@settings(max_examples=200, deadline=None)
@given(
    h=st.floats(1e-6, 10.0),
    h_hat=st.floats(-1e4, 1e4),
    beta2=st.floats(0.0, 0.9999),
    floor=st.floats(1e-6, 1.0),
)
def test_precision_recursion_cannot_cross_zero(h, h_hat, beta2, floor):
    # one coordinate of the iBLR h-update; h + floor stays positive for any estimate
    new = beta2 * h + (1 - beta2) * h_hat + 0.5 * (1 - beta2) ** 2 * (h - h_hat) ** 2 / (h + floor)
    assert new + floor > 0


def test_views_follow_algorithm_measures():
    v = np.array([3.0, -1.0])
    assert PreconditionerView.identity().apply(v).tolist() == v.tolist()
    np.testing.assert_array_equal(PreconditionerView.diag(np.array([2.0, 4.0])).apply(np.array([2.0, 4.0])), [1.0, 1.0])
    ad = PreconditionerView.diag_sqrt(np.array([0.01]), 100)
    assert ad.apply(np.array([5.0]))[0] == pytest.approx(0.5)
    full = PreconditionerView.full(np.array([[2.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_allclose(full.apply(np.array([2.0, 4.0])), [1.0, 1.0])
    assert full.shape is ViewShape.FULL_INVERSE


def test_trainer_views(ridge):
    model, data, _ = ridge
    for name, shape in [("sgd", ViewShape.IDENTITY), ("newton", ViewShape.FULL_INVERSE), ("on", ViewShape.FULL_INVERSE), ("on_diag", ViewShape.DIAG_INVERSE), ("iblr", ViewShape.DIAG_INVERSE), ("adaptive", ViewShape.DIAG_INVERSE_SQRT)]:
        st_ = train(model, data, name, Hyper(lr=0.01), epochs=2)
        view = preconditioner_view(st_, data.delta)
        assert view.shape is shape
    st_ = init_trainer(model, data, "iblr", Hyper(h0=0.1))
    view = preconditioner_view(st_, data.delta)
    np.testing.assert_allclose(view.apply(np.ones(3)), 1.0 / (data.n * 0.1 + data.delta))
    with pytest.raises(InvalidParameter):
        preconditioner_view(st_)


def test_singular_curvature():
    with pytest.raises(SingularCurvature):
        factorize(np.array([[1.0, 0.0], [0.0, -1.0]]))
    factorize(np.zeros((2, 2)), jitter=1e-8)


def test_minibatches_cover_each_epoch_once():
    seen = np.concatenate(list(minibatches(23, 5, seed=3, epoch=1)))
    assert sorted(seen.tolist()) == list(range(23))
    a = [b.tolist() for b in minibatches(23, 5, 3, 1)]
    b = [b.tolist() for b in minibatches(23, 5, 3, 2)]
    assert a != b


def test_cosine_schedule():
    h = Hyper(lr=1.0, lr_min=0.1, schedule="cosine", total_steps=10)
    assert h.rate(0) == 1.0 and h.rate(10) == pytest.approx(0.1) and h.rate(5) == pytest.approx(0.55)


def test_fit_map_reaches_tolerance():
    data, _ = synthesize(DataConfig(kind="blobs", n=100, n_test=1, bias=True, seed=1))
    model = ModelSpec.for_data("logistic", data)
    theta, gn = fit_map(model, data, init_params(model, 0))
    assert gn < 1e-10
    _, g = loss_and_grad(model, theta, data)
    assert np.linalg.norm(g) == pytest.approx(gn)
