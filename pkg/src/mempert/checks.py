"""Invariant suite run by ``mempert verify``.

Each check pairs a library route with an independent one (closed form,
refit or finite differences) and reports the worst discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .data import DataConfig, Dataset, Task, synthesize
from .expfam import (
    BetaParams,
    Family,
    GaussianPosterior,
    NaturalParams,
    add_factors,
    bernoulli_likelihood_natural,
    from_natural,
    to_natural,
)
from .models import (
    CurvatureKind,
    ModelSpec,
    curvature,
    expected_grad_smoothed,
    init_params,
    jacobian,
    loss_and_grad,
    output,
    per_example_grads,
)
from .mpe import (
    PerturbationSpec,
    conjugate_natural_gradient,
    gaussian_natural_gradient,
    leave_out_view,
    linreg_loo_exact,
    mean_derivative,
    mpe_deviation_natural,
    parameter_deviation_estimate,
)
from .optim import Hyper, fit_map, init_trainer, step
from .oracle import exact_conjugate_refit, finite_difference_check
from .tolerances import TOL


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def to_json(self) -> dict:
        return {"value": self.value, "threshold": self.threshold, "passed": self.passed}


def _at_most(name, value, threshold) -> CheckResult:
    value = float(value)
    return CheckResult(name, value, float(threshold), bool(value <= threshold))


def beta_bernoulli_exactness(n_instances: int = 100, seed: int = 0) -> CheckResult:
    """MPE removal with rho = 1 at the exact posterior vs the closed-form refit."""
    rng = np.random.default_rng([seed, 11])
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 51))
        y = rng.integers(0, 2, n)
        prior = (float(rng.integers(1, 6)), float(rng.integers(1, 6)))
        lam = add_factors(to_natural(BetaParams(*prior)), [bernoulli_likelihood_natural(v) for v in y])
        for i in range(n):
            g = conjugate_natural_gradient(bernoulli_likelihood_natural(y[i]))
            moved = lam + mpe_deviation_natural(lam, [g], rho=1.0)
            exact = exact_conjugate_refit("beta_bernoulli", y, [i], prior)
            worst = max(worst, abs(moved.first - exact.first), abs(moved.second - exact.second))
    return _at_most("beta_bernoulli_exact", worst, TOL.roundtrip)


def ridge_three_way(n_problems: int = 50, seed: int = 0) -> CheckResult:
    """Refit, Sherman-Morrison and leave-out-precision MPE for one removal each."""
    rng = np.random.default_rng([seed, 12])
    worst = 0.0
    for k in range(n_problems):
        n = int(rng.integers(5, 101))
        d = int(rng.integers(1, 11))
        X = rng.standard_normal((n, d))
        y = X @ rng.standard_normal(d) + rng.standard_normal(n)
        data = Dataset(X, y, Task.REGRESSION, float(rng.uniform(0.1, 5.0)))
        model = ModelSpec.for_data("linear", data)
        i = int(rng.integers(n))
        theta = from_natural(exact_conjugate_refit("ridge", data)).mean
        refit = from_natural(exact_conjugate_refit("ridge", data, [i])).mean - theta
        sherman = linreg_loo_exact(data, i).dtheta
        view = leave_out_view(model, theta, data, [i], jitter=0.0)
        mpe = parameter_deviation_estimate(view, model, data, PerturbationSpec([i]), theta=theta)
        scale = max(np.abs(refit).max(), 1e-12)
        worst = max(worst, np.abs(refit - sherman).max() / scale, np.abs(refit - mpe).max() / scale)
    return _at_most("ridge_three_way", worst, TOL.exact_identity)


def _logistic_problem(seed: int):
    train, _ = synthesize(DataConfig(kind="blobs", n=60, dim=2, noise=1.5, n_test=1, bias=True, seed=seed))
    model = ModelSpec.for_data("logistic", train)
    theta, gn = fit_map(model, train, tol=1e-12)
    return model, train, theta, gn


def influence_equality(seed: int = 0, n_examples: int = 10) -> list[CheckResult]:
    """Delta-method MPE direction vs H^-1 grad l_i, and d f_i / d eps vs a weighted refit."""
    model, data, theta, gn = _logistic_problem(seed)
    H = curvature(model, theta, data, CurvatureKind.FULL_GGN).values
    q = GaussianPosterior(theta, H)
    lam = q.natural()
    worst_dir = 0.0
    worst_fd = 0.0
    h = 1e-4
    for i in range(n_examples):
        g_nat = gaussian_natural_gradient(q, model, data, i, eval_mode="mean")
        via_mpe = mean_derivative(lam, g_nat)
        direct = linalg.solve(H, per_example_grads(model, theta, data, [i])[0], assume_a="pos")
        worst_dir = max(worst_dir, np.abs(via_mpe - direct).max() / max(np.abs(direct).max(), 1e-12))

        def f_at(eps):
            w = np.ones(data.n)
            w[i] -= eps
            th, _ = fit_map(model, data, theta, tol=1e-13, weights=w)
            return output(model, th, data.X[i : i + 1])[0, 0]

        numeric = (f_at(h) - f_at(-h)) / (2 * h)
        j = jacobian(model, theta, data.X[i : i + 1])[0, 0]
        analytic = float(j @ direct)
        worst_fd = max(worst_fd, abs(analytic - numeric) / max(abs(analytic), 1e-12))
    return [
        _at_most("influence_train_grad", gn, TOL.logistic_train_grad),
        _at_most("influence_direction", worst_dir, TOL.influence_equality),
        _at_most("influence_eps_derivative", worst_fd, TOL.eps_derivative_rel),
    ]


def _fd_problems(seed: int):
    base = dict(n=12, dim=3, n_test=1, seed=seed)
    reg, _ = synthesize(DataConfig(kind="linear", **base))
    binary, _ = synthesize(DataConfig(kind="blobs", n_classes=2, **base))
    multi, _ = synthesize(DataConfig(kind="blobs", n_classes=3, **base))
    return [
        (ModelSpec.for_data("linear", reg), reg),
        (ModelSpec.for_data("logistic", binary), binary),
        (ModelSpec.for_data("softmax", multi), multi),
        (ModelSpec.for_data("mlp", multi, (5, 4)), multi),
        (ModelSpec.for_data("mlp", reg, (4,)), reg),
    ]


def finite_differences(seed: int = 0) -> CheckResult:
    """Gradient and Jacobian for every architecture, Hessian for the convex ones."""
    worst = 0.0
    for model, data in _fd_problems(seed):
        theta = init_params(model, seed, 0.5)
        _, g = loss_and_grad(model, theta, data)
        worst = max(worst, finite_difference_check(lambda t: loss_and_grad(model, t, data)[0], g, theta))
        J = jacobian(model, theta, data.X)
        worst = max(worst, finite_difference_check(lambda t: output(model, t, data.X), J, theta))
        if model.convex:
            Hm = curvature(model, theta, data, CurvatureKind.FULL_HESSIAN).values
            worst = max(worst, finite_difference_check(lambda t: loss_and_grad(model, t, data)[1], Hm, theta))
    return _at_most("finite_differences", worst, TOL.fd_rel)


def smoothed_abs_gradient(n_samples: int = 20_000, seed: int = 0) -> CheckResult:
    """Bonnet estimate of d/dm E|theta| vs 2 Phi(m / s) - 1, in standard errors.

    The standard error is the estimator's exact one, sqrt((1 - exact^2) / n):
    with |m| / s large every draw can share a sign and the sample spread is 0.
    """
    rng = np.random.default_rng([seed, 13])
    worst = 0.0
    for _ in range(5):
        m = rng.uniform(-1.5, 1.5, 3)
        s = rng.uniform(0.3, 2.0, 3)
        q = GaussianPosterior(m, 1.0 / s**2)
        est = expected_grad_smoothed(q, n_samples, int(rng.integers(1 << 30)), grad_fn=np.sign)
        exact = 2.0 * stats.norm.cdf(m / s) - 1.0
        se = np.sqrt((1.0 - exact**2) / n_samples)
        worst = max(worst, float(np.max(np.abs(est - exact) / se)))
    return _at_most("smoothed_abs_gradient_sigmas", worst, TOL.mc_sigmas)


def iblr_positivity(n_steps: int = 10_000, seed: int = 0) -> CheckResult:
    """Smallest h + delta / N seen over many single-sample iBLR steps on small MLPs.

    The reparameterised Hessian estimate is often negative, so this exercises
    the correction term rather than a positive-by-construction GGN.
    """
    rng = np.random.default_rng([seed, 14])
    smallest = np.inf
    runs = 20
    per_run = max(n_steps // runs, 1)
    for r in range(runs):
        data, _ = synthesize(DataConfig(kind="blobs", n=20, dim=2, n_classes=3, n_test=1, seed=seed * 1000 + r))
        model = ModelSpec.for_data("mlp", data, (6,))
        hyper = Hyper(
            lr=float(rng.uniform(0.01, 0.5)),
            beta1=float(rng.uniform(0.0, 0.95)),
            beta2=float(rng.uniform(0.5, 0.999)),
            h0=float(10 ** rng.uniform(-4, 0)),
            batch_size=int(rng.integers(1, 5)),
            mc_samples=1,
            seed=seed * 1000 + r,
        )
        st = init_trainer(model, data, "iblr", hyper)
        floor = data.delta / data.n
        for _ in range(per_run):
            batch = np.sort(rng.choice(data.n, hyper.batch_size, replace=False))
            st = step(st, model, data, batch)
            smallest = min(smallest, float((st.h + floor).min()))
    return CheckResult("iblr_min_precision", smallest, 0.0, bool(smallest > 0))


def run_all(n_beta=100, n_ridge=50, iblr_steps=10_000, mc_samples=20_000, seed=0) -> list[CheckResult]:
    return [
        beta_bernoulli_exactness(n_beta, seed),
        ridge_three_way(n_ridge, seed),
        *influence_equality(seed),
        finite_differences(seed),
        smoothed_abs_gradient(mc_samples, seed),
        iblr_positivity(iblr_steps, seed),
    ]
