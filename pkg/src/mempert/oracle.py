"""Ground truth for validating the estimators: retraining, conjugate refits,
finite differences and correlation metrics."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, Task
from .errors import ConvergenceFailure, CorrelationUndefined, DegeneratePosterior, InvalidParameter
from .expfam import BetaParams, Family, NaturalParams, to_natural
from .models import ModelSpec, link, loss_and_grad, output
from .mpe import PerturbationSpec, group_output_deviation, parameter_deviation_estimate
from .optim import Hyper, PreconditionerView, fit_map, train
from .tolerances import TOL


@dataclass
class RetrainConfig:
    """Budget for ground-truth retraining.

    Convex models use damped Newton to ``tol``; the MLP runs warm-started
    Adam with a cosine schedule for ``epochs``.
    """

    tol: float = TOL.retrain_grad
    max_iter: int = 100
    epochs: int = 200
    lr: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int | None = None
    seed: int = 0


@dataclass
class RetrainResult:
    theta: np.ndarray
    grad_norm: float
    converged: bool


def retrain_without(
    model: ModelSpec,
    data: Dataset,
    removed: Iterable[int],
    warm_start,
    config: RetrainConfig | None = None,
) -> RetrainResult:
    config = config or RetrainConfig()
    removed = list(removed)
    if removed and (min(removed) < 0 or max(removed) >= data.n):
        raise InvalidParameter("removal index out of range")
    rest = data.without(removed)
    if model.convex:
        theta, gn = fit_map(model, rest, warm_start, config.tol, config.max_iter)
        return RetrainResult(theta, gn, True)
    hyper = Hyper(
        lr=config.lr, lr_min=config.lr_min, schedule="cosine", batch_size=config.batch_size, seed=config.seed
    )
    st = train(model, rest, "adaptive", hyper, epochs=config.epochs, theta0=warm_start)
    _, g = loss_and_grad(model, st.theta, rest)
    gn = float(np.linalg.norm(g))
    return RetrainResult(st.theta, gn, gn < config.tol)


def exact_conjugate_refit(kind: str, data, removed: Iterable[int] = (), prior=(1.0, 1.0)) -> NaturalParams:
    """Closed-form posterior without ``removed``.

    ``beta_bernoulli``: ``data`` is a 0/1 label vector, ``prior`` = (alpha0, beta0).
    ``ridge``: ``data`` is a regression Dataset; the prior is N(0, I / delta).
    """
    removed = set(int(i) for i in removed)
    if kind == "beta_bernoulli":
        y = np.asarray(data, dtype=int)
        keep = np.array([j for j in range(y.size) if j not in removed], dtype=int)
        k = int(y[keep].sum())
        return to_natural(BetaParams(prior[0] + k, prior[1] + keep.size - k))
    if kind == "ridge":
        rest = data.without(sorted(removed))
        if rest.n == 0 and data.delta == 0:
            raise DegeneratePosterior("no data and no prior precision")
        H = rest.X.T @ rest.X + data.delta * np.eye(data.dim)
        return NaturalParams(Family.GAUSSIAN_FULL, rest.X.T @ rest.y, -0.5 * H).check()
    raise InvalidParameter(f"unknown conjugate model {kind!r}")


def finite_difference_check(
    fn: Callable[[np.ndarray], np.ndarray],
    analytic: np.ndarray,
    point,
    step: float = TOL.fd_step,
    directions: np.ndarray | None = None,
) -> float:
    """Worst relative error between ``analytic`` and central differences of ``fn``.

    ``analytic`` has shape (*out, P) (a gradient is (P,), a Jacobian (K, P)).
    With ``directions`` (D x P) only directional derivatives are compared and
    ``analytic`` must already be projected to shape (*out, D). The error is
    max|a - n| / max(max|a|, max|n|, 1e-12).
    """
    point = np.asarray(point, dtype=float)
    basis = np.eye(point.size) if directions is None else np.atleast_2d(directions)
    cols = [(np.asarray(fn(point + step * d)) - np.asarray(fn(point - step * d))) / (2 * step) for d in basis]
    num = np.stack(cols, axis=-1)
    ana = np.asarray(analytic, dtype=float).reshape(num.shape)
    scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
    return float(np.abs(ana - num).max() / scale)


def rank_correlation(xs: Sequence[float], ys: Sequence[float], kind: str = "spearman") -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidParameter("need two equal-length 1-D sequences")
    if xs.size < 3:
        raise InvalidParameter("need at least 3 points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise CorrelationUndefined("correlation of a constant sequence")
    if kind == "spearman":
        return float(stats.spearmanr(xs, ys).statistic)
    if kind == "pearson":
        return float(stats.pearsonr(xs, ys).statistic)
    raise InvalidParameter(f"unknown correlation kind {kind!r}")


@dataclass
class DeviationComparison:
    id: str
    true_deviation: np.ndarray
    estimated_deviation: np.ndarray
    true_param_delta_norm: float
    estimate_param_delta_norm: float

    CSV_HEADER = ("id", "true_score", "est_score", "true_norm", "est_norm")

    @property
    def true_score(self) -> float:
        return float(np.abs(self.true_deviation).sum())

    @property
    def est_score(self) -> float:
        return float(np.abs(self.estimated_deviation).sum())

    def csv_row(self) -> list[str]:
        return [
            self.id,
            repr(self.true_score),
            repr(self.est_score),
            repr(float(self.true_param_delta_norm)),
            repr(float(self.estimate_param_delta_norm)),
        ]


def true_prediction_deviation(model: ModelSpec, theta_star, theta_removed, data: Dataset, rows) -> np.ndarray:
    X = data.X[np.atleast_1d(rows)]
    return link(model, output(model, theta_removed, X)) - link(model, output(model, theta_star, X))


def compare_removals(
    model: ModelSpec,
    data: Dataset,
    theta_star,
    view: PreconditionerView,
    groups: Sequence[Sequence[int]],
    mode: str = "diag",
    config: RetrainConfig | None = None,
    cap: int = 512,
) -> list[DeviationComparison]:
    """Estimate vs warm-started retraining for each removal group, in order."""
    out = []
    for g in groups:
        g = [int(i) for i in g]
        res = retrain_without(model, data, g, theta_star, config)
        truth = true_prediction_deviation(model, theta_star, res.theta, data, g)
        est = group_output_deviation(model, theta_star, view, data, g, mode=mode, cap=cap)
        dtheta = parameter_deviation_estimate(view, model, data, PerturbationSpec(g), theta=theta_star)
        out.append(
            DeviationComparison(
                "-".join(map(str, g)),
                truth,
                est,
                float(np.linalg.norm(res.theta - theta_star)),
                float(np.linalg.norm(dtheta)),
            )
        )
    return out
