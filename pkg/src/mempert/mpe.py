"""Memory-perturbation estimators.

Removing (or reweighting) examples shifts the posterior's natural parameter
by rho * sum_j eps_j * g_j, where g_j is the natural gradient of example j's
loss. For Gaussian posteriors this turns into a preconditioned gradient step
in parameter space, and, after linearising the model, into the bi-linear
``variance x error`` deviations of outputs and predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .data import Dataset, Task
from .errors import InvalidParameter, LeverageDegenerate, NumericalFailure, ResourceLimit, UnsupportedFamily
from .expfam import Family, GaussianPosterior, NaturalParams, from_natural
from .models import (
    CurvatureKind,
    ModelSpec,
    curvature,
    jacobian,
    link,
    link_derivative,
    one_hot,
    output,
    per_example_grads,
)
from .optim import PreconditionerView, TrainerState, preconditioner_view


@dataclass
class SensitivityRecord:
    example_id: int
    e: np.ndarray
    v: np.ndarray
    deviation: np.ndarray
    score: float
    direction: np.ndarray | None = None

    @property
    def output_deviation(self) -> np.ndarray:
        """Deviation of the raw output f_i (no link derivative): v * e."""
        return self.v * self.e

    CSV_HEADER = ("example_id", "score", "v", "e", "deviation")

    def csv_row(self) -> list[str]:
        join = lambda a: ";".join(repr(float(x)) for x in np.atleast_1d(a))
        return [str(self.example_id), repr(float(self.score)), join(self.v), join(self.e), join(self.deviation)]


@dataclass
class PerturbationSpec:
    """Examples to perturb, with weights (1 = remove, 2 = remove twice, ...)."""

    indices: Sequence[int]
    epsilons: Sequence[float] | None = None

    def __post_init__(self):
        self.indices = np.asarray(list(self.indices), dtype=int)
        eps = np.ones(self.indices.size) if self.epsilons is None else np.asarray(self.epsilons, dtype=float)
        if eps.shape != self.indices.shape or not np.all(np.isfinite(eps)):
            raise InvalidParameter("need one finite epsilon per index")
        self.epsilons = eps

    def check(self, n: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise InvalidParameter("perturbation index out of range")


# --------------------------------------------------------- natural gradients


def gaussian_natural_gradient(
    q: GaussianPosterior,
    model: ModelSpec,
    data: Dataset,
    i: int,
    eval_mode: str = "mean",
    seed: int = 0,
    n_samples: int = 1,
) -> NaturalParams:
    """Natural gradient (g - H m, H / 2) of example i's loss under q.

    ``eval_mode`` is ``mean`` (delta method), ``sample`` (one draw) or ``mc``
    (average of ``n_samples`` draws). The Hessian takes q's precision shape.
    """
    if not isinstance(q, GaussianPosterior):
        raise UnsupportedFamily("natural gradients here are for Gaussian q only")
    m = np.asarray(q.mean, dtype=float)
    if eval_mode == "mean":
        points = m[None, :]
    elif eval_mode in ("sample", "mc"):
        k = 1 if eval_mode == "sample" else n_samples
        points = q.sample(np.random.default_rng(seed), k)
    else:
        raise InvalidParameter(f"unknown eval_mode {eval_mode!r}")
    diag = q.kind != "full"
    kind = CurvatureKind.DIAG_GGN if diag else CurvatureKind.FULL_GGN
    g_hat = np.mean([per_example_grads(model, th, data, [i])[0] for th in points], axis=0)
    H_hat = np.mean(
        [curvature(model, th, data, kind, subset=[i], include_reg=False).values for th in points], axis=0
    )
    if diag:
        return NaturalParams(Family.GAUSSIAN_DIAG, g_hat - H_hat * m, 0.5 * H_hat)
    return NaturalParams(Family.GAUSSIAN_FULL, g_hat - H_hat @ m, 0.5 * H_hat)


def conjugate_natural_gradient(factor: NaturalParams) -> NaturalParams:
    """For l_j = -log p_j with p_j conjugate, the natural gradient is -lambda_j."""
    return -factor


def mpe_deviation_natural(
    lam: NaturalParams,
    contributions: Iterable[NaturalParams],
    epsilons: Iterable[float] | None = None,
    rho: float = 1.0,
) -> NaturalParams:
    """rho * sum_j eps_j g_j, shaped like ``lam`` (zero for an empty set)."""
    contributions = list(contributions)
    eps = [1.0] * len(contributions) if epsilons is None else list(epsilons)
    if len(eps) != len(contributions):
        raise InvalidParameter("one epsilon per contribution")
    first = np.zeros_like(lam.first)
    second = np.zeros_like(lam.second)
    for e, c in zip(eps, contributions):
        if c.family is not lam.family or c.first.shape != first.shape or c.second.shape != second.shape:
            raise InvalidParameter("contribution does not match the posterior's layout")
        first = first + e * c.first
        second = second + e * c.second
    return NaturalParams(lam.family, rho * first, rho * second)


def perturbed_posterior(lam: NaturalParams, delta: NaturalParams):
    """Family parameters of lam + delta (validity checked)."""
    return from_natural(lam + delta)


def mean_derivative(lam: NaturalParams, d_lam: NaturalParams) -> np.ndarray:
    """Derivative of the Gaussian mean along the natural-parameter direction ``d_lam``.

    With lam = (S m, -S/2): dm = S^-1 (d_first + 2 d_second m).
    """
    if lam.family is Family.BETA:
        raise UnsupportedFamily("mean derivative is defined for Gaussians")
    gp = from_natural(lam)
    if lam.family is Family.GAUSSIAN_DIAG:
        return (d_lam.first + 2.0 * d_lam.second * gp.mean) / gp.precision
    rhs = d_lam.first + 2.0 * d_lam.second @ gp.mean
    return linalg.solve(gp.precision, rhs, assume_a="pos")


# ----------------------------------------------------- parameter deviations


def sensitivity_direction(view: PreconditionerView, grad_i: np.ndarray) -> np.ndarray:
    return view.apply(grad_i)


def _resolve(source, data: Dataset, theta):
    if isinstance(source, TrainerState):
        return preconditioner_view(source, data.delta), source.theta if theta is None else theta
    if theta is None:
        raise InvalidParameter("theta is required when passing a bare view")
    return source, np.asarray(theta, dtype=float)


def parameter_deviation_estimate(
    source: TrainerState | PreconditionerView,
    model: ModelSpec,
    data: Dataset,
    pert: PerturbationSpec,
    theta=None,
    rho: float = 1.0,
) -> np.ndarray:
    """Estimated theta^{perturbed} - theta = rho P^-1 sum_j eps_j grad l_j(theta).

    The preconditioner stays at its full-data value (no leave-out correction).
    """
    view, theta = _resolve(source, data, theta)
    pert.check(data.n)
    if pert.indices.size == 0:
        return np.zeros(model.parameter_dim)
    G = per_example_grads(model, theta, data, pert.indices)
    return rho * view.apply(pert.epsilons @ G)


# ------------------------------------------------------- bi-linear deviations


@dataclass
class BilinearTerms:
    f: np.ndarray
    e: np.ndarray
    v: np.ndarray
    dlink: np.ndarray
    J: np.ndarray

    @property
    def deviation(self) -> np.ndarray:
        return self.dlink * self.v * self.e

    @property
    def score(self) -> np.ndarray:
        return np.abs(self.deviation).sum(axis=1)


def bilinear_terms(model: ModelSpec, theta, view: PreconditionerView, data: Dataset, idx=None) -> BilinearTerms:
    """Per-example f, e, per-class v = j_c^T P^-1 j_c and sigma'(f), for rows ``idx``."""
    idx = np.arange(data.n) if idx is None else np.atleast_1d(np.asarray(idx, dtype=int))
    X = data.X[idx]
    f = output(model, theta, X)
    J = jacobian(model, theta, X)
    e = link(model, f) - one_hot(model, data.y[idx])
    v = view.quad(J)
    if np.any(v < -1e-12 * np.abs(v).max(initial=1.0)):
        raise NumericalFailure("negative prediction variance; preconditioner is not positive definite")
    v = np.maximum(v, 0.0)
    return BilinearTerms(f, e, v, link_derivative(model, f), J)


def output_deviations(model: ModelSpec, theta, view: PreconditionerView, data: Dataset, idx=None, with_direction=False):
    idx = np.arange(data.n) if idx is None else np.atleast_1d(np.asarray(idx, dtype=int))
    t = bilinear_terms(model, theta, view, data, idx)
    dirs = None
    if with_direction:
        dirs = view.apply(np.einsum("nkp,nk->np", t.J, t.e))
    return [
        SensitivityRecord(int(i), t.e[k], t.v[k], t.deviation[k], float(t.score[k]), None if dirs is None else dirs[k])
        for k, i in enumerate(idx)
    ]


def output_deviation(model: ModelSpec, theta, view: PreconditionerView, data: Dataset, i: int) -> SensitivityRecord:
    """Prediction deviation sigma'(f_i) v_i e_i for removing example i."""
    return output_deviations(model, theta, view, data, [i], with_direction=True)[0]


def rank_by_score(records: Sequence[SensitivityRecord]) -> list[SensitivityRecord]:
    """Most sensitive first; equal scores fall back to example order."""
    return sorted(records, key=lambda r: (-r.score, r.example_id))


def group_output_deviation(
    model: ModelSpec,
    theta,
    view: PreconditionerView,
    data: Dataset,
    group: Sequence[int],
    mode: str = "diag",
    cap: int = 512,
) -> np.ndarray:
    """Per-example prediction deviations (|M| x K) when the whole group is removed.

    ``full`` applies the linearised |M| x |M| covariance J_c P^-1 J_c^T of each
    output c to that output's errors; ``diag`` keeps only its diagonal. Classes
    stay decoupled in both modes, so a group of one reduces to
    ``output_deviation``.
    """
    group = np.atleast_1d(np.asarray(group, dtype=int))
    if group.size == 0:
        raise InvalidParameter("group must be nonempty")
    t = bilinear_terms(model, theta, view, data, group)
    if mode == "diag":
        return t.deviation
    if mode != "full":
        raise InvalidParameter(f"unknown mode {mode!r}")
    if len(group) > cap:
        raise ResourceLimit(f"group covariance would be {len(group)} x {len(group)}; cap is {cap}")
    return t.dlink * group_output_shift(t, view)


def group_output_shift(t: BilinearTerms, view: PreconditionerView) -> np.ndarray:
    """(J_c P^-1 J_c^T) e_c for every output c, over the rows held in ``t``."""
    out = np.empty_like(t.e)
    for c in range(t.e.shape[1]):
        Jc = t.J[:, c, :]
        out[:, c] = (Jc @ view.apply(Jc).T) @ t.e[:, c]
    return out


# ------------------------------------------------- closed-form linear model


@dataclass
class LooExact:
    dtheta: np.ndarray
    df: float
    e_loo: float
    e: float
    v: float


def _ridge(data: Dataset):
    X, y = data.X, np.asarray(data.y, dtype=float)
    H = X.T @ X + data.delta * np.eye(X.shape[1])
    chol = linalg.cho_factor(H, lower=True)
    theta = linalg.cho_solve(chol, X.T @ y)
    return X, y, H, chol, theta


def linreg_loo_exact(data: Dataset, i: int, rtol: float = 1e-8) -> LooExact:
    """Exact leave-one-out change for ridge regression, computed two ways.

    Direct: (H - x x^T)^-1 x e. Sherman-Morrison: H^-1 x e / (1 - v). Both are
    evaluated and must agree to ``rtol``.
    """
    X, y, H, chol, theta = _ridge(data)
    x = X[i]
    e = float(x @ theta - y[i])
    Sx = linalg.cho_solve(chol, x)
    v = float(x @ Sx)
    if v >= 1.0 - 1e-14:
        raise LeverageDegenerate(f"leverage v_{i} = {v} leaves H without example {i} singular")
    H_out = H - np.outer(x, x)
    try:
        direct = linalg.solve(H_out, x * e, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise LeverageDegenerate(str(exc)) from exc
    sherman = Sx * e / (1.0 - v)
    scale = max(np.abs(sherman).max(), 1e-300)
    if np.abs(direct - sherman).max() > rtol * scale + 1e-15:
        raise NumericalFailure("direct and Sherman-Morrison leave-one-out deviations disagree")
    e_loo = e / (1.0 - v)
    return LooExact(sherman, float(x @ sherman), e_loo, e, v)


def linreg_epsilon_derivative(data: Dataset, i: int, at_eps: float = 0.0) -> np.ndarray:
    """d theta / d eps for argmin L - eps l_i: H^-1 x_i e_i / (1 - eps v_i)^2."""
    X, y, H, chol, theta = _ridge(data)
    x = X[i]
    e = float(x @ theta - y[i])
    Sx = linalg.cho_solve(chol, x)
    v = float(x @ Sx)
    denom = 1.0 - at_eps * v
    if abs(denom) < 1e-14:
        raise LeverageDegenerate(f"1 - eps v_{i} vanishes at eps = {at_eps}")
    return Sx * e / denom**2


def leave_out_view(model: ModelSpec, theta, data: Dataset, removed: Sequence[int], jitter: float = 1e-8) -> PreconditionerView:
    """Full-curvature view with the removed examples' curvature subtracted."""
    H = curvature(model, theta, data, CurvatureKind.FULL_GGN).values
    if len(removed):
        H = H - curvature(model, theta, data, CurvatureKind.FULL_GGN, subset=removed, include_reg=False).values
    return PreconditionerView.full(H, jitter)


def hessian_view(model: ModelSpec, theta, data: Dataset, kind=CurvatureKind.FULL_GGN, jitter: float = 1e-8) -> PreconditionerView:
    """View from the full-data curvature at theta (Laplace-style)."""
    c = curvature(model, theta, data, kind)
    if c.kind in (CurvatureKind.FULL_GGN, CurvatureKind.FULL_HESSIAN):
        return PreconditionerView.full(c.values, jitter)
    if c.kind is CurvatureKind.DIAG_GGN:
        return PreconditionerView.diag(c.values)
    return PreconditionerView.diag(np.full(model.parameter_dim, c.values))
