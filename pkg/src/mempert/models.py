"""Differentiable predictive models with canonical-link losses.

Every model is a stack of dense layers (tanh between them), so a single
forward/backward path serves the convex models (one layer, no bias) and the
MLP. Losses are negative log-likelihoods with canonical links, hence the
per-example gradient is always ``J_i^T (sigma(f_i) - y_i)`` and the GGN is
``J_i^T Lambda_i J_i`` with ``Lambda_i`` the Hessian of the loss in f.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .data import Dataset, Task
from .errors import InvalidParameter, NumericalFailure, UnsupportedCurvature, UnsupportedFamily
from .expfam import GaussianPosterior

LOG_2PI = float(np.log(2 * np.pi))


class Arch(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    SOFTMAX = "softmax"
    MLP = "mlp"


class CurvatureKind(str, enum.Enum):
    FULL_HESSIAN = "full_hessian"
    FULL_GGN = "full_ggn"
    DIAG_GGN = "diag_ggn"
    SCALED_IDENTITY = "scaled_identity"


_ARCH_TASK = {Arch.LINEAR: Task.REGRESSION, Arch.LOGISTIC: Task.BINARY, Arch.SOFTMAX: Task.MULTICLASS}


@dataclass(frozen=True)
class ModelSpec:
    arch: Arch
    input_dim: int
    task: Task
    n_classes: int = 1
    hidden: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.arch in _ARCH_TASK and _ARCH_TASK[self.arch] is not self.task:
            raise InvalidParameter(f"{self.arch.value} model cannot fit a {self.task.value} task")
        if self.task is Task.MULTICLASS and self.n_classes < 2:
            raise InvalidParameter("multiclass models need n_classes >= 2")

    @classmethod
    def for_data(cls, arch: str | Arch, data: Dataset, hidden: Sequence[int] = (32, 16)) -> ModelSpec:
        return cls(Arch(arch), data.dim, data.task, data.n_classes, tuple(hidden))

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.task is Task.MULTICLASS else 1

    @property
    def layers(self) -> list[tuple[int, int, bool]]:
        """(fan_in, fan_out, has_bias) per dense layer."""
        if self.arch is not Arch.MLP:
            return [(self.input_dim, self.output_dim, False)]
        widths = [self.input_dim, *self.hidden, self.output_dim]
        return [(a, b, True) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def parameter_dim(self) -> int:
        return sum(a * b + (b if bias else 0) for a, b, bias in self.layers)

    @property
    def convex(self) -> bool:
        return self.arch is not Arch.MLP


@dataclass(frozen=True)
class Curvature:
    kind: CurvatureKind
    values: np.ndarray | float
    includes_regularizer: bool = True


# ------------------------------------------------------------------- forward


def _unpack(model: ModelSpec, theta: np.ndarray):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.parameter_dim,):
        raise InvalidParameter(f"theta has shape {theta.shape}, expected ({model.parameter_dim},)")
    params, k = [], 0
    for a, b, bias in model.layers:
        W = theta[k : k + a * b].reshape(a, b)
        k += a * b
        bvec = None
        if bias:
            bvec = theta[k : k + b]
            k += b
        params.append((W, bvec))
    return params


def _forward(model: ModelSpec, theta: np.ndarray, X: np.ndarray):
    params = _unpack(model, theta)
    hs = [np.asarray(X, dtype=float)]
    h = hs[0]
    # overflow is reported below as NumericalFailure
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (W, b) in enumerate(params):
            a = h @ W
            if b is not None:
                a = a + b
            h = np.tanh(a) if l < len(params) - 1 else a
            hs.append(h)
    f = hs.pop()
    if not np.all(np.isfinite(f)):
        raise NumericalFailure("non-finite model output")
    return f, params, hs


def _backward(params, hs, G: np.ndarray, per_example: bool) -> np.ndarray:
    """Pull ``G`` (N, *extra, K) back to parameter space.

    Returns (N, *extra, P) when ``per_example`` else the sum over N, (*extra, P).
    """
    extra = G.ndim - 2
    pieces = [None] * len(params)
    for l in reversed(range(len(params))):
        W, b = params[l]
        h = hs[l]
        if per_example:
            gW = np.einsum("ni,n...j->n...ij", h, G)
            gW = gW.reshape(*gW.shape[:-2], -1)
            gb = G
        else:
            gW = np.einsum("ni,n...j->...ij", h, G)
            gW = gW.reshape(*gW.shape[:-2], -1)
            gb = G.sum(axis=0)
        pieces[l] = (gW, gb) if b is not None else (gW,)
        if l > 0:
            dh = 1.0 - h * h
            G = (G @ W.T) * dh.reshape(dh.shape[0], *([1] * extra), dh.shape[1])
    return np.concatenate([p for layer in pieces for p in layer], axis=-1)


def output(model: ModelSpec, theta, X) -> np.ndarray:
    """Model outputs f (logits / regression mean), shape (N, K)."""
    return _forward(model, theta, X)[0]


def jacobian(model: ModelSpec, theta, X) -> np.ndarray:
    """Per-example Jacobians of f, shape (N, K, P)."""
    f, params, hs = _forward(model, theta, X)
    n, k = f.shape
    G = np.broadcast_to(np.eye(k), (n, k, k)).copy()
    return _backward(params, hs, G, per_example=True)


def output_and_jacobian(model: ModelSpec, theta, data: Dataset, i: int):
    """Output f_i (K,) and its Jacobian laid out as (P, K)."""
    x = data.X[i : i + 1]
    return output(model, theta, x)[0], jacobian(model, theta, x)[0].T


# ------------------------------------------------------------- likelihoods


def one_hot(model: ModelSpec, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if model.task is Task.MULTICLASS:
        return np.eye(model.n_classes)[y.astype(int)]
    return y.reshape(-1, 1).astype(float)


def link(model: ModelSpec, f: np.ndarray) -> np.ndarray:
    if model.task is Task.REGRESSION:
        return f
    if model.task is Task.BINARY:
        return expit(f)
    return softmax(f, axis=-1)


def link_derivative(model: ModelSpec, f: np.ndarray) -> np.ndarray:
    """Diagonal of d sigma / d f, shape (N, K)."""
    if model.task is Task.REGRESSION:
        return np.ones_like(f)
    p = link(model, f)
    return p * (1.0 - p)


def output_hessian(model: ModelSpec, f: np.ndarray) -> np.ndarray:
    """Hessian of the loss w.r.t. f, shape (N, K, K)."""
    if model.task is Task.MULTICLASS:
        p = softmax(f, axis=-1)
        return np.einsum("nk,kl->nkl", p, np.eye(p.shape[1])) - np.einsum("nk,nl->nkl", p, p)
    return link_derivative(model, f)[:, :, None]


def per_example_loss(model: ModelSpec, f: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Training loss l_i(f). Regression drops the Gaussian normaliser."""
    if model.task is Task.REGRESSION:
        return 0.5 * (f[:, 0] - y) ** 2
    if model.task is Task.BINARY:
        z = f[:, 0]
        return np.logaddexp(0.0, z) - y * z
    return -log_softmax(f, axis=-1)[np.arange(f.shape[0]), y.astype(int)]


def per_example_nll(model: ModelSpec, f: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Negative log-likelihood; regression uses unit noise variance."""
    loss = per_example_loss(model, f, y)
    if model.task is Task.REGRESSION:
        loss = loss + 0.5 * LOG_2PI
    return loss


def residual(model: ModelSpec, theta, data: Dataset, idx=None) -> np.ndarray:
    """Prediction errors e_i = sigma(f_i) - y_i, shape (n, K)."""
    idx = np.arange(data.n) if idx is None else np.atleast_1d(idx)
    f = output(model, theta, data.X[idx])
    return link(model, f) - one_hot(model, data.y[idx])


# ---------------------------------------------------------- loss and grads


def _rows(data: Dataset, subset):
    return np.arange(data.n) if subset is None else np.atleast_1d(np.asarray(subset, dtype=int))


def loss_and_grad(model: ModelSpec, theta, data: Dataset, subset=None, include_reg=True, weights=None):
    """Sum of per-example losses over ``subset`` (plus delta |theta|^2 / 2).

    ``weights`` optionally rescales each selected example's loss.
    """
    rows = _rows(data, subset)
    theta = np.asarray(theta, dtype=float)
    f, params, hs = _forward(model, theta, data.X[rows])
    y = data.y[rows]
    w = np.ones(rows.size) if weights is None else np.asarray(weights, dtype=float)
    loss = float(w @ per_example_loss(model, f, y))
    G = w[:, None] * (link(model, f) - one_hot(model, y))
    grad = _backward(params, hs, G, per_example=False)
    if include_reg:
        loss += 0.5 * data.delta * float(theta @ theta)
        grad = grad + data.delta * theta
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalFailure("non-finite loss or gradient")
    return loss, grad


def per_example_grads(model: ModelSpec, theta, data: Dataset, subset=None) -> np.ndarray:
    """Rows are grad l_i (no regulariser), shape (n, P)."""
    rows = _rows(data, subset)
    f, params, hs = _forward(model, theta, data.X[rows])
    e = link(model, f) - one_hot(model, data.y[rows])
    return _backward(params, hs, e[:, None, :], per_example=True)[:, 0, :]


def curvature(
    model: ModelSpec,
    theta,
    data: Dataset,
    kind: str | CurvatureKind = CurvatureKind.DIAG_GGN,
    subset=None,
    include_reg: bool = True,
    weights=None,
) -> Curvature:
    """Curvature of the (weighted) loss over ``subset``.

    The exact Hessian is only offered for the convex models, where it equals
    the GGN; the MLP gets the GGN (full or diagonal).
    """
    kind = CurvatureKind(kind)
    if kind is CurvatureKind.FULL_HESSIAN and not model.convex:
        raise UnsupportedCurvature("exact Hessian is only available for linear/logistic/softmax models")
    rows = _rows(data, subset)
    P = model.parameter_dim
    delta = data.delta if include_reg else 0.0
    if rows.size == 0:
        diag = np.zeros(P)
        J = np.zeros((0, model.output_dim, P))
        lam = np.zeros((0, model.output_dim, model.output_dim))
    else:
        X = data.X[rows]
        f = output(model, theta, X)
        J = jacobian(model, theta, X)
        lam = output_hessian(model, f)
    if weights is not None:
        lam = lam * np.asarray(weights, dtype=float)[:, None, None]
    if kind in (CurvatureKind.FULL_HESSIAN, CurvatureKind.FULL_GGN):
        H = np.einsum("nkp,nkl,nlq->pq", J, lam, J, optimize=True)
        H = 0.5 * (H + H.T) + delta * np.eye(P)
        return Curvature(kind, H, include_reg)
    diag = np.einsum("nkp,nkl,nlp->p", J, lam, J, optimize=True) + delta
    if kind is CurvatureKind.DIAG_GGN:
        return Curvature(kind, diag, include_reg)
    return Curvature(kind, float(diag.mean()), include_reg)


# ------------------------------------------------------- smoothed gradients


def expected_grad_smoothed(
    q: GaussianPosterior,
    n_samples: int,
    seed: int = 0,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    loss_fn: Callable[[np.ndarray], float] | None = None,
    noise: np.ndarray | None = None,
    return_stderr: bool = False,
):
    """Monte-Carlo estimate of the gradient of E_q[l] with respect to the mean.

    With ``grad_fn`` the estimator averages grad l at samples (Bonnet). With
    only ``loss_fn`` the derivative is taken outside the expectation via
    E[(l(theta) - l(m)) Sigma^-1 (theta - m)], which needs no derivative of l.
    ``noise`` overrides the standard-normal draws (shape (n_samples, P)).
    """
    if not isinstance(q, GaussianPosterior):
        raise UnsupportedFamily("smoothed gradients need a Gaussian posterior")
    if n_samples < 1:
        raise InvalidParameter("n_samples must be >= 1")
    if grad_fn is None and loss_fn is None:
        raise InvalidParameter("pass grad_fn or loss_fn")
    m = np.asarray(q.mean, dtype=float)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((n_samples, m.shape[0]))
    z = q.scale_noise(np.asarray(noise, dtype=float).reshape(n_samples, m.shape[0]))
    if grad_fn is not None:
        draws = np.array([grad_fn(m + zi) for zi in z])
    else:
        base = loss_fn(m)
        prec_z = z @ np.asarray(q.precision) if q.kind == "full" else z * q.precision
        draws = np.array([(loss_fn(m + zi) - base) * pz for zi, pz in zip(z, prec_z)])
    est = draws.mean(axis=0)
    if return_stderr:
        se = draws.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.full_like(est, np.inf)
        return est, se
    return est


def example_grad_fn(model: ModelSpec, data: Dataset, i: int):
    """theta -> grad l_i(theta), for use with expected_grad_smoothed."""
    return lambda th: per_example_grads(model, th, data, [i])[0]


def init_params(model: ModelSpec, seed: int = 0, scale: float = 0.1) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal(model.parameter_dim)
