"""Bayesian-learning-rule trainers and the preconditioners they maintain.

Each algorithm keeps the preconditioner its sensitivity measure needs:

    SGD       identity
    Newton    H_{t-1} (Hessian/GGN at the previous iterate)
    ON        S_t, full matrix running average of Hessians
    ONDiag    s_t, diagonal running average
    IBLR      s_t = N (h_t + delta / N), the diagonal Gaussian precision
    Adaptive  N sqrt(s_t) from the Adam second-moment estimate

Losses are in sum form, L = sum_i l_i + delta |theta|^2 / 2; minibatch
estimates rescale the data term by N / |B|.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np
from scipy import linalg

from .data import Dataset
from .errors import ConvergenceFailure, InvalidParameter, NumericalFailure, SingularCurvature
from .models import CurvatureKind, ModelSpec, curvature, init_params, loss_and_grad


class Algorithm(str, enum.Enum):
    SGD = "sgd"
    NEWTON = "newton"
    ON = "on"
    ON_DIAG = "on_diag"
    IBLR = "iblr"
    ADAPTIVE = "adaptive"


class ViewShape(str, enum.Enum):
    FULL_INVERSE = "full_inverse"
    DIAG_INVERSE = "diag_inverse"
    DIAG_INVERSE_SQRT = "diag_inverse_sqrt"
    IDENTITY = "identity"


def factorize(mat: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    """Lower Cholesky factor; retries once with ``jitter * I`` added."""
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(mat + jitter * np.eye(mat.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCurvature("curvature is not positive definite even after jitter") from exc


class PreconditionerView:
    """Applies the inverse of an algorithm's preconditioner along the last axis."""

    def __init__(self, shape: ViewShape, values=None, jitter: float = 1e-8):
        self.shape = ViewShape(shape)
        self.values = values
        self._chol = None
        if self.shape is ViewShape.FULL_INVERSE:
            self._chol = factorize(np.asarray(values, dtype=float), jitter)
        elif self.shape is not ViewShape.IDENTITY:
            vals = np.asarray(values, dtype=float)
            if not np.all(vals > 0):
                raise SingularCurvature("diagonal preconditioner must be strictly positive")
            self.values = vals

    @classmethod
    def identity(cls) -> PreconditionerView:
        return cls(ViewShape.IDENTITY)

    @classmethod
    def full(cls, mat: np.ndarray, jitter: float = 1e-8) -> PreconditionerView:
        return cls(ViewShape.FULL_INVERSE, mat, jitter)

    @classmethod
    def diag(cls, s: np.ndarray) -> PreconditionerView:
        return cls(ViewShape.DIAG_INVERSE, s)

    @classmethod
    def diag_sqrt(cls, s: np.ndarray, n: int, eps: float = 0.0) -> PreconditionerView:
        """Adam-style view: divides by ``n * (sqrt(s) + eps)``."""
        return cls(ViewShape.DIAG_INVERSE_SQRT, n * (np.sqrt(np.asarray(s, dtype=float)) + eps))

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.shape is ViewShape.IDENTITY:
            return v.copy()
        if self.shape is ViewShape.FULL_INVERSE:
            flat = v.reshape(-1, v.shape[-1])
            return linalg.cho_solve((self._chol, True), flat.T).T.reshape(v.shape)
        return v / self.values

    def quad(self, J: np.ndarray) -> np.ndarray:
        """Row-wise j^T P^-1 j over the last axis."""
        return np.einsum("...p,...p->...", J, self.apply(J))


@dataclass
class Hyper:
    lr: float = 0.1
    lr_min: float = 0.0
    schedule: str = "constant"
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    h0: float = 0.1
    batch_size: int | None = None
    mc_samples: int = 1
    eps: float = 1e-8
    init_scale: float = 0.1
    jitter: float = 1e-8
    decoupled_decay: bool = False
    seed: int = 0

    def validate(self, algorithm: Algorithm) -> None:
        if not self.lr > 0:
            raise InvalidParameter("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidParameter("beta1 and beta2 must lie in [0, 1)")
        if algorithm is Algorithm.IBLR and not self.h0 > 0:
            raise InvalidParameter("h0 must be > 0 for iBLR")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidParameter(f"unknown schedule {self.schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidParameter("batch_size must be >= 1")
        if self.mc_samples < 0:
            raise InvalidParameter("mc_samples must be >= 0")

    def rate(self, step: int) -> float:
        if self.schedule == "constant" or not self.total_steps:
            return self.lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainerState:
    algorithm: Algorithm
    theta: np.ndarray
    n_data: int
    hyper: Hyper
    precond: np.ndarray | None = None
    g: np.ndarray | None = None
    h: np.ndarray | None = None
    r: np.ndarray | None = None
    s: np.ndarray | None = None
    step: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.theta

    def iblr_precision(self, delta: float) -> np.ndarray:
        """Diagonal posterior precision N (h + delta / N) = N h + delta."""
        return self.n_data * self.h + delta


def init_trainer(model: ModelSpec, data: Dataset, algorithm, hyper: Hyper | None = None, theta0=None) -> TrainerState:
    algorithm = Algorithm(algorithm)
    hyper = hyper or Hyper()
    hyper.validate(algorithm)
    P = model.parameter_dim
    theta = init_params(model, hyper.seed, hyper.init_scale) if theta0 is None else np.array(theta0, dtype=float)
    st = TrainerState(algorithm, theta, data.n, hyper)
    if algorithm is Algorithm.NEWTON:
        st.precond = curvature(model, theta, data, CurvatureKind.FULL_GGN).values
    elif algorithm is Algorithm.ON:
        st.precond = data.delta * np.eye(P)
    elif algorithm is Algorithm.ON_DIAG:
        st.precond = np.full(P, data.delta)
    elif algorithm is Algorithm.IBLR:
        st.h = np.full(P, float(hyper.h0))
        st.g = np.zeros(P)
    elif algorithm is Algorithm.ADAPTIVE:
        st.r = np.zeros(P)
        st.s = np.zeros(P)
    return st


def _minibatch_terms(model, theta, data, batch, full_curv=None):
    """Rescaled minibatch gradient (and curvature) of L, regulariser included."""
    n_b = batch.size
    scale = data.n / n_b
    _, g = loss_and_grad(model, theta, data, batch, include_reg=False)
    g = scale * g + data.delta * theta
    if full_curv is None:
        return g, None
    c = curvature(model, theta, data, full_curv, subset=batch, include_reg=False).values
    if full_curv is CurvatureKind.DIAG_GGN:
        return g, scale * c + data.delta
    return g, scale * c + data.delta * np.eye(theta.size)


def step(state: TrainerState, model: ModelSpec, data: Dataset, batch=None) -> TrainerState:
    """One update of ``state.algorithm`` on ``batch`` (default: full batch)."""
    hp = state.hyper
    batch = np.arange(data.n) if batch is None else np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise InvalidParameter("empty minibatch")
    lr = hp.rate(state.step)
    theta = state.theta
    alg = state.algorithm
    new = replace(state, step=state.step + 1)

    if alg is Algorithm.SGD:
        g, _ = _minibatch_terms(model, theta, data, batch)
        new.theta = theta - lr * g

    elif alg is Algorithm.NEWTON:
        g, H = _minibatch_terms(model, theta, data, batch, CurvatureKind.FULL_GGN)
        chol = factorize(H, hp.jitter)
        new.theta = theta - linalg.cho_solve((chol, True), g)
        new.precond = H

    elif alg is Algorithm.ON:
        g, H = _minibatch_terms(model, theta, data, batch, CurvatureKind.FULL_GGN)
        S = (1 - lr) * state.precond + lr * H
        chol = factorize(S, hp.jitter)
        new.theta = theta - lr * linalg.cho_solve((chol, True), g)
        new.precond = S

    elif alg is Algorithm.ON_DIAG:
        g, hdiag = _minibatch_terms(model, theta, data, batch, CurvatureKind.DIAG_GGN)
        s = (1 - lr) * state.precond + lr * hdiag
        new.theta = theta - lr * g / s
        new.precond = s

    elif alg is Algorithm.IBLR:
        new.theta, new.g, new.h = _iblr_update(state, model, data, batch, lr)

    elif alg is Algorithm.ADAPTIVE:
        _, g = loss_and_grad(model, theta, data, batch, include_reg=False)
        g = g / batch.size
        decay = data.delta / data.n
        if not hp.decoupled_decay:
            g = g + decay * theta
        t = state.step + 1
        r = hp.beta1 * state.r + (1 - hp.beta1) * g
        s = hp.beta2 * state.s + (1 - hp.beta2) * g * g
        s_hat = s / (1 - hp.beta2**t)
        th = theta - lr * r / (np.sqrt(s_hat) + hp.eps)
        if hp.decoupled_decay:
            th = th - lr * decay * theta
        new.theta, new.r, new.s = th, r, s

    if not np.all(np.isfinite(new.theta)):
        raise NumericalFailure(f"{alg.value} produced a non-finite iterate at step {new.step}")
    return new


def _iblr_update(state: TrainerState, model, data, batch, lr):
    hp = state.hyper
    n = data.n
    dlt = data.delta / n  # per-example regulariser, so N (h + dlt) is the precision
    m, h, g = state.theta, state.h, state.g
    if hp.mc_samples == 0:
        _, g_hat = loss_and_grad(model, m, data, batch, include_reg=False)
        g_hat = g_hat / batch.size
        h_hat = curvature(model, m, data, CurvatureKind.DIAG_GGN, subset=batch, include_reg=False).values
        h_hat = h_hat / batch.size
    else:
        sigma = 1.0 / np.sqrt(n * (h + dlt))
        rng = np.random.default_rng([hp.seed, state.step, 7])
        g_hat = np.zeros_like(m)
        h_hat = np.zeros_like(m)
        for _ in range(hp.mc_samples):
            eps = rng.standard_normal(m.shape)
            _, gs = loss_and_grad(model, m + sigma * eps, data, batch, include_reg=False)
            gs = gs / batch.size
            g_hat += gs
            h_hat += gs * eps / sigma
        g_hat /= hp.mc_samples
        h_hat /= hp.mc_samples
    b1, b2 = hp.beta1, hp.beta2
    g_new = b1 * g + (1 - b1) * g_hat
    h_new = b2 * h + (1 - b2) * h_hat + 0.5 * (1 - b2) ** 2 * (h - h_hat) ** 2 / (h + dlt)
    m_new = m - lr * (g_new + dlt * m) / (h_new + dlt)
    return m_new, g_new, h_new


def preconditioner_view(state: TrainerState, delta: float | None = None) -> PreconditionerView:
    """The inverse preconditioner that defines this algorithm's sensitivity measure.

    ``delta`` is required for iBLR (the precision is N h + delta).
    """
    alg = state.algorithm
    hp = state.hyper
    if alg is Algorithm.SGD:
        return PreconditionerView.identity()
    if alg in (Algorithm.NEWTON, Algorithm.ON):
        return PreconditionerView.full(state.precond, hp.jitter)
    if alg is Algorithm.ON_DIAG:
        return PreconditionerView.diag(state.precond)
    if alg is Algorithm.IBLR:
        if delta is None:
            raise InvalidParameter("iBLR view needs the regulariser strength delta")
        return PreconditionerView.diag(state.iblr_precision(delta))
    return PreconditionerView.diag_sqrt(state.s, state.n_data, hp.eps)


# ------------------------------------------------------------------ driving


def minibatches(n: int, batch_size: int | None, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Without-replacement batches for one epoch, seeded by (seed, epoch)."""
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    perm = np.random.default_rng([seed, epoch, 3]).permutation(n)
    for k in range(0, n, batch_size):
        yield np.sort(perm[k : k + batch_size])


def steps_per_epoch(n: int, batch_size: int | None) -> int:
    return 1 if batch_size is None or batch_size >= n else math.ceil(n / batch_size)


def train(
    model: ModelSpec,
    data: Dataset,
    algorithm,
    hyper: Hyper | None = None,
    epochs: int = 10,
    state: TrainerState | None = None,
    callback: Callable[[TrainerState, int], None] | None = None,
    theta0=None,
) -> TrainerState:
    """Run ``epochs`` passes; ``callback(state, epoch)`` fires after each one."""
    hyper = hyper or Hyper()
    if hyper.schedule == "cosine" and hyper.total_steps is None:
        hyper = replace(hyper, total_steps=epochs * steps_per_epoch(data.n, hyper.batch_size))
    if state is None:
        state = init_trainer(model, data, algorithm, hyper, theta0)
    for ep in range(epochs):
        for batch in minibatches(data.n, hyper.batch_size, hyper.seed, ep):
            state = step(state, model, data, batch)
        if callback is not None:
            callback(state, ep + 1)
    return state


def fit_map(
    model: ModelSpec,
    data: Dataset,
    theta0=None,
    tol: float = 1e-10,
    max_iter: int = 100,
    weights=None,
) -> tuple[np.ndarray, float]:
    """Damped Newton to a stationary point of the (weighted) regularised loss.

    Intended for the convex models, where the GGN is the exact Hessian.
    Returns (theta, final gradient norm).
    """
    theta = np.zeros(model.parameter_dim) if theta0 is None else np.array(theta0, dtype=float)
    loss, g = loss_and_grad(model, theta, data, weights=weights)
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gn < tol:
            return theta, gn
        H = curvature(model, theta, data, CurvatureKind.FULL_GGN, weights=weights).values
        d = linalg.cho_solve((factorize(H), True), g)
        t = 1.0
        while True:
            cand = theta - t * d
            c_loss, c_g = loss_and_grad(model, cand, data, weights=weights)
            # near the optimum loss differences drown in roundoff; a smaller gradient suffices
            if c_loss <= loss - 1e-4 * t * float(g @ d) or np.linalg.norm(c_g) < gn:
                break
            t *= 0.5
            if t < 1e-10:
                break
        if c_loss > loss and np.linalg.norm(c_g) >= gn:
            break
        theta, loss, g = cand, c_loss, c_g
        gn = float(np.linalg.norm(g))
    if gn < tol:
        return theta, gn
    raise ConvergenceFailure(f"Newton stopped with gradient norm {gn:.3e} > {tol:.1e}", theta, gn)
