"""Natural-parameter algebra for the Gaussian and Beta families.

Gaussians are stored as ``(S m, -S/2)`` and Betas as ``(alpha - 1, beta - 1)``.
Removing a likelihood factor from a conjugate posterior is a subtraction in
these coordinates, which is what :func:`remove_from_posterior` does.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .errors import DegeneratePosterior, InvalidParameter, UnsupportedFamily


class Family(str, enum.Enum):
    GAUSSIAN_FULL = "GaussianFull"
    GAUSSIAN_DIAG = "GaussianDiag"
    BETA = "Beta"


@dataclass(frozen=True)
class NaturalParams:
    """Natural parameters of one distribution, or of one likelihood factor.

    Factors (and deltas between posteriors) may be improper, so nothing is
    validated here; call :meth:`check` when the value must be a distribution.
    """

    family: Family
    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "first", np.asarray(self.first, dtype=float))
        object.__setattr__(self, "second", np.asarray(self.second, dtype=float))

    def __add__(self, other: NaturalParams) -> NaturalParams:
        _same_layout(self, other)
        return NaturalParams(self.family, self.first + other.first, self.second + other.second)

    def __sub__(self, other: NaturalParams) -> NaturalParams:
        _same_layout(self, other)
        return NaturalParams(self.family, self.first - other.first, self.second - other.second)

    def __mul__(self, scale: float) -> NaturalParams:
        return NaturalParams(self.family, scale * self.first, scale * self.second)

    __rmul__ = __mul__

    def __neg__(self) -> NaturalParams:
        return NaturalParams(self.family, -self.first, -self.second)

    def is_valid(self) -> bool:
        try:
            self.check()
        except InvalidParameter:
            return False
        return True

    def check(self) -> NaturalParams:
        """Raise InvalidParameter unless this is a proper distribution."""
        if not (np.all(np.isfinite(self.first)) and np.all(np.isfinite(self.second))):
            raise InvalidParameter("non-finite natural parameter")
        if self.family is Family.BETA:
            if self.first.shape != () or self.second.shape != ():
                raise InvalidParameter("Beta natural parameters must be scalars")
            if not (self.first > -1 and self.second > -1):
                raise InvalidParameter(
                    f"Beta requires alpha, beta > 0; got alpha={self.first + 1}, beta={self.second + 1}"
                )
        elif self.family is Family.GAUSSIAN_DIAG:
            if self.first.ndim != 1 or self.second.shape != self.first.shape:
                raise InvalidParameter("GaussianDiag needs matching vectors")
            if not np.all(-2.0 * self.second > 0):
                raise InvalidParameter("GaussianDiag precision must be strictly positive")
        else:
            p = self.first.shape[0] if self.first.ndim == 1 else -1
            if self.second.shape != (p, p):
                raise InvalidParameter("GaussianFull needs a P-vector and a PxP matrix")
            if not np.allclose(self.second, self.second.T, rtol=1e-12, atol=1e-12):
                raise InvalidParameter("GaussianFull second parameter must be symmetric")
            _cholesky(-2.0 * self.second)
        return self

    def to_json(self) -> dict:
        return {"family": self.family.value, "first": self.first.tolist(), "second": self.second.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> NaturalParams:
        return cls(Family(obj["family"]), np.asarray(obj["first"]), np.asarray(obj["second"]))


# A likelihood factor has the same layout; the alias documents intent.
LikelihoodNat = NaturalParams


@dataclass(frozen=True)
class GaussianParams:
    """Mean and precision. ``precision`` is a matrix (full) or a vector (diagonal)."""

    mean: np.ndarray
    precision: np.ndarray

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.precision) == 1


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float


def _same_layout(a: NaturalParams, b: NaturalParams) -> None:
    if a.family is not b.family:
        raise UnsupportedFamily(f"cannot combine {a.family.value} with {b.family.value}")
    if a.first.shape != b.first.shape or a.second.shape != b.second.shape:
        raise InvalidParameter("natural parameter shapes differ")


def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as exc:
        raise InvalidParameter("precision is not positive definite") from exc


def to_natural(params: GaussianParams | BetaParams) -> NaturalParams:
    if isinstance(params, BetaParams):
        if not (params.alpha > 0 and params.beta > 0):
            raise InvalidParameter("Beta requires alpha, beta > 0")
        return NaturalParams(Family.BETA, params.alpha - 1.0, params.beta - 1.0)
    mean = np.asarray(params.mean, dtype=float)
    prec = np.asarray(params.precision, dtype=float)
    if params.diagonal:
        lam = NaturalParams(Family.GAUSSIAN_DIAG, prec * mean, -0.5 * prec)
    else:
        lam = NaturalParams(Family.GAUSSIAN_FULL, prec @ mean, -0.5 * prec)
    return lam.check()


def from_natural(lam: NaturalParams) -> GaussianParams | BetaParams:
    lam.check()
    if lam.family is Family.BETA:
        return BetaParams(float(lam.first) + 1.0, float(lam.second) + 1.0)
    prec = -2.0 * lam.second
    if lam.family is Family.GAUSSIAN_DIAG:
        return GaussianParams(lam.first / prec, prec)
    chol = _cholesky(prec)
    return GaussianParams(linalg.cho_solve((chol, True), lam.first), prec)


def bernoulli_likelihood_natural(y: int) -> NaturalParams:
    """Bernoulli likelihood of a Beta-distributed success rate: ``(y, 1 - y)``.

    Removing it shifts (alpha, beta) by (-y, y - 1).
    """
    if y not in (0, 1):
        raise InvalidParameter("Bernoulli label must be 0 or 1")
    return NaturalParams(Family.BETA, float(y), 1.0 - float(y))


def linreg_likelihood_natural(x: Sequence[float], y: float) -> NaturalParams:
    """Unit-noise Gaussian likelihood of a linear model: ``(x y, -x x^T / 2)``."""
    x = np.asarray(x, dtype=float)
    return NaturalParams(Family.GAUSSIAN_FULL, x * y, -0.5 * np.outer(x, x))


def add_factors(
    lam: NaturalParams, factors: Iterable[NaturalParams], weights: Iterable[float] | None = None
) -> NaturalParams:
    factors = list(factors)
    weights = [1.0] * len(factors) if weights is None else list(weights)
    first, second = lam.first.copy(), lam.second.copy()
    for w, f in zip(weights, factors):
        _same_layout(lam, f)
        first += w * f.first
        second += w * f.second
    return NaturalParams(lam.family, first, second)


def remove_from_posterior(
    lam: NaturalParams, factors: Iterable[NaturalParams], weights: Iterable[float] | None = None
) -> NaturalParams:
    """Divide likelihood factors out of a posterior (optionally raised to ``weights``)."""
    lam.check()
    factors = list(factors)
    weights = [1.0] * len(factors) if weights is None else list(weights)
    out = add_factors(lam, factors, [-w for w in weights])
    try:
        return out.check()
    except InvalidParameter as exc:
        raise DegeneratePosterior(f"removal leaves an invalid posterior: {exc}") from exc


@dataclass
class GaussianPosterior:
    """Gaussian q = N(mean, precision^-1); precision full (PxP), diagonal (P,) or scalar."""

    mean: np.ndarray
    precision: np.ndarray | float

    @property
    def kind(self) -> str:
        nd = np.ndim(self.precision)
        return {0: "scalar", 1: "diag", 2: "full"}[nd]

    def natural(self) -> NaturalParams:
        prec = self.precision
        if self.kind == "scalar":
            prec = np.full_like(self.mean, float(prec), dtype=float)
        return to_natural(GaussianParams(self.mean, prec))

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        eps = rng.standard_normal((n, self.mean.shape[0]))
        return self.mean + self.scale_noise(eps)

    def scale_noise(self, eps: np.ndarray) -> np.ndarray:
        """Map standard-normal draws to draws from N(0, precision^-1)."""
        if self.kind == "full":
            chol = _cholesky(np.asarray(self.precision))
            # x = L^-T eps has covariance (L L^T)^-1
            return linalg.solve_triangular(chol, np.atleast_2d(eps).T, lower=True, trans="T").T.reshape(
                np.shape(eps)
            )
        return eps / np.sqrt(self.precision)

    def covariance_apply(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "full":
            chol = _cholesky(np.asarray(self.precision))
            return linalg.cho_solve((chol, True), np.asarray(v).T).T
        return np.asarray(v) / self.precision
