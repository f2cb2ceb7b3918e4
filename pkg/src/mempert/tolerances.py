"""Numerical tolerances and thresholds used by the oracle suite and the acceptance tests."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    fd_step: float = 1e-5
    fd_rel: float = 1e-4
    fd_mlp_rel: float = 1e-5
    roundtrip: float = 1e-12
    conjugate_linreg: float = 1e-10
    exact_identity: float = 1e-8
    influence_equality: float = 1e-10
    eps_derivative_rel: float = 1e-3
    linreg_eps_derivative_rel: float = 1e-6
    retrain_grad: float = 1e-10
    logistic_train_grad: float = 1e-8
    mc_sigmas: float = 3.0
    scatter_spearman: float = 0.9
    group_spearman: float = 0.8
    sweep_pearson: float = 0.95
    track_spearman: float = 0.8
    trainer_agreement: float = 1e-6
    newton_on_agreement: float = 1e-10


TOL = Tolerances()
