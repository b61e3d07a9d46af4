"""Independent ground truth: retraining-based influence and grid search.

The finite-difference oracle perturbs the training objective by putting
weight (1 +- epsilon) on one domain's share of the mean loss and retrains
from the same seed, so the centered difference of reference loss is a clean
estimate of dQ/dbeta_j. Weighting (rather than resampling) removes the
O(1/sqrt(n)) sampling noise that would otherwise swamp epsilon-sized
effects; resampling itself is covered by the mixture module's size law.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mo
from .errors import InvalidInputError, OracleInvalidError
from .mixture import MixtureState

EPSILON_RANGE = (1e-3, 1e-1)


@dataclass
class RetrainMeta:
    converged: bool
    iterations: int
    grad_norm: float


@dataclass
class OracleResult:
    domain_index: int
    epsilon: float
    q_plus: float
    q_minus: float
    fd_alpha: float
    meta_plus: RetrainMeta
    meta_minus: RetrainMeta


def weighted_union(state: MixtureState, beta) -> mo.Examples:
    """Union of all domains with per-example weights (1 + beta_i) / N.

    beta = 0 reproduces the plain training mean exactly, so a retrain on
    this set is bit-identical to joint training.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (len(state.domains),):
        raise InvalidInputError("beta length does not match domain count")
    n_total = state.total
    X = np.vstack([d.examples.X for d in state.domains])
    y = np.concatenate([d.examples.y for d in state.domains])
    w = np.concatenate([np.full(d.n, (1.0 + b) / n_total)
                        for d, b in zip(state.domains, beta)])
    return mo.Examples(X, y, w)


def _retrain_q(state: MixtureState, spec: mo.ModelSpec, cfg: mo.TrainConfig,
               beta):
    trained = mo.train_to_convergence(spec, weighted_union(state, beta), cfg)
    q = mo.loss(trained, state.reference.examples, include_reg=False)
    meta = RetrainMeta(converged=trained.train_meta.converged,
                       iterations=trained.train_meta.iterations,
                       grad_norm=trained.train_meta.grad_norm)
    return q, meta, trained


def fd_influence(state: MixtureState, spec: mo.ModelSpec, cfg: mo.TrainConfig,
                 j: int, epsilon: float) -> OracleResult:
    """Centered-difference influence of domain j's weight on reference loss.

    Requires a strictly convex setup (single-layer softmax with l2 > 0) so
    both retrains reach the unique optimum; a non-converged retrain raises
    rather than returning a silently wrong derivative.
    """
    if spec.n_layers != 1 or spec.l2_reg <= 0.0:
        raise InvalidInputError(
            "finite-difference influence needs a strictly convex family: "
            "single-layer softmax with l2_reg > 0")
    if not (EPSILON_RANGE[0] <= epsilon <= EPSILON_RANGE[1]):
        raise InvalidInputError(
            f"epsilon {epsilon:g} outside {EPSILON_RANGE}")
    if not (0 <= j < len(state.domains)):
        raise InvalidInputError(f"no domain with index {j}")
    beta = np.zeros(len(state.domains))
    beta[j] = epsilon
    q_plus, meta_plus, _ = _retrain_q(state, spec, cfg, beta)
    beta[j] = -epsilon
    q_minus, meta_minus, _ = _retrain_q(state, spec, cfg, beta)
    for side, meta in (("+", meta_plus), ("-", meta_minus)):
        if not meta.converged:
            raise OracleInvalidError(
                f"retrain at beta_{j} = {side}{epsilon:g} did not converge "
                f"(domain {state.domains[j].name!r}, grad norm "
                f"{meta.grad_norm:.3g} after {meta.iterations} iterations)")
    fd_alpha = (q_plus - q_minus) / (2.0 * epsilon)
    if not np.isfinite(fd_alpha):
        raise OracleInvalidError("finite-difference quotient is not finite")
    return OracleResult(domain_index=j, epsilon=epsilon, q_plus=q_plus,
                        q_minus=q_minus, fd_alpha=fd_alpha,
                        meta_plus=meta_plus, meta_minus=meta_minus)


@dataclass
class GridPoint:
    beta: np.ndarray
    q: float
    converged: bool


@dataclass
class GridResult:
    points: list[GridPoint]
    argmin_index: int | None  # over converged points only

    @property
    def argmin(self) -> GridPoint | None:
        return None if self.argmin_index is None else self.points[self.argmin_index]


def brute_mixture_eval(state: MixtureState, spec: mo.ModelSpec,
                       cfg: mo.TrainConfig, beta_grid) -> GridResult:
    """Reference loss for every beta in a small grid, by reweighted retraining.

    Non-converged points are flagged and excluded from the argmin, never
    dropped silently.
    """
    grid = [np.asarray(b, dtype=float) for b in beta_grid]
    if len(grid) == 0 or len(grid) > 200:
        raise InvalidInputError("grid must contain between 1 and 200 points")
    if len(state.domains) > 3:
        raise InvalidInputError("brute-force evaluation supports <= 3 domains")
    points = []
    best = None
    for i, beta in enumerate(grid):
        q, meta, _ = _retrain_q(state, spec, cfg, beta)
        points.append(GridPoint(beta=beta, q=q, converged=meta.converged))
        if meta.converged and (best is None or q < points[best].q):
            best = i
    return GridResult(points=points, argmin_index=best)
