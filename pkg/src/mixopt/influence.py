"""Mixture-weight influence: how each domain's weight moves reference loss.

The sensitivity vector alpha has one entry per domain: the first-order
effect on reference loss of inflating that domain's contribution to the
training objective. It is computed as

    alpha_j = - g_ref^T (H + lambda I)^{-1} g_j * (|D_j| / N)

with g_ref the reference-loss gradient, g_j the domain's data gradient,
and H the training-loss curvature at the trained parameters. H is either
the exact dense Hessian (small models) or a per-layer Kronecker-factored
approximation with variance-corrected eigenvalues, in which case the
solve happens layer by layer in the factors' eigenbasis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import model as mo
from .errors import InvalidInputError, NumericalFailureError
from .linalg import EigenPair, kron_matvec, sym_eig

DEFAULT_DAMPING_FLOOR = 1e-4
DEFAULT_DAMPING_SCALE = 0.1
DEFAULT_EXACT_DAMPING = 1e-4
DEGENERATE_ALPHA_TOL = 1e-15

METHODS = ("exact", "kfac")


@dataclass
class CurvatureBlock:
    """One layer's Kronecker-factored curvature.

    X is the mean input outer product, Delta the mean error outer product;
    lambda_corrected holds the per-coordinate variance of the gradient
    projected onto the factors' eigenbasis (column-major layer layout).
    """

    layer_index: int
    X: np.ndarray
    Delta: np.ndarray
    eig_X: EigenPair
    eig_Delta: EigenPair
    lambda_corrected: np.ndarray
    damping: float

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Delta.shape[0], self.X.shape[0])

    @property
    def param_count(self) -> int:
        return self.Delta.shape[0] * self.X.shape[0]


def default_damping_policy(blocks: list[CurvatureBlock]) -> float:
    """max(floor, 0.1 * mean corrected eigenvalue) over the given blocks."""
    lam = np.concatenate([b.lambda_corrected for b in blocks])
    return max(DEFAULT_DAMPING_FLOOR, DEFAULT_DAMPING_SCALE * float(lam.mean()))


def domain_gradient(state: mo.ModelState, domain: mo.Examples,
                    sample_factor: float, rng: np.random.Generator):
    """Mean-loss gradient over a without-replacement sample of the domain.

    sample_factor = 1 keeps the full domain in original order, so the
    result is bit-identical to model.grad on the domain.
    """
    if not (0.0 < sample_factor <= 1.0):
        raise InvalidInputError("sample_factor must be in (0, 1]")
    if sample_factor == 1.0:
        return mo.grad(state, domain)
    k = math.ceil(sample_factor * domain.n)
    if k < 1:
        raise InvalidInputError("sample is empty")
    idx = np.sort(rng.choice(domain.n, size=k, replace=False))
    return mo.grad(state, domain.subset(idx))


def build_kfac(captures: list[mo.LayerCapture],
               damping_policy=default_damping_policy) -> list[CurvatureBlock]:
    """Per-layer factored curvature from captured activations/errors.

    For every layer: X = mean(x x^T), Delta = mean(delta delta^T), both
    eigendecomposed; the corrected eigenvalues are the mean squared
    coordinates of each example's gradient in the (Q_X, Q_Delta) basis.
    """
    if not captures:
        raise InvalidInputError("no captures given")
    n = captures[0].x.shape[0]
    if n < 2:
        raise InvalidInputError("need at least 2 examples to estimate curvature")
    blocks = []
    for cap in captures:
        x, d = cap.x, cap.delta
        if x.shape[0] != n or d.shape[0] != n:
            raise InvalidInputError("captures disagree on example count")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise NumericalFailureError(
                f"non-finite capture at layer {cap.layer_index}")
        X = (x.T @ x) / n
        Delta = (d.T @ d) / n
        eig_X = sym_eig(X)
        eig_Delta = sym_eig(Delta)
        qxt, qdt = eig_X.vectors.T, eig_Delta.vectors.T
        lam = np.zeros(X.shape[0] * Delta.shape[0])
        for e in range(n):
            g = np.outer(d[e], x[e]).ravel(order="F")
            proj = kron_matvec(qxt, qdt, g)
            lam += proj * proj
        lam /= n
        blocks.append(CurvatureBlock(layer_index=cap.layer_index, X=X,
                                     Delta=Delta, eig_X=eig_X,
                                     eig_Delta=eig_Delta,
                                     lambda_corrected=lam, damping=0.0))
    lam_damp = damping_policy(blocks)
    return [replace(b, damping=lam_damp) for b in blocks]


def _block_spans(blocks: list[CurvatureBlock]) -> list[tuple[int, int]]:
    spans, pos = [], 0
    for b in blocks:
        spans.append((pos, pos + b.param_count))
        pos += b.param_count
    return spans


def ihvp_kfac(blocks: list[CurvatureBlock], v: np.ndarray,
              layers_used: list[int]) -> np.ndarray:
    """Damped inverse-curvature solve, layer by layer in the eigenbasis.

    Slices belonging to layers not in layers_used come back as zeros.
    """
    v = np.asarray(v, dtype=float)
    spans = _block_spans(blocks)
    total = spans[-1][1] if spans else 0
    if v.shape != (total,):
        raise InvalidInputError(f"vector length {v.shape} != {total}")
    index = {b.layer_index: i for i, b in enumerate(blocks)}
    for l in layers_used:
        if l not in index:
            raise InvalidInputError(f"unknown layer index {l}")
    out = np.zeros_like(v)
    for l in layers_used:
        b = blocks[index[l]]
        lo, hi = spans[index[l]]
        p, q = b.shape
        vm = v[lo:hi].reshape((p, q), order="F")
        rotated = b.eig_Delta.vectors.T @ vm @ b.eig_X.vectors
        denom = b.lambda_corrected.reshape((p, q), order="F") + b.damping
        if np.any(denom <= 0.0):
            raise NumericalFailureError(
                f"non-positive damped eigenvalue in layer {l}; "
                f"min = {float(denom.min()):g}")
        solved = b.eig_Delta.vectors @ (rotated / denom) @ b.eig_X.vectors.T
        out[lo:hi] = solved.ravel(order="F")
    return out


def ihvp_exact(hessian: np.ndarray, damping: float, v: np.ndarray) -> np.ndarray:
    """Solve (H + damping*I) u = v through the eigendecomposition of H."""
    v = np.asarray(v, dtype=float)
    eig = sym_eig(hessian)
    shifted = eig.values + damping
    if np.min(shifted) <= 0.0:
        raise NumericalFailureError(
            "damped Hessian is not positive definite; minimum eigenvalue "
            f"of H is {float(eig.values.min()):g} with damping {damping:g}")
    return eig.vectors @ ((eig.vectors.T @ v) / shifted)


def select_layers(blocks: list[CurvatureBlock], fraction: float) -> list[int]:
    """Lowest-variance layers first: rank by mean corrected eigenvalue.

    Returns ceil(fraction * n_layers) layer indices; ties keep the lower
    layer index.
    """
    if not (0.0 < fraction <= 1.0):
        raise InvalidInputError("fraction must be in (0, 1]")
    keyed = sorted(blocks, key=lambda b: (float(b.lambda_corrected.mean()),
                                          b.layer_index))
    k = math.ceil(fraction * len(blocks))
    return sorted(b.layer_index for b in keyed[:k])


@dataclass
class InfluenceComputation:
    """dq_dbeta output: alpha plus how it was obtained."""

    alpha: np.ndarray
    method: str
    damping: float
    layers_used: list[int]
    sample_factor: float


def _union_sample(domains: list[mo.Examples], sample_factor: float,
                  rng: np.random.Generator) -> mo.Examples:
    X = np.vstack([d.X for d in domains])
    y = np.concatenate([d.y for d in domains])
    if sample_factor == 1.0:
        return mo.Examples(X, y)
    k = math.ceil(sample_factor * X.shape[0])
    idx = np.sort(rng.choice(X.shape[0], size=k, replace=False))
    return mo.Examples(X[idx], y[idx])


def dq_dbeta(state: mo.ModelState, reference: mo.Examples,
             domains: list[mo.Examples], method: str, sample_factor: float,
             rng: np.random.Generator, *, rho: float = 1.0,
             exact_damping: float = DEFAULT_EXACT_DAMPING,
             damping_policy=default_damping_policy) -> InfluenceComputation:
    """Per-domain sensitivity of reference loss to the mixture weights.

    Computes the reference gradient once, one damped inverse-curvature
    solve, then a single inner product per domain. Curvature and domain
    gradients are estimated on without-replacement samples of size
    ceil(sample_factor * n); the trained model must be converged.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}")
    if not domains:
        raise InvalidInputError("no domains given")
    if not state.train_meta.converged:
        raise InvalidInputError(
            "model is not converged on the current mixture; influence at a "
            "non-optimal point is unreliable")
    if not (0.0 < sample_factor <= 1.0):
        raise InvalidInputError("sample_factor must be in (0, 1]")

    l2 = state.spec.l2_reg
    theta = state.flat_weights()
    children = rng.spawn(len(domains) + 1)

    g_ref, _ = mo.grad(state, reference, include_reg=False)
    total = sum(d.n for d in domains)

    if method == "exact":
        union = _union_sample(domains, sample_factor, children[0])
        hess = mo.exact_hessian(state, union)
        damping = exact_damping
        u = ihvp_exact(hess, damping, g_ref)
        layers_used = list(range(state.spec.n_layers))
    else:
        union = _union_sample(domains, sample_factor, children[0])
        _, captures = mo.grad(state, union, include_reg=False)
        blocks = build_kfac(captures, damping_policy)
        layers_used = select_layers(blocks, rho)
        damping = damping_policy([b for b in blocks
                                  if b.layer_index in set(layers_used)])
        blocks = [replace(b, damping=damping) for b in blocks]
        u = ihvp_kfac(blocks, g_ref, layers_used)

    alpha = np.empty(len(domains))
    for j, (domain, child) in enumerate(zip(domains, children[1:])):
        g_full, _ = domain_gradient(state, domain, sample_factor, child)
        g_data = g_full - l2 * theta  # data term only; reg does not scale with beta
        alpha[j] = -(domain.n / total) * float(u @ g_data)
    return InfluenceComputation(alpha=alpha, method=method, damping=damping,
                                layers_used=layers_used,
                                sample_factor=sample_factor)


@dataclass
class ScaledBeta:
    gamma: float
    beta: np.ndarray
    degenerate: bool


def scale_beta(alpha, m: float) -> ScaledBeta:
    """Rescale the sensitivity vector so the largest |beta| equals m.

    gamma = m / max|alpha| and beta = -gamma * alpha; a degenerate
    (all-but-zero) alpha yields beta = 0 with gamma = 0 and a flag.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size == 0 or not np.all(np.isfinite(alpha)):
        raise InvalidInputError("alpha must be a nonempty finite vector")
    if not (np.isfinite(m) and m > 0):
        raise InvalidInputError("m must be positive")
    amax = float(np.max(np.abs(alpha)))
    if amax < DEGENERATE_ALPHA_TOL:
        return ScaledBeta(gamma=0.0, beta=np.zeros_like(alpha), degenerate=True)
    gamma = m / amax
    beta = np.clip(-gamma * alpha, -m, m)
    # pin every tied maximum to +-m exactly despite rounding in gamma*alpha
    at_max = np.abs(alpha) == amax
    beta[at_max] = -np.copysign(m, alpha[at_max])
    return ScaledBeta(gamma=gamma, beta=beta, degenerate=False)


@dataclass
class InfluenceReport:
    """Everything worth persisting about one influence computation."""

    alpha: np.ndarray
    gamma: float
    beta: np.ndarray
    m: float
    method: str
    layers_used: list[int]
    sample_factor: float
    damping: float
    degenerate: bool

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "m": self.m,
            "sigma": self.sample_factor,
            "lambda": self.damping,
            "layers_used": list(self.layers_used),
            "alpha": [float(a) for a in self.alpha],
            "gamma": self.gamma,
            "beta": [float(b) for b in self.beta],
            "degenerate_flag": self.degenerate,
        }


def make_report(comp: InfluenceComputation, scaled: ScaledBeta,
                m: float) -> InfluenceReport:
    return InfluenceReport(alpha=comp.alpha, gamma=scaled.gamma,
                           beta=scaled.beta, m=m, method=comp.method,
                           layers_used=comp.layers_used,
                           sample_factor=comp.sample_factor,
                           damping=comp.damping, degenerate=scaled.degenerate)
