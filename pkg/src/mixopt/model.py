"""Dense softmax classifiers with deterministic full-batch training.

The model family covers multinomial logistic regression (a single dense
layer) and small MLPs with tanh/relu hidden layers. Besides the usual
loss/gradient plumbing this module provides:

  * per-layer capture of input activations and backpropagated errors,
    whose per-example outer product equals that example's weight gradient;
  * analytic Hessian-vector products (forward-over-reverse), from which an
    exact dense Hessian is materialized for small parameter counts;
  * full-batch gradient descent with backtracking line search, seeded and
    bitwise reproducible.

Flat parameter vectors concatenate the per-layer weight matrices in
column-major (Fortran) order, so a layer's slice of length out*fan_in
reshapes back to (out, fan_in) with order="F".
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .linalg import seeded_rng

ACTIVATIONS = ("tanh", "relu", "none")
BIAS_MODES = ("fold", "none")

EXACT_HESSIAN_MAX_PARAMS = 4000

_ARMIJO_C = 1e-4
_MIN_STEP = 1e-18
_MAX_STEP = 1e6


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: layer (in, out) dims, activation, l2, bias."""

    layer_dims: tuple[tuple[int, int], ...]
    activation: str = "tanh"
    l2_reg: float = 0.0
    bias: str = "fold"

    def __post_init__(self):
        if not self.layer_dims:
            raise InvalidInputError("model needs at least one layer")
        for (din, dout) in self.layer_dims:
            if din < 1 or dout < 1:
                raise InvalidInputError(f"bad layer dims ({din}, {dout})")
        for (_, dout), (din, _) in zip(self.layer_dims, self.layer_dims[1:]):
            if dout != din:
                raise InvalidInputError("layer dims do not chain")
        if self.layer_dims[-1][1] < 2:
            raise InvalidInputError("final layer must emit >= 2 classes")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.bias not in BIAS_MODES:
            raise InvalidInputError(f"unknown bias mode {self.bias!r}")
        if not np.isfinite(self.l2_reg) or self.l2_reg < 0:
            raise InvalidInputError("l2_reg must be finite and >= 0")

    @property
    def n_features(self) -> int:
        return self.layer_dims[0][0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1][1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)

    def weight_shapes(self) -> list[tuple[int, int]]:
        extra = 1 if self.bias == "fold" else 0
        return [(dout, din + extra) for (din, dout) in self.layer_dims]

    def param_count(self) -> int:
        return sum(r * c for r, c in self.weight_shapes())


def logistic_spec(n_features: int, n_classes: int, l2_reg: float = 0.0,
                  bias: str = "fold") -> ModelSpec:
    """Multinomial logistic regression spec (single dense layer)."""
    return ModelSpec(layer_dims=((n_features, n_classes),), activation="none",
                     l2_reg=l2_reg, bias=bias)


def mlp_spec(n_features: int, hidden: tuple[int, ...], n_classes: int,
             activation: str = "tanh", l2_reg: float = 0.0,
             bias: str = "fold") -> ModelSpec:
    dims = []
    din = n_features
    for h in hidden:
        dims.append((din, h))
        din = h
    dims.append((din, n_classes))
    return ModelSpec(layer_dims=tuple(dims), activation=activation,
                     l2_reg=l2_reg, bias=bias)


@dataclass(frozen=True)
class Examples:
    """A labeled example set; optional per-example weights for reweighted losses.

    Without weights, losses are per-example means (implicit weight 1/n).
    """

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=np.int64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.ndim != 2:
            raise InvalidInputError("X must be 2-D (n_examples, n_features)")
        if y.shape != (X.shape[0],):
            raise InvalidInputError("y must be 1-D with one label per row of X")
        if X.shape[0] == 0:
            raise InvalidInputError("example set is empty")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("features contain non-finite values")
        if np.any(y < 0):
            raise InvalidInputError("labels must be nonnegative class indices")
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            object.__setattr__(self, "w", w)
            if w.shape != (X.shape[0],) or not np.all(np.isfinite(w)):
                raise InvalidInputError("weights must be finite, one per example")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def effective_weights(self) -> np.ndarray:
        if self.w is not None:
            return self.w
        return np.full(self.n, 1.0 / self.n)

    def subset(self, idx) -> "Examples":
        w = self.w[idx] if self.w is not None else None
        return Examples(self.X[idx], self.y[idx], w)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.0
    max_iters: int = 50_000
    tol: float = 1e-6
    seed: int = 0


@dataclass
class TrainMeta:
    grad_norm: float
    iterations: int
    converged: bool


@dataclass
class ModelState:
    spec: ModelSpec
    weights: list[np.ndarray]
    train_meta: TrainMeta = field(
        default_factory=lambda: TrainMeta(np.inf, 0, False))

    def __post_init__(self):
        shapes = self.spec.weight_shapes()
        if [w.shape for w in self.weights] != shapes:
            raise InvalidInputError(
                f"weight shapes {[w.shape for w in self.weights]} "
                f"do not match spec {shapes}")
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise InvalidInputError("weights contain non-finite values")

    def param_count(self) -> int:
        return self.spec.param_count()

    def flat_weights(self) -> np.ndarray:
        return _pack(self.weights)

    def with_flat_weights(self, flat: np.ndarray) -> "ModelState":
        return replace(self, weights=_unpack(self.spec, flat))


@dataclass
class LayerCapture:
    """Per-example layer inputs and error signals from one backward pass.

    For example e, outer(delta[e], x[e]) is e's weight gradient for this
    layer (of the unweighted per-example loss, regularizer excluded).
    """

    layer_index: int
    x: np.ndarray      # (n, fan_in) inputs, bias column included when folded
    delta: np.ndarray  # (n, fan_out)


def _pack(mats: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([m.ravel(order="F") for m in mats])


def _unpack(spec: ModelSpec, flat: np.ndarray) -> list[np.ndarray]:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (spec.param_count(),):
        raise InvalidInputError(
            f"flat vector length {flat.shape} != {spec.param_count()}")
    out, pos = [], 0
    for (r, c) in spec.weight_shapes():
        out.append(flat[pos:pos + r * c].reshape((r, c), order="F"))
        pos += r * c
    return out


def layer_slices(spec: ModelSpec) -> list[tuple[int, int, tuple[int, int]]]:
    """(start, stop, shape) of each layer inside the flat parameter vector."""
    spans, pos = [], 0
    for (r, c) in spec.weight_shapes():
        spans.append((pos, pos + r * c, (r, c)))
        pos += r * c
    return spans


def _augment(a: np.ndarray, spec: ModelSpec, fill: float = 1.0) -> np.ndarray:
    if spec.bias != "fold":
        return a
    col = np.full((a.shape[0], 1), fill)
    return np.hstack([a, col])


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_prime(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(float)
    return np.ones_like(z)


def _forward_all(weights: list[np.ndarray], spec: ModelSpec, X: np.ndarray):
    """Returns (layer inputs incl. bias col, pre-activations, hidden acts, probs)."""
    inputs, zs, acts = [], [], []
    a = X
    last = len(weights) - 1
    for l, w in enumerate(weights):
        ain = _augment(a, spec)
        inputs.append(ain)
        z = ain @ w.T
        zs.append(z)
        if l < last:
            a = _act(z, spec.activation)
            acts.append(a)
    zl = zs[-1]
    m = zl.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(zl - m).sum(axis=1, keepdims=True))
    logp = zl - lse
    return inputs, zs, acts, logp


def _check_examples(model: ModelState, data: Examples):
    if data.X.shape[1] != model.spec.n_features:
        raise InvalidInputError(
            f"feature dim {data.X.shape[1]} != model input {model.spec.n_features}")
    if np.any(data.y >= model.spec.n_classes):
        raise InvalidInputError("label out of range for model class count")


def forward(model: ModelState, x) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != model.spec.n_features:
        raise InvalidInputError(
            f"feature vector length {x.size} != {model.spec.n_features}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("features contain non-finite values")
    _, _, _, logp = _forward_all(model.weights, model.spec, x[None, :])
    return np.exp(logp[0])


def _reg_value(spec: ModelSpec, weights: list[np.ndarray]) -> float:
    if spec.l2_reg == 0.0:
        return 0.0
    return 0.5 * spec.l2_reg * sum(float(np.sum(w * w)) for w in weights)


def loss(model: ModelState, data: Examples, include_reg: bool = True) -> float:
    """Weighted cross-entropy (mean by default) plus the l2 penalty."""
    _check_examples(model, data)
    _, _, _, logp = _forward_all(model.weights, model.spec, data.X)
    w = data.effective_weights()
    ce = -float(np.dot(w, logp[np.arange(data.n), data.y]))
    if include_reg:
        ce += _reg_value(model.spec, model.weights)
    return ce


def _backward(weights, spec, inputs, zs, acts, logp, y, w,
              include_reg: bool):
    """Shared backprop: returns (per-layer grads, per-layer raw deltas)."""
    n, k = logp.shape
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    deltas = [None] * len(weights)
    grads = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        deltas[l] = delta
        g = (w[:, None] * delta).T @ inputs[l]
        if include_reg and spec.l2_reg:
            g = g + spec.l2_reg * weights[l]
        grads[l] = g
        if l > 0:
            din = spec.layer_dims[l][0]
            da = delta @ weights[l][:, :din]
            delta = da * _act_prime(zs[l - 1], acts[l - 1], spec.activation)
    return grads, deltas


def grad(model: ModelState, data: Examples, include_reg: bool = True):
    """Flat gradient of `loss` plus per-layer captures.

    Captures hold the raw per-example inputs/deltas, so averaging their
    outer products (plus the l2 term) reproduces the returned gradient.
    """
    _check_examples(model, data)
    inputs, zs, acts, logp = _forward_all(model.weights, model.spec, data.X)
    w = data.effective_weights()
    grads, deltas = _backward(model.weights, model.spec, inputs, zs, acts,
                              logp, data.y, w, include_reg)
    captures = [LayerCapture(layer_index=l, x=inputs[l], delta=deltas[l])
                for l in range(len(model.weights))]
    return _pack(grads), captures


def data_gradient(model: ModelState, data: Examples):
    """Gradient of the data term only (no l2), with captures."""
    return grad(model, data, include_reg=False)


def hvp(model: ModelState, data: Examples, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of `loss` via forward-over-reverse.

    Propagates the tangent through the forward and backward passes, so no
    finite differencing is involved; the l2 term contributes l2 * v.
    """
    _check_examples(model, data)
    spec = model.spec
    weights = model.weights
    tangents = _unpack(spec, np.asarray(v, dtype=float))
    inputs, zs, acts, logp = _forward_all(weights, spec, data.X)
    n = data.n
    w = data.effective_weights()
    last = len(weights) - 1

    # forward tangent sweep
    r_inputs, r_zs = [], []
    ra = np.zeros_like(data.X)
    for l, (wl, vl) in enumerate(zip(weights, tangents)):
        rin = _augment(ra, spec, fill=0.0)
        r_inputs.append(rin)
        rz = rin @ wl.T + inputs[l] @ vl.T
        r_zs.append(rz)
        if l < last:
            rz = rz * _act_prime(zs[l], acts[l], spec.activation)
            ra = rz

    probs = np.exp(logp)
    delta = probs.copy()
    delta[np.arange(n), data.y] -= 1.0
    # R[softmax - onehot] = (diag(p) - p p^T) R[z]
    rdelta = probs * (r_zs[last] - (probs * r_zs[last]).sum(axis=1, keepdims=True))

    hmats = [None] * len(weights)
    for l in range(last, -1, -1):
        h = (w[:, None] * rdelta).T @ inputs[l] + (w[:, None] * delta).T @ r_inputs[l]
        if spec.l2_reg:
            h = h + spec.l2_reg * tangents[l]
        hmats[l] = h
        if l > 0:
            din = spec.layer_dims[l][0]
            da = delta @ weights[l][:, :din]
            rda = rdelta @ weights[l][:, :din] + delta @ tangents[l][:, :din]
            zp, ap = zs[l - 1], acts[l - 1]
            sp = _act_prime(zp, ap, spec.activation)
            if spec.activation == "tanh":
                spp = -2.0 * ap * sp
            else:
                spp = None  # relu / none have zero second derivative a.e.
            rprev = rda * sp
            if spp is not None:
                rz_hidden = r_zs[l - 1]
                rprev = rprev + da * spp * rz_hidden
            rdelta = rprev
            delta = da * sp
    return _pack(hmats)


def exact_hessian(model: ModelState, data: Examples) -> np.ndarray:
    """Dense Hessian of `loss`, materialized column-by-column from `hvp`.

    Refused for models above EXACT_HESSIAN_MAX_PARAMS parameters.
    """
    m = model.param_count()
    if m > EXACT_HESSIAN_MAX_PARAMS:
        raise InvalidInputError(
            f"exact Hessian refused: {m} parameters exceeds the "
            f"{EXACT_HESSIAN_MAX_PARAMS}-parameter guard")
    h = np.empty((m, m))
    e = np.zeros(m)
    for j in range(m):
        e[j] = 1.0
        h[:, j] = hvp(model, data, e)
        e[j] = 0.0
    return 0.5 * (h + h.T)


def _init_weights(spec: ModelSpec, seed: int) -> list[np.ndarray]:
    rng = seeded_rng(seed)
    return [rng.uniform(-0.05, 0.05, size=shape)
            for shape in spec.weight_shapes()]


def train_to_convergence(spec: ModelSpec, data: Examples,
                         cfg: TrainConfig = TrainConfig()) -> ModelState:
    """Full-batch gradient descent with backtracking (Armijo) line search.

    Starts from a small seeded uniform initialization and stops when the
    gradient infinity-norm drops below cfg.tol, returning converged=True;
    otherwise converged=False after cfg.max_iters accepted steps. The whole
    trajectory is deterministic in (spec, data, cfg).
    """
    state = ModelState(spec, _init_weights(spec, cfg.seed))
    f = loss(state, data)
    if not np.isfinite(f):
        raise NumericalFailureError("non-finite loss at iteration 0")
    g, _ = grad(state, data)
    theta = state.flat_weights()
    step = cfg.learning_rate
    it = 0
    ginf = float(np.max(np.abs(g)))
    while it < cfg.max_iters and ginf > cfg.tol:
        if not np.all(np.isfinite(g)):
            raise NumericalFailureError(f"non-finite gradient at iteration {it}")
        gsq = float(g @ g)
        stalled = False
        while True:
            cand = theta - step * g
            if np.all(np.isfinite(cand)):
                f_new = loss(state.with_flat_weights(cand), data)
                if np.isfinite(f_new) and f_new <= f - _ARMIJO_C * step * gsq:
                    break
            step *= 0.5
            if step < _MIN_STEP:
                stalled = True
                break
        if stalled:
            break  # cannot make further float-representable progress
        theta, f = cand, f_new
        it += 1
        if not np.isfinite(f):
            raise NumericalFailureError(f"non-finite loss at iteration {it}")
        state = state.with_flat_weights(theta)
        g, _ = grad(state, data)
        ginf = float(np.max(np.abs(g)))
        step = min(step * 2.0, _MAX_STEP)
    state.train_meta = TrainMeta(grad_norm=ginf, iterations=it,
                                 converged=bool(ginf <= cfg.tol))
    return state


CHECKPOINT_VERSION = 1


def state_to_json_dict(state: ModelState) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "spec": {
            "layer_dims": [list(d) for d in state.spec.layer_dims],
            "activation": state.spec.activation,
            "l2_reg": state.spec.l2_reg,
            "bias": state.spec.bias,
        },
        "weights": [w.ravel(order="F").tolist() for w in state.weights],
        "train_meta": {
            "grad_norm": state.train_meta.grad_norm,
            "iterations": state.train_meta.iterations,
            "converged": state.train_meta.converged,
        },
    }


def state_from_json_dict(doc: dict) -> ModelState:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {doc.get('version')!r}")
    s = doc["spec"]
    spec = ModelSpec(layer_dims=tuple(tuple(d) for d in s["layer_dims"]),
                     activation=s["activation"], l2_reg=s["l2_reg"],
                     bias=s["bias"])
    weights = [np.asarray(flat, dtype=float).reshape(shape, order="F")
               for flat, shape in zip(doc["weights"], spec.weight_shapes())]
    meta = doc["train_meta"]
    return ModelState(spec, weights,
                      TrainMeta(grad_norm=float(meta["grad_norm"]),
                                iterations=int(meta["iterations"]),
                                converged=bool(meta["converged"])))
