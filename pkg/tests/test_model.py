import math

import numpy as np
import pytest

from mixopt import model as mo
from mixopt.errors import InvalidInputError, NumericalFailureError
from mixopt.linalg import seeded_rng


def random_state(spec, seed, scale=0.5):
    rng = seeded_rng(seed)
    return mo.ModelState(
        spec, [rng.uniform(-scale, scale, s) for s in spec.weight_shapes()])


def random_data(spec, n, seed):
    rng = seeded_rng(seed)
    X = rng.standard_normal((n, spec.n_features))
    y = rng.integers(0, spec.n_classes, n)
    return mo.Examples(X, y)


def fd_gradient(state, data, h=1e-5):
    theta = state.flat_weights()
    out = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (mo.loss(state.with_flat_weights(tp), data)
                  - mo.loss(state.with_flat_weights(tm), data)) / (2 * h)
    return out


# ------------------------------------------------------------------ forward

def test_forward_zero_weights_is_uniform():
    spec = mo.logistic_spec(3, 4)
    state = mo.ModelState(spec, [np.zeros(s) for s in spec.weight_shapes()])
    p = mo.forward(state, np.array([0.3, -1.0, 2.0]))
    assert np.allclose(p, 0.25)


def test_forward_saturates_on_huge_logit():
    spec = mo.logistic_spec(1, 3, bias="none")
    w = np.zeros((3, 1))
    w[0, 0] = 50.0
    state = mo.ModelState(spec, [w])
    p = mo.forward(state, np.array([1.0]))
    assert p[0] >= 1.0 - 1e-6


def test_forward_matches_naive_implementation():
    # independent oracle: per-example pure-python forward pass
    spec = mo.mlp_spec(4, (5,), 3, activation="tanh")
    state = random_state(spec, 3)
    x = seeded_rng(4).standard_normal(4)
    a = list(x)
    for li, w in enumerate(state.weights):
        a = a + [1.0]
        z = [sum(w[r][c] * a[c] for c in range(len(a)))
             for r in range(w.shape[0])]
        a = [math.tanh(v) for v in z] if li == 0 else z
    exps = [math.exp(v - max(z)) for v in z]
    naive = [e / sum(exps) for e in exps]
    p = mo.forward(state, x)
    assert np.allclose(p, naive, atol=1e-12)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_forward_rejects_bad_input():
    spec = mo.logistic_spec(3, 2)
    state = mo.ModelState(spec, [np.zeros(s) for s in spec.weight_shapes()])
    with pytest.raises(InvalidInputError):
        mo.forward(state, np.zeros(4))


# --------------------------------------------------------------------- loss

def test_loss_uniform_prediction_is_log_k():
    spec = mo.logistic_spec(2, 5)
    state = mo.ModelState(spec, [np.zeros(s) for s in spec.weight_shapes()])
    data = random_data(spec, 20, 0)
    assert abs(mo.loss(state, data) - math.log(5)) <= 1e-12


def test_loss_binary_zero_weights_is_log_two():
    spec = mo.logistic_spec(1, 2, bias="none")
    state = mo.ModelState(spec, [np.zeros((2, 1))])
    data = mo.Examples(np.array([[1.0]]), np.array([1]))
    assert abs(mo.loss(state, data) - math.log(2)) <= 1e-12


def test_loss_perfect_predictor_is_tiny():
    spec = mo.logistic_spec(2, 2, bias="none")
    state = mo.ModelState(spec, [np.array([[40.0, 0.0], [0.0, 40.0]])])
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
    y = np.array([0, 1, 0])
    assert mo.loss(state, mo.Examples(X, y)) <= 1e-6


def test_loss_rejects_empty_and_out_of_range():
    spec = mo.logistic_spec(2, 2)
    state = mo.ModelState(spec, [np.zeros(s) for s in spec.weight_shapes()])
    with pytest.raises(InvalidInputError):
        mo.Examples(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(InvalidInputError):
        mo.loss(state, mo.Examples(np.zeros((1, 2)), np.array([2])))


# --------------------------------------------------------------------- grad

def test_grad_binary_closed_form():
    # two-class softmax, single feature x=1, true class 1, zero weights:
    # per-class residuals are (+0.5, -0.5)
    spec = mo.logistic_spec(1, 2, bias="none")
    state = mo.ModelState(spec, [np.zeros((2, 1))])
    g, _ = mo.grad(state, mo.Examples(np.array([[1.0]]), np.array([1])))
    assert np.allclose(g, [0.5, -0.5])


@pytest.mark.parametrize("spec", [
    mo.logistic_spec(5, 3, l2_reg=0.01),
    mo.mlp_spec(5, (4,), 3, activation="tanh", l2_reg=0.003),
    mo.mlp_spec(5, (6, 4), 3, activation="relu"),
    mo.mlp_spec(4, (3,), 2, activation="none", bias="none"),
])
def test_grad_matches_finite_differences(spec):
    state = random_state(spec, 1)
    data = random_data(spec, 30, 2)
    g, _ = mo.grad(state, data)
    fd = fd_gradient(state, data)
    rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
    assert rel <= 1e-5


def test_grad_at_optimum_is_small():
    spec = mo.logistic_spec(3, 2, l2_reg=0.05)
    data = random_data(spec, 50, 7)
    trained = mo.train_to_convergence(spec, data, mo.TrainConfig(tol=1e-8))
    g, _ = mo.grad(trained, data)
    assert np.max(np.abs(g)) <= 1e-8


def test_capture_outer_product_is_per_example_gradient():
    spec = mo.mlp_spec(4, (3,), 3, activation="tanh")
    state = random_state(spec, 5)
    data = random_data(spec, 12, 6)
    _, captures = mo.grad(state, data)
    for e in [0, 5, 11]:
        g_e, _ = mo.grad(state, data.subset([e]), include_reg=False)
        stacked = np.concatenate([np.outer(c.delta[e], c.x[e]).ravel(order="F")
                                  for c in captures])
        assert np.max(np.abs(stacked - g_e)) <= 1e-8


def test_capture_mean_reproduces_flat_gradient():
    spec = mo.mlp_spec(4, (3,), 2, activation="relu")
    state = random_state(spec, 8)
    data = random_data(spec, 25, 9)
    g, captures = mo.grad(state, data, include_reg=False)
    recon = np.concatenate([(c.delta.T @ c.x / data.n).ravel(order="F")
                            for c in captures])
    assert np.max(np.abs(recon - g)) <= 1e-8


# -------------------------------------------------------------------- train

def test_train_separable_converges_below_log_two():
    rng = seeded_rng(3)
    X = np.vstack([rng.standard_normal((40, 2)) + [3, 0],
                   rng.standard_normal((40, 2)) - [3, 0]])
    y = np.array([0] * 40 + [1] * 40)
    spec = mo.logistic_spec(2, 2, l2_reg=1e-2)
    trained = mo.train_to_convergence(spec, mo.Examples(X, y))
    assert trained.train_meta.converged
    assert mo.loss(trained, mo.Examples(X, y)) < math.log(2)


def test_train_xor_settles_at_uniform():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    spec = mo.logistic_spec(2, 2, l2_reg=1e-3)
    trained = mo.train_to_convergence(spec, mo.Examples(X, y))
    assert trained.train_meta.converged
    assert abs(mo.loss(trained, mo.Examples(X, y), include_reg=False)
               - math.log(2)) <= 1e-3


def test_train_is_bitwise_deterministic():
    spec = mo.logistic_spec(3, 3, l2_reg=1e-2)
    data = random_data(spec, 60, 11)
    cfg = mo.TrainConfig(seed=4)
    a = mo.train_to_convergence(spec, data, cfg)
    b = mo.train_to_convergence(spec, data, cfg)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


def test_train_two_seeds_reach_same_optimum():
    # strictly convex: the optimum is unique, so seeds only move the path
    spec = mo.logistic_spec(4, 3, l2_reg=5e-2)
    data = random_data(spec, 80, 13)
    a = mo.train_to_convergence(spec, data, mo.TrainConfig(seed=0, tol=1e-9))
    b = mo.train_to_convergence(spec, data, mo.TrainConfig(seed=99, tol=1e-9))
    assert np.max(np.abs(a.flat_weights() - b.flat_weights())) <= 1e-4


def test_train_non_finite_loss_raises_with_iteration():
    # enough parameters that the l2 term overflows at the seeded init
    spec = mo.logistic_spec(2000, 2, l2_reg=1.7e308)
    data = mo.Examples(np.zeros((2, 2000)), np.array([0, 1]))
    with pytest.raises(NumericalFailureError, match="iteration 0"):
        mo.train_to_convergence(spec, data)


def test_train_respects_iteration_budget():
    spec = mo.logistic_spec(3, 3, l2_reg=1e-2)
    data = random_data(spec, 40, 17)
    trained = mo.train_to_convergence(spec, data,
                                      mo.TrainConfig(max_iters=3, tol=1e-12))
    assert not trained.train_meta.converged
    assert trained.train_meta.iterations == 3


# ------------------------------------------------------------------ hessian

def test_hessian_binary_closed_form():
    # p = 0.5 at w=0, x=1: per-class blocks are +-p(1-p)
    spec = mo.logistic_spec(1, 2, bias="none")
    state = mo.ModelState(spec, [np.zeros((2, 1))])
    h = mo.exact_hessian(state, mo.Examples(np.array([[1.0]]), np.array([1])))
    assert np.allclose(h, [[0.25, -0.25], [-0.25, 0.25]])


def test_hessian_regularizer_only():
    # x = 0 kills every data contribution, leaving l2 * I
    spec = mo.logistic_spec(2, 2, l2_reg=0.3, bias="none")
    state = random_state(spec, 2)
    data = mo.Examples(np.zeros((3, 2)), np.array([0, 1, 0]))
    h = mo.exact_hessian(state, data)
    assert np.allclose(h, 0.3 * np.eye(4))


@pytest.mark.parametrize("spec", [
    mo.logistic_spec(4, 3, l2_reg=0.02),
    mo.mlp_spec(4, (4,), 3, activation="tanh", l2_reg=0.01),
])
def test_hessian_matches_fd_of_gradient(spec):
    state = random_state(spec, 21, scale=0.3)
    data = random_data(spec, 30, 22)
    h = mo.exact_hessian(state, data)
    assert np.max(np.abs(h - h.T)) <= 1e-9
    theta = state.flat_weights()
    step = 1e-5
    for j in range(0, theta.size, max(1, theta.size // 7)):  # spot checks
        tp, tm = theta.copy(), theta.copy()
        tp[j] += step
        tm[j] -= step
        gp, _ = mo.grad(state.with_flat_weights(tp), data)
        gm, _ = mo.grad(state.with_flat_weights(tm), data)
        col = (gp - gm) / (2 * step)
        denom = max(np.max(np.abs(col)), 1e-10)
        assert np.max(np.abs(h[:, j] - col)) / denom <= 1e-4


def test_hessian_guard_refuses_large_models():
    spec = mo.logistic_spec(2000, 3)
    state = mo.ModelState(spec, [np.zeros(s) for s in spec.weight_shapes()])
    data = mo.Examples(np.zeros((2, 2000)), np.array([0, 1]))
    with pytest.raises(InvalidInputError, match="6003"):
        mo.exact_hessian(state, data)


# --------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_is_exact():
    spec = mo.mlp_spec(3, (4,), 2, activation="relu", l2_reg=0.01)
    data = random_data(spec, 30, 30)
    trained = mo.train_to_convergence(spec, data, mo.TrainConfig(max_iters=50))
    doc = mo.state_to_json_dict(trained)
    back = mo.state_from_json_dict(doc)
    assert back.spec == trained.spec
    for wa, wb in zip(back.weights, trained.weights):
        assert np.array_equal(wa, wb)
    assert back.train_meta == trained.train_meta
    with pytest.raises(InvalidInputError):
        mo.state_from_json_dict({**doc, "version": 99})
