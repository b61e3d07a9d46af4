import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixopt.errors import InvalidInputError
from mixopt.linalg import EigenPair, kron_matvec, seeded_rng, sym_eig


def test_sym_eig_identity():
    eig = sym_eig(np.eye(3))
    assert np.allclose(eig.values, [1.0, 1.0, 1.0])
    assert np.max(np.abs(eig.vectors.T @ eig.vectors - np.eye(3))) <= 1e-8


def test_sym_eig_diagonal():
    eig = sym_eig(np.diag([4.0, 1.0]))
    assert np.allclose(eig.values, [4.0, 1.0])
    # axis-aligned up to sign
    assert np.allclose(np.abs(eig.vectors), np.eye(2), atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_sym_eig_reconstruction_random(seed):
    rng = seeded_rng(seed)
    a = rng.standard_normal((8, 8))
    a = a + a.T
    eig = sym_eig(a)
    rel = np.linalg.norm(eig.reconstruct() - a) / np.linalg.norm(a)
    assert rel <= 1e-7
    assert np.max(np.abs(eig.vectors.T @ eig.vectors - np.eye(8))) <= 1e-8
    assert np.all(np.diff(eig.values) <= 0)


def test_sym_eig_matches_lapack_eigenvalues():
    rng = seeded_rng(9)
    a = rng.standard_normal((12, 12))
    a = a + a.T
    ours = sym_eig(a).values
    lapack = np.linalg.eigvalsh(a)[::-1]
    assert np.allclose(ours, lapack, rtol=1e-10, atol=1e-10)


def test_sym_eig_trivial_sizes():
    assert sym_eig(np.array([[5.0]])).values[0] == 5.0
    eig = sym_eig(np.zeros((4, 4)))
    assert np.all(eig.values == 0.0)


def test_sym_eig_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(InvalidInputError):
        sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))  # grossly asymmetric


def test_eigenpair_sorting_is_descending_with_stable_ties():
    eig = sym_eig(np.diag([2.0, 7.0, 2.0]))
    assert list(eig.values) == [7.0, 2.0, 2.0]
    # tied eigenvalues keep original index order: columns 0 then 2
    assert abs(eig.vectors[0, 1]) == 1.0
    assert abs(eig.vectors[2, 2]) == 1.0


def test_kron_matvec_identity_and_scalar():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(kron_matvec(np.eye(2), np.eye(2), v), v)
    assert np.allclose(kron_matvec(np.array([[2.0]]), np.array([[3.0]]),
                                   np.array([5.0])), [30.0])


def test_kron_matvec_random_vs_materialized():
    rng = seeded_rng(5)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((2, 2))
    v = rng.standard_normal(6)
    full = np.kron(a, b) @ v
    got = kron_matvec(a, b, v)
    assert np.max(np.abs(got - full)) <= 1e-10 * max(1.0, np.max(np.abs(full)))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 6), st.integers(0, 10_000))
def test_kron_matvec_property_all_dims(ra, ca, rb, cb, seed):
    rng = seeded_rng(seed)
    a = rng.standard_normal((ra, ca))
    b = rng.standard_normal((rb, cb))
    v = rng.standard_normal(ca * cb)
    full = np.kron(a, b) @ v
    got = kron_matvec(a, b, v)
    scale = max(1.0, float(np.max(np.abs(full))))
    assert np.max(np.abs(got - full)) <= 1e-10 * scale


def test_kron_matvec_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        kron_matvec(np.eye(2), np.eye(2), np.zeros(5))


def test_rng_determinism_and_divergence():
    a = seeded_rng(0).uniform(size=100)
    b = seeded_rng(0).uniform(size=100)
    c = seeded_rng(1).uniform(size=100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_law_of_large_numbers():
    draws = seeded_rng(7).uniform(size=100_000)
    assert abs(draws.mean() - 0.5) < 0.01
