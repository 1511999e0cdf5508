import math

import numpy as np
import pytest

from nmpgp import gp_core
from nmpgp.gp_core import FitOptions, GpError, GpHyperparams


def _oracle_lml(X, y, sf2, sn2, ls):
    """Dense-algebra evidence, written out independently of the library."""
    n = len(y)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            K[i, j] = sf2 * math.exp(-0.5 * sum(((X[i, d] - X[j, d]) / ls[d]) ** 2 for d in range(X.shape[1])))
    C = K + sn2 * np.eye(n)
    sign, logdet = np.linalg.slogdet(C)
    assert sign > 0
    return -0.5 * y @ np.linalg.solve(C, y) - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)


def test_kernel_point_and_matrix_agree(rng):
    h = GpHyperparams.from_natural(2.0, 0.1, [0.5, 3.0])
    X = rng.normal(size=(4, 2))
    K = gp_core.kernel_matrix(X, X, h)
    assert K[1, 2] == pytest.approx(gp_core.kernel_ard(X[1], X[2], h))
    assert np.allclose(np.diag(K), 2.0)
    with pytest.raises(ValueError):
        gp_core.kernel_ard(X[0], X[1, :1], h)


def test_lml_matches_dense_oracle(rng):
    for _ in range(5):
        n, d = rng.integers(3, 9), rng.integers(1, 4)
        X, y = rng.normal(size=(n, d)), rng.normal(size=n)
        sf2, sn2, ls = rng.uniform(0.5, 2), rng.uniform(0.05, 0.5), rng.uniform(0.3, 2, size=d)
        v, _ = gp_core.log_marginal_likelihood(X, y, GpHyperparams.from_natural(sf2, sn2, ls))
        assert v == pytest.approx(_oracle_lml(X, y, sf2, sn2, ls), rel=1e-10)


def test_stable_cholesky_jitter_policy():
    A = np.ones((3, 3))  # rank one
    L, jitter = gp_core.stable_cholesky(A)
    assert jitter >= 1e-10 * np.trace(A) / 3
    np.testing.assert_allclose(L @ L.T, A + jitter * np.eye(3), atol=1e-12)
    L0, j0 = gp_core.stable_cholesky(np.eye(3))
    assert j0 == 0.0
    with pytest.raises(GpError):
        gp_core.stable_cholesky(-np.eye(3))


def test_predict_recovers_smooth_function(rng):
    X = np.linspace(0, 6, 40)[:, None]
    y = np.sin(X[:, 0]) + 0.05 * rng.normal(size=40)
    model = gp_core.fit(X, y, opts=FitOptions(restarts=2))
    Xs = np.linspace(0.5, 5.5, 11)[:, None]
    mean, var = gp_core.predict(model, Xs)
    assert np.max(np.abs(mean - np.sin(Xs[:, 0]))) < 0.1
    assert np.all(var > 0)
    _, lat = gp_core.predict(model, Xs, include_noise=False)
    np.testing.assert_allclose(var - lat, model.hyper.noise_var)


def test_fit_is_deterministic_and_reports(rng):
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    a = gp_core.fit(X, y, opts=FitOptions(seed=4))
    b = gp_core.fit(X, y, opts=FitOptions(seed=4))
    assert a.hyper.to_vector().tolist() == b.hyper.to_vector().tolist()
    assert set(a.fit_info) >= {"restart", "restart_values", "grad_norm", "iterations"}
    assert a.fit_info["restart"] == int(np.argmax(a.fit_info["restart_values"]))


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        gp_core.fit(np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        gp_core.fit(np.array([[0.0], [np.nan]]), np.zeros(2))


def test_ard_relevance_sums_to_one():
    rel = gp_core.ard_relevance(GpHyperparams.from_natural(1, 0.1, [1.0, 2.0, 4.0]))
    assert rel.sum() == pytest.approx(1.0)
    assert rel[0] > rel[1] > rel[2]


def test_serialization_is_bit_identical(tmp_path, rng):
    X, y = rng.normal(size=(25, 3)), rng.normal(size=25)
    model = gp_core.fit(X, y, opts=FitOptions(restarts=1))
    path = tmp_path / "gp.json"
    gp_core.save_model(model, path)
    back = gp_core.load_model(path)
    Xs = rng.normal(size=(7, 3))
    m1, v1 = gp_core.predict(model, Xs)
    m2, v2 = gp_core.predict(back, Xs)
    assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()


def test_serialization_rejects_foreign_documents():
    with pytest.raises(ValueError):
        gp_core.model_from_dict({"format": "other"})
