import json

import numpy as np
import pytest

from apnea_screen import svm
from apnea_screen.recording_store import APN, NOR
from apnea_screen.svm import (
    DimensionMismatch,
    SingleClassInput,
    SvmConfig,
    balance_classes,
    decision_function,
    dual_objective,
    kkt_violation,
    load_model,
    model_digest,
    predict,
    save_model,
    standardize,
    train,
)

from qp_oracle import pg_dual_solve

BACKENDS = svm.available_backends()


def random_dataset(rng, n=None, d=None, C=1.0):
    n = n or rng.integers(4, 13)
    d = d or rng.integers(1, 4)
    X = rng.normal(size=(int(n), int(d)))
    y = np.where(rng.random(int(n)) < 0.5, 1.0, -1.0)
    if np.all(y == y[0]):
        y[0] = -y[0]
    return X, y


# --- balancing and standardization -----------------------------------------

def test_balance_already_balanced_unchanged():
    rows = np.arange(8, dtype=float).reshape(4, 2)
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    out_rows, out_labels = balance_classes(rows, labels)
    assert np.array_equal(out_rows, rows)
    assert np.array_equal(out_labels, labels)


def test_balance_duplicates_minority_uniformly():
    rows = np.arange(40, dtype=float).reshape(40, 1)
    labels = np.concatenate([np.ones(10), -np.ones(30)])
    out_rows, out_labels = balance_classes(rows, labels)
    assert (out_labels > 0).sum() == 30
    assert (out_labels < 0).sum() == 30
    minority_rows = out_rows[out_labels > 0].ravel()
    # each original minority row appears exactly three times
    for v in rows[:10].ravel():
        assert (minority_rows == v).sum() == 3


def test_balance_partial_step_left_alone():
    # counts (10, 25): one extra pass -> 20 vs 25, remainder < minority size
    rows = np.arange(35, dtype=float).reshape(35, 1)
    labels = np.concatenate([np.ones(10), -np.ones(25)])
    _, out_labels = balance_classes(rows, labels)
    assert (out_labels > 0).sum() == 20
    assert (out_labels < 0).sum() == 25


def test_balance_single_class_raises():
    with pytest.raises(SingleClassInput):
        balance_classes(np.zeros((4, 1)), -np.ones(4))


def test_standardize_drops_constant_columns():
    rows = np.column_stack([np.arange(6.0), np.full(6, 3.0)])
    tset = standardize(rows, np.array([1.0, -1.0] * 3))
    assert tset.kept.tolist() == [True, False]
    assert tset.rows.shape == (6, 1)
    assert tset.rows.mean() == pytest.approx(0.0, abs=1e-12)


# --- closed-form problems ----------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_two_point_problem_closed_form(backend):
    X = np.array([[1.0], [-1.0]])
    y = np.array([1.0, -1.0])
    gamma = 0.7
    tset = svm.TrainingSet(rows=X, labels=y, mean=np.zeros(1), std=np.ones(1),
                           kept=np.array([True]))
    model = train(tset, C=10.0, gamma=gamma, tol=1e-8, backend=backend)
    expected_alpha = 1.0 / (1.0 - np.exp(-4.0 * gamma))
    assert model.alphas == pytest.approx([expected_alpha, expected_alpha])
    assert model.bias == pytest.approx(0.0, abs=1e-9)
    assert len(model.support_vectors) == 2
    # boundary at 0: sign flips across it
    raw = np.array([[2.0], [-2.0], [0.0]])
    margins = decision_function(model, raw)
    assert margins[0] > 0 > margins[1]
    assert margins[2] == pytest.approx(0.0, abs=1e-9)
    label, margin = predict(model, np.array([-2.0]))
    assert label == NOR and margin < 0


@pytest.mark.parametrize("backend", BACKENDS)
def test_xor_is_fit_perfectly(backend):
    X = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    model = svm.fit(X, y, SvmConfig(C=10.0, gamma="auto"), tol=1e-8, backend=backend)
    margins = decision_function(model, X)
    assert np.array_equal(np.sign(margins), y)


def test_training_points_of_separable_set_keep_their_labels():
    rng = np.random.default_rng(12)
    X = np.concatenate([rng.normal(-3.0, 0.5, size=(20, 2)), rng.normal(3.0, 0.5, size=(20, 2))])
    y = np.concatenate([-np.ones(20), np.ones(20)])
    model = svm.fit(X, y, SvmConfig(C=100.0), tol=1e-6)
    assert np.array_equal(np.sign(decision_function(model, X)), y)


# --- dual invariants and the QP oracle ----------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_dual_feasibility_and_kkt_on_random_sets(backend):
    rng = np.random.default_rng(77)
    tol = 1e-4
    for _ in range(25):
        X, y = random_dataset(rng)
        C = float(rng.choice([0.5, 1.0, 10.0]))
        tset = standardize(*balance_classes(X, y))
        model = train(tset, C=C, gamma="auto", tol=tol, backend=backend)
        assert abs(float(model.alphas @ model.labels)) <= 1e-6
        assert model.alphas.min() > 0.0
        assert model.alphas.max() <= C + 1e-12
        assert kkt_violation(model, tset) <= tol


def test_dual_objective_matches_projected_gradient_oracle():
    rng = np.random.default_rng(1234)
    for _ in range(30):
        X, y = random_dataset(rng)
        C = float(rng.choice([0.5, 1.0, 5.0]))
        gamma = float(rng.uniform(0.2, 2.0))
        tset = svm.TrainingSet(rows=X, labels=y, mean=np.zeros(X.shape[1]),
                               std=np.ones(X.shape[1]), kept=np.ones(X.shape[1], dtype=bool))
        model = train(tset, C=C, gamma=gamma, tol=1e-6)
        _, oracle_obj = pg_dual_solve(X, y, C, gamma)
        smo_obj = dual_objective(model)
        assert abs(smo_obj - oracle_obj) <= 1e-4 * max(1.0, abs(oracle_obj))


def test_objective_is_monotone_across_smo_iterations():
    rng = np.random.default_rng(5)
    X, y = random_dataset(rng, n=30, d=3)
    from apnea_screen import _smo_py

    result = _smo_py.solve(X, y, 1.0, 0.5, 1e-6, 10**6, track_objective=True)
    trace = result[-1]
    assert len(trace) > 1
    assert (np.diff(trace) >= -1e-12).all()


def test_permutation_invariance_of_predictions():
    rng = np.random.default_rng(42)
    X, y = random_dataset(rng, n=40, d=3)
    grid = rng.normal(size=(50, 3))
    base = svm.fit(X, y, SvmConfig(C=1.0), tol=1e-8)
    base_labels = np.sign(decision_function(base, grid))
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(len(y))
        shuffled = svm.fit(X[order], y[order], SvmConfig(C=1.0), tol=1e-8)
        assert np.array_equal(np.sign(decision_function(shuffled, grid)), base_labels)


def test_affine_rescaling_of_raw_features_is_invisible():
    rng = np.random.default_rng(9)
    X, y = random_dataset(rng, n=30, d=3)
    grid = rng.normal(size=(20, 3))
    scale = np.array([2.0, 0.5, 10.0])
    offset = np.array([1.0, -4.0, 100.0])
    base = svm.fit(X, y, SvmConfig(), tol=1e-8)
    moved = svm.fit(X * scale + offset, y, SvmConfig(), tol=1e-8)
    np.testing.assert_allclose(
        decision_function(base, grid),
        decision_function(moved, grid * scale + offset),
        atol=1e-6,
    )


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_agree():
    """Same dual optimum and decision surface from both solvers. The alpha
    vectors themselves may differ when the dual is degenerate (duplicated
    rows), so the contract is objective value + predictions."""
    rng = np.random.default_rng(2024)
    for _ in range(10):
        X, y = random_dataset(rng, n=25, d=3)
        tset = standardize(*balance_classes(X, y))
        compiled = train(tset, C=1.0, gamma="auto", tol=1e-8, backend="compiled")
        python = train(tset, C=1.0, gamma="auto", tol=1e-8, backend="python")
        obj_c, obj_p = dual_objective(compiled), dual_objective(python)
        assert abs(obj_c - obj_p) <= 1e-6 * max(1.0, abs(obj_p))
        grid = rng.normal(size=(40, X.shape[1]))
        raw_grid = grid * tset.std[tset.kept] + tset.mean[tset.kept]
        np.testing.assert_allclose(
            decision_function(compiled, raw_grid), decision_function(python, raw_grid), atol=1e-5
        )


# --- prediction surface and serialization -------------------------------------

def test_dimension_mismatch():
    X = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.2], [0.1, 0.9]])
    y = np.array([1.0, -1.0, 1.0, -1.0])
    model = svm.fit(X, y, SvmConfig())
    with pytest.raises(DimensionMismatch):
        predict(model, np.zeros(3))


def test_predict_returns_apn_for_positive_margin():
    X = np.array([[1.0], [-1.0], [1.1], [-1.2]])
    y = np.array([1.0, -1.0, 1.0, -1.0])
    model = svm.fit(X, y, SvmConfig(C=10.0), tol=1e-8)
    assert predict(model, np.array([1.5]))[0] == APN
    assert predict(model, np.array([-1.5]))[0] == NOR


def test_model_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    X, y = random_dataset(rng, n=20, d=2)
    model = svm.fit(X, y, SvmConfig(C=2.0))
    path = tmp_path / "model.json"
    save_model(model, path)
    restored = load_model(path)
    grid = rng.normal(size=(10, 2))
    np.testing.assert_allclose(
        decision_function(model, grid), decision_function(restored, grid), atol=1e-12
    )
    payload = json.loads(path.read_text())
    assert payload["format_version"] == 1
    assert set(payload["standardization"]) == {"mean", "std", "kept"}


def test_model_digest_changes_with_training_data():
    rng = np.random.default_rng(8)
    X, y = random_dataset(rng, n=20, d=2)
    a = svm.fit(X, y, SvmConfig())
    b = svm.fit(X + 0.01, y, SvmConfig())
    assert model_digest(a) == model_digest(svm.fit(X, y, SvmConfig()))
    assert model_digest(a) != model_digest(b)


def test_auto_gamma_is_one_over_kept_dimensions():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.normal(size=30), rng.normal(size=30), np.full(30, 7.0)])
    y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    model = svm.fit(X, y, SvmConfig(gamma="auto"))
    assert model.gamma == pytest.approx(0.5)  # constant column dropped -> d=2
