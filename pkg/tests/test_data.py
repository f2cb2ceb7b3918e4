import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mempert.data import (
    DataConfig,
    Dataset,
    Task,
    add_bias,
    class_indices,
    load,
    load_csv,
    save_csv,
    split_indices,
    standardize,
    synthesize,
)
from mempert.errors import InvalidParameter, LabelError, ParseError
from mempert.models import ModelSpec, output, per_example_nll
from mempert.optim import fit_map


def test_regression_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("f0,f1,y\n1,2,0.5\n3,4,1.5\n5,6,-1\n")
    d = load_csv(p, "regression")
    assert d.n == 3 and d.dim == 2 and d.task is Task.REGRESSION
    np.testing.assert_array_equal(d.y, [0.5, 1.5, -1.0])


def test_gap_in_class_labels(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("f0,y\n0.1,0\n0.2,2\n")
    with pytest.raises(LabelError):
        load_csv(p, "multiclass")


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f0,y\n1,0\nabc,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(p, "binary")
    assert info.value.line == 3
    p.write_text("f0,y\n1,0,4\n")
    with pytest.raises(ParseError):
        load_csv(p, "binary")
    p.write_text("a,b\n1,0\n")
    with pytest.raises(ParseError):
        load_csv(p, "binary")


@pytest.mark.parametrize("kind,task", [("linear", "regression"), ("blobs", "multiclass"), ("moons", "binary")])
def test_save_load_round_trip(tmp_path, kind, task):
    train, _ = synthesize(DataConfig(kind=kind, n=25, dim=3, n_classes=3, n_test=1, seed=4))
    p = tmp_path / "d.csv"
    save_csv(train, p)
    again = load_csv(p, train.task)
    np.testing.assert_array_equal(again.X, train.X)
    np.testing.assert_array_equal(again.y, train.y)


def test_seeded_synthesis_reproducible():
    cfg = DataConfig(kind="blobs", n=50, dim=3, n_classes=3, seed=9)
    a, b = synthesize(cfg), synthesize(cfg)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.X, v.X)
        np.testing.assert_array_equal(u.y, v.y)


def test_noiseless_blobs_separable():
    train, _ = synthesize(DataConfig(kind="blobs", n=60, noise=0.0, n_test=1, delta=1e-3, seed=1))
    model = ModelSpec.for_data("logistic", train)
    theta, _ = fit_map(model, train, tol=1e-8)
    pred = (output(model, theta, train.X)[:, 0] > 0).astype(int)
    assert (pred == train.y).mean() == 1.0


def test_linear_fit_reaches_noise_floor():
    sigma = 0.5
    train, test = synthesize(DataConfig(kind="linear", n=2000, dim=3, noise=sigma, n_test=2000, delta=1e-3, seed=2))
    X = train.X
    theta = np.linalg.solve(X.T @ X + 1e-3 * np.eye(3), X.T @ train.y)
    resid = test.X @ theta - test.y
    # Gaussian NLL with the noise variance fitted on held-out residuals
    s2 = resid.var()
    nll = 0.5 * np.log(2 * np.pi * s2) + 0.5
    floor = 0.5 * np.log(2 * np.pi * sigma**2) + 0.5
    assert abs(nll - floor) < 0.05


def test_blob_means_on_circle():
    train, _ = synthesize(DataConfig(kind="blobs", n=3000, n_classes=4, noise=0.1, n_test=1, seed=0))
    for c in range(4):
        centre = train.X[class_indices(train, c)].mean(axis=0)
        assert np.linalg.norm(centre) == pytest.approx(3.0, abs=0.02)


def test_class_noise_scales_spread():
    train, _ = synthesize(DataConfig(kind="blobs", n=3000, n_classes=3, noise=1.0, class_noise=[0.5, 1.0, 2.0], n_test=1))
    spreads = [train.X[class_indices(train, c)].std(axis=0).mean() for c in range(3)]
    np.testing.assert_allclose(spreads, [0.5, 1.0, 2.0], rtol=0.1)
    with pytest.raises(InvalidParameter):
        synthesize(DataConfig(kind="blobs", n_classes=3, class_noise=[1.0, 2.0]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), frac=st.floats(0.0, 0.95), seed=st.integers(0, 2**31))
def test_split_is_a_partition(n, frac, seed):
    tr, te = split_indices(n, frac, seed)
    assert not set(tr) & set(te)
    assert sorted(set(tr) | set(te)) == list(range(n))


def test_bad_split_fraction():
    with pytest.raises(InvalidParameter):
        split_indices(10, 1.0, 0)


def test_standardize_uses_train_statistics():
    train, test = synthesize(DataConfig(kind="linear", n=200, dim=4, n_test=50, seed=3))
    train = Dataset(train.X * 3 + 5, train.y, train.task)
    test = Dataset(test.X * 3 + 5, test.y, test.task)
    s_train, s_test = standardize(train, test)
    assert np.abs(s_train.X.mean(axis=0)).max() <= 1e-10
    assert np.abs(s_train.X.std(axis=0) - 1).max() <= 1e-10
    mu, sd = train.X.mean(axis=0), train.X.std(axis=0)
    np.testing.assert_allclose(s_test.X, (test.X - mu) / sd)


def test_csv_config_split(tmp_path):
    train, _ = synthesize(DataConfig(kind="moons", n=40, n_test=1, seed=5))
    p = tmp_path / "m.csv"
    save_csv(train, p)
    tr, te = load(DataConfig(kind="csv", path=str(p), task="binary", test_fraction=0.25, bias=True, seed=1))
    assert tr.n + te.n == 40 and te.n == 10
    assert np.all(tr.X[:, -1] == 1.0)


def test_dataset_contract():
    with pytest.raises(InvalidParameter):
        Dataset(np.zeros((3, 2)), np.zeros(2), Task.REGRESSION)
    with pytest.raises(LabelError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), Task.BINARY)
    with pytest.raises(InvalidParameter):
        Dataset(np.zeros((2, 1)), np.zeros(2), Task.REGRESSION, delta=-1.0)
    d = Dataset(np.zeros((4, 1)), np.arange(4) % 2, Task.BINARY)
    assert d.without([0, 1]).n == 2 and add_bias(d).dim == 2


def test_gaussian_nll_of_synthetic_regression_is_finite():
    train, _ = synthesize(DataConfig(kind="linear", n=10, dim=2, n_test=1))
    model = ModelSpec.for_data("linear", train)
    assert np.all(np.isfinite(per_example_nll(model, output(model, np.zeros(2), train.X), train.y)))
