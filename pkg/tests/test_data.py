import numpy as np
import pytest

from vpfb.data import Dataset2D, generate, mixture_means, prior_sample, read_points_csv, write_points_csv

ALL = ["two_moons", "gaussian_mixture", "checkerboard", "spirals"]


def test_noiseless_moons_lie_on_arcs():
    s = generate(Dataset2D("two_moons", noise=0.0, n_train=2000, n_test=10))
    x = s.train + np.array([0.5, 0.25])
    upper = s.train_labels == 0
    r_up = np.hypot(x[upper, 0], x[upper, 1])
    r_lo = np.hypot(x[~upper, 0] - 1.0, x[~upper, 1] - 0.5)
    np.testing.assert_allclose(r_up, 1.0, atol=1e-12)
    np.testing.assert_allclose(r_lo, 1.0, atol=1e-12)
    assert np.all(x[upper, 1] >= -1e-12) and np.all(x[~upper, 1] <= 0.5 + 1e-12)


def test_csv_bytes_reproducible(tmp_path):
    d = Dataset2D("two_moons", seed=3, n_train=100, n_test=10)
    a = write_points_csv(tmp_path / "a.csv", generate(d).train, generate(d).train_labels).read_bytes()
    b = write_points_csv(tmp_path / "b.csv", generate(d).train, generate(d).train_labels).read_bytes()
    assert a == b


def test_mixture_component_means():
    n = 40000
    s = generate(Dataset2D("gaussian_mixture_4", noise=0.2, n_train=n, n_test=1))
    means = mixture_means(4)
    for k in range(4):
        pts = s.train[s.train_labels == k]
        assert np.all(np.abs(pts.mean(0) - means[k]) < 3 * 0.2 / np.sqrt(len(pts)) + 1e-12)
    assert s.num_classes == 4


@pytest.mark.parametrize("name", ALL)
def test_bounding_box_and_determinism(name):
    d = Dataset2D(name, seed=5, n_train=5000, n_test=500)
    s1, s2 = generate(d), generate(d)
    np.testing.assert_array_equal(s1.train, s2.train)
    np.testing.assert_array_equal(s1.test_labels, s2.test_labels)
    assert np.all(np.abs(s1.train) <= 4.0)
    assert not np.array_equal(s1.train[:500], s1.test)


def test_checkerboard_cells_alternate():
    s = generate(Dataset2D("checkerboard", noise=0.0, n_train=5000, n_test=1))
    i, j = np.floor(s.train + 2).astype(int).T
    assert np.all((i + j) % 2 == 0)


def test_invalid_params():
    for kwargs in (dict(name="mnist"), dict(noise=-0.1), dict(components=0), dict(n_train=0)):
        with pytest.raises(ValueError):
            Dataset2D(**kwargs)


def test_prior_moments():
    x = prior_sample(2, 100_000, 1.5, seed=0)
    assert np.all(np.abs(x.mean(0)) < 4 * 1.5 / np.sqrt(1e5))
    np.testing.assert_allclose(np.cov(x.T), 2.25 * np.eye(2), atol=0.05)


def test_prior_rejects_degenerate_scale():
    with pytest.raises(ValueError):
        prior_sample(2, 10, 0.0, seed=0)


def test_prior_seeded():
    np.testing.assert_array_equal(prior_sample(2, 5, 1.0, 9), prior_sample(2, 5, 1.0, 9))


def test_csv_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(7, 2))
    lab = np.arange(7)
    got, got_lab = read_points_csv(write_points_csv(tmp_path / "p.csv", pts, lab))
    np.testing.assert_array_equal(got, pts)
    np.testing.assert_array_equal(got_lab, lab)
    got, none = read_points_csv(write_points_csv(tmp_path / "q.csv", pts))
    assert none is None and got.shape == (7, 2)
