import numpy as np
import pytest
from scipy import stats

from diflab import diffable as df, targets
from diflab.diffable import Tensor
from diflab.targets import (CapabilityError, DataFormatError, DensityGrid, quadrature_integral,
                            sample_target, unnorm_log_pdf)


def std_normal_1d(scale=1.0):
    return targets.gaussian_mixture([1.0], [[0.0]], [1.0], scale=scale)


def test_single_gaussian_sample_mean():
    x = sample_target(std_normal_1d(), 100_000, 0)
    assert abs(x.mean()) < 0.01


def test_sampling_deterministic():
    spec = targets.two_moons()
    np.testing.assert_array_equal(sample_target(spec, 50, 3), sample_target(spec, 50, 3))


def test_noiseless_moons_on_arcs():
    x = sample_target(targets.two_moons(0.0), 2000, 1)
    upper = np.abs(np.hypot(x[:, 0], x[:, 1]) - 1.0) < 1e-12
    lower = np.abs(np.hypot(x[:, 0] - 1.0, x[:, 1] - 0.5) - 1.0) < 1e-12
    assert np.all(upper | lower)
    assert np.all(x[upper, 1] >= -1e-12)
    assert np.all(x[lower & ~upper, 1] <= 0.5 + 1e-12)


def test_white_image_uniform_chi2():
    x = sample_target(targets.image_density(np.ones((4, 4))), 50_000, 2)
    counts, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=10, range=[[0, 1], [0, 1]])
    chi2 = ((counts - 500) ** 2 / 500).sum()
    assert chi2 < stats.chi2.ppf(0.99, 99)


def test_normal_log_pdf_at_zero():
    assert unnorm_log_pdf(std_normal_1d(), np.array([[0.0]]))[0] == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def test_scaling_by_e_shifts_by_one():
    x = np.random.default_rng(0).normal(size=(20, 1))
    a = unnorm_log_pdf(std_normal_1d(), x)
    b = unnorm_log_pdf(std_normal_1d(np.e), x)
    np.testing.assert_allclose(b - a, 1.0, atol=1e-14)


def test_tensor_input_is_differentiable():
    spec = targets.gaussian_mixture([0.4, 0.6], [[-1.0], [2.0]], [0.5, 1.5])
    s = df.ParameterStore()
    s.add("x", np.array([[0.3], [1.7]]))
    assert df.finite_diff_check(lambda p, _: unnorm_log_pdf(spec, p["x"]).sum(), s) <= 1e-7
    np.testing.assert_allclose(df.evaluate(lambda p, _: unnorm_log_pdf(spec, p["x"]).sum(), s),
                               unnorm_log_pdf(spec, s.get("x")).sum())


def test_moons_density_reflection_symmetric():
    spec = targets.two_moons()
    x = np.random.default_rng(1).uniform(-2, 3, size=(100, 2))
    np.testing.assert_allclose(unnorm_log_pdf(spec, x), unnorm_log_pdf(spec, targets.reflect_moons(x)), atol=1e-10)


def test_moons_density_peaks_on_data():
    spec = targets.two_moons()
    on = sample_target(spec, 500, 4)
    off = np.random.default_rng(5).uniform(-2, 3, size=(500, 2))
    assert np.median(unnorm_log_pdf(spec, on)) > np.median(unnorm_log_pdf(spec, off)) + 5


def test_capability_errors():
    with pytest.raises(CapabilityError):
        unnorm_log_pdf(targets.s_curve(), np.zeros((1, 2)))
    with pytest.raises(CapabilityError):
        sample_target(targets.TargetSpec("gaussian_mixture", 1, {}, False, True), 3)
    with pytest.raises(ValueError):
        targets.TargetSpec("two_moons", 2, {}, False, False)


def test_quadrature_standard_normal_1d():
    grid = DensityGrid([(-10.0, 10.0, 20001)])
    assert quadrature_integral(lambda g: stats.norm.pdf(g[:, 0]), grid) == pytest.approx(1.0, abs=1e-8)


def test_quadrature_constant_is_volume():
    grid = DensityGrid([(0.0, 1.0, 7), (0.0, 1.0, 3)])
    assert quadrature_integral(lambda g: np.ones(len(g)), grid) == pytest.approx(1.0, rel=1e-15)
    grid = DensityGrid([(0.0, 2.0, 5), (-1.0, 0.5, 4)])
    assert grid.weights().sum() == pytest.approx(grid.volume, abs=1e-15)


def test_quadrature_standard_normal_2d():
    grid = DensityGrid([(-8.0, 8.0, 801), (-8.0, 8.0, 801)])
    f = lambda g: stats.norm.pdf(g[:, 0]) * stats.norm.pdf(g[:, 1])
    assert quadrature_integral(f, grid) == pytest.approx(1.0, abs=1e-6)


def test_quadrature_second_order():
    f = lambda g: np.exp(np.sin(3 * g[:, 0]))
    errs = []
    exact = quadrature_integral(f, DensityGrid([(0.0, 2.0, 2 ** 16 + 1)]))
    for n in (41, 81, 161):
        errs.append(abs(quadrature_integral(f, DensityGrid([(0.0, 2.0, n)])) - exact))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 <= r <= 4.5 for r in ratios), ratios


def test_grid_validation_and_csv_roundtrip():
    with pytest.raises(ValueError):
        DensityGrid([(0.0, 1.0, 1)])
    with pytest.raises(ValueError):
        DensityGrid([(1.0, 0.0, 5)])
    g = DensityGrid([(0.0, 1.0, 3), (-1.0, 1.0, 2)])
    g.values = np.arange(6.0).reshape(3, 2)
    text = g.to_csv()
    assert text.startswith("# axes=")
    assert text.splitlines()[1] == "x0,x1,density"
    back = DensityGrid.from_csv(text)
    assert back.axes == g.axes
    np.testing.assert_array_equal(back.values, g.values)


def test_pgm_two_cell_frequencies(tmp_path):
    path = tmp_path / "two.pgm"
    targets.write_pgm(path, np.array([[3, 1]]))
    spec = targets.load_image_density(path)
    x = sample_target(spec, 100_000, 6)
    left = np.mean(x[:, 0] < 0.5)
    assert abs(left - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / 100_000)
    assert np.all((x >= 0) & (x <= 1))


def test_pgm_row_zero_is_top(tmp_path):
    path = tmp_path / "top.pgm"
    targets.write_pgm(path, np.array([[5], [0]]))
    x = sample_target(targets.load_image_density(path), 1000, 7)
    assert np.all(x[:, 1] >= 0.5)


def test_checkerboard_never_hits_black(tmp_path):
    path = tmp_path / "cb.pgm"
    targets.write_pgm(path, np.array([[255, 0], [0, 255]]))
    x = sample_target(targets.load_image_density(path), 20_000, 8)
    left, top = x[:, 0] < 0.5, x[:, 1] >= 0.5
    assert not np.any(left & ~top) and not np.any(~left & top)


def test_image_density_log_pdf_normalized():
    spec = targets.image_density(np.array([[1.0, 2.0], [0.0, 5.0]]))
    grid = DensityGrid([(0.0, 1.0, 801), (0.0, 1.0, 801)])
    total = quadrature_integral(lambda g: np.exp(unnorm_log_pdf(spec, g)), grid)
    assert total == pytest.approx(1.0, abs=1e-2)


@pytest.mark.parametrize("text", ["P5\n1 1\n255\n0\n", "P2\n2 2\n255\n1 2 3\n", "P2\nx 1\n255\n1\n", "P2\n1 1\n70000\n1\n"])
def test_pgm_malformed(tmp_path, text):
    path = tmp_path / "bad.pgm"
    path.write_text(text)
    with pytest.raises(DataFormatError):
        targets.read_pgm(path)


def test_pgm_all_black(tmp_path):
    path = tmp_path / "black.pgm"
    path.write_text("P2\n2 1\n255\n0 0\n")
    with pytest.raises(DataFormatError):
        targets.load_image_density(path)


def test_csv_dataset_plain_and_covariates(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x0,x1\n1,2\n3,4\n5,6\n")
    ds = targets.load_csv_dataset(p)
    assert ds.x.shape == (3, 2) and ds.omega is None
    p.write_text("w_0,x0\n0.5,1\n1.5,2\n")
    ds = targets.load_csv_dataset(p)
    assert ds.x.shape == (2, 1) and ds.omega.shape == (2, 1)


def test_csv_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=(50, 2)) * 1e-7, rng.normal(size=(50, 1)) * 1e9
    p = tmp_path / "r.csv"
    targets.write_csv_dataset(p, x, w)
    ds = targets.load_csv_dataset(p)
    np.testing.assert_array_equal(ds.x, x)
    np.testing.assert_array_equal(ds.omega, w)


@pytest.mark.parametrize("text", ["x0,x1\n1,2\n3\n", "x0\nabc\n"])
def test_csv_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError):
        targets.load_csv_dataset(p)


def test_mixture_ks_self_test():
    spec = targets.five_modes_1d()
    x = sample_target(spec, 20_000, 10)[:, 0]
    assert stats.kstest(x, lambda t: targets.mixture_cdf(spec, t)).pvalue > 1e-3


def test_s_curve_shape():
    x = sample_target(targets.s_curve(0.0), 1000, 11)
    assert x.shape == (1000, 2)
    assert np.all(np.abs(x[:, 0]) <= 1 + 1e-12) and np.all(np.abs(x[:, 1]) <= 2 + 1e-12)


def test_target_from_config(tmp_path):
    spec = targets.target_from_config({"kind": "gaussian_mixture", "weights": [1], "means": [[0.0]], "stds": [1.0]})
    assert spec.dim == 1 and spec.can_eval_unnorm_logpdf
    with pytest.raises(ValueError):
        targets.target_from_config({"kind": "nope"})
