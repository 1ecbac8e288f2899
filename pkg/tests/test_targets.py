"""Target distributions: frozen values, finite-difference oracles, samplers."""

import os

import numpy as np
import pytest

from entromc.targets import (
    DatasetTable,
    TargetDistribution,
    load_dataset_csv,
    make_blr,
    make_funnel,
    make_icg,
    make_scg,
)

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "data")


def fd_gradient(target, x, h=1e-6):
    """Central-difference gradient of target.energy at a single point."""
    d = x.size
    pert = np.repeat(x[None, :], 2 * d, axis=0)
    steps = h * np.maximum(1.0, np.abs(x))
    for j in range(d):
        pert[2 * j, j] += steps[j]
        pert[2 * j + 1, j] -= steps[j]
    e = target.energy(pert)
    return (e[0::2] - e[1::2]) / (2.0 * steps)


def fd_hvp(target, x, v, h=1e-5):
    gp = target.gradient(x + h * v)
    gm = target.gradient(x - h * v)
    return (gp - gm) / (2.0 * h)


def a_random_point(rng, target):
    x = rng.standard_normal(target.dim)
    if target.name.startswith("funnel"):
        x[0] = np.clip(x[0], -1.5, 1.5)
    return x


def small_table():
    return DatasetTable(np.array([[1.0]]), np.array([1.0]), name="unit")


def all_targets():
    rng = np.random.default_rng(7)
    data = load_dataset_csv(os.path.join(DATA_DIR, "heart_synth.csv"))
    return [
        make_icg(50),
        make_icg(6, -1.0, 1.0),
        make_scg(),
        make_funnel(20, sigma=3.0),
        make_funnel(4, sigma=1.0),
        make_blr(data),
    ]


class TestFrozenValues:
    def test_icg_variance_endpoints(self):
        t = make_icg(50, -2.0, 2.0)
        assert t.variances[0] == pytest.approx(1e-2, rel=1e-12)
        assert t.variances[49] == pytest.approx(1e2, rel=1e-12)
        assert np.all(np.diff(t.variances) > 0)

    def test_icg_energy_and_gradient_at_basis_vector(self):
        t = make_icg(50)
        e0 = np.zeros(50)
        e0[0] = 1.0
        assert t.energy(np.zeros(50)) == 0.0
        assert t.energy(e0) == pytest.approx(50.0, rel=1e-12)
        assert t.gradient(e0)[0] == pytest.approx(100.0, rel=1e-12)

    def test_scg_eigenvalues_and_energies(self):
        t = make_scg()
        eig = np.sort(np.linalg.eigvalsh(t.covariance))
        assert eig[0] == pytest.approx(0.1, rel=1e-10)
        assert eig[1] == pytest.approx(100.0, rel=1e-10)
        assert t.energy(np.zeros(2)) == 0.0
        assert t.energy(np.array([1.0, 1.0])) == pytest.approx(0.01, rel=1e-9)

    def test_funnel_gradient_at_origin(self):
        t = make_funnel(20, sigma=3.0)
        g = t.gradient(np.zeros(20))
        assert g[0] == pytest.approx(-19.0, abs=1e-12)
        assert np.all(g[1:] == 0.0)

    def test_funnel_energy_overflow_guard(self):
        t = make_funnel(4, sigma=3.0)
        x = np.zeros(4)
        x[0] = 400.0
        assert t.energy(x) == np.inf

    def test_standard_gaussian_special_case(self):
        # equal-variance ICG is blocked by the log10_min < log10_max guard;
        # build the standard Gaussian directly instead
        g = TargetDistribution(
            "std", 3,
            lambda x: 0.5 * np.sum(x * x, axis=1),
            lambda x: x,
            lambda x, v: v)
        pt = np.array([2.0, -1.0, 0.5])
        assert g.energy(pt) == pytest.approx(0.5 * np.sum(pt ** 2))
        assert np.allclose(g.gradient(pt), pt)

    def test_dimension_mismatch_rejected(self):
        t = make_icg(5)
        with pytest.raises(ValueError):
            t.energy(np.zeros(4))

    def test_icg_parameter_validation(self):
        with pytest.raises(ValueError):
            make_icg(1)
        with pytest.raises(ValueError):
            make_icg(5, 2.0, -2.0)
        with pytest.raises(ValueError):
            make_icg(5, np.nan, 1.0)


class TestFiniteDifferenceOracles:
    @pytest.mark.parametrize("target", all_targets(), ids=lambda t: t.name)
    def test_gradient_matches_fd(self, target):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            x = a_random_point(rng, target)
            g = target.gradient(x)
            g_fd = fd_gradient(target, x)
            err = np.max(np.abs(g - g_fd)) / max(1.0, np.max(np.abs(g_fd)))
            worst = max(worst, err)
        assert worst < 1e-5

    @pytest.mark.parametrize("target", all_targets(), ids=lambda t: t.name)
    def test_hvp_matches_fd_of_gradient(self, target):
        rng = np.random.default_rng(13)
        worst = 0.0
        for _ in range(100):
            x = a_random_point(rng, target)
            v = rng.standard_normal(target.dim)
            h = target.hvp(x, v)
            h_fd = fd_hvp(target, x, v)
            err = np.max(np.abs(h - h_fd)) / max(1.0, np.max(np.abs(h_fd)))
            worst = max(worst, err)
        assert worst < 1e-4

    @pytest.mark.parametrize("target", all_targets(), ids=lambda t: t.name)
    def test_hvp_linearity(self, target):
        rng = np.random.default_rng(17)
        x = a_random_point(rng, target)
        v, w = rng.standard_normal((2, target.dim))
        a, b = 1.7, -0.3
        lhs = target.hvp(x, a * v + b * w)
        rhs = a * target.hvp(x, v) + b * target.hvp(x, w)
        assert np.max(np.abs(lhs - rhs)) < 1e-10 * max(1.0, np.max(np.abs(rhs)))


class TestExactSamplers:
    def test_icg_moments(self):
        t = make_icg(6, -1.0, 1.0)
        rng = np.random.default_rng(23)
        xs = t.exact_sample(rng, 10 ** 5)
        n = xs.shape[0]
        se_mean = np.sqrt(t.variances / n)
        assert np.all(np.abs(xs.mean(axis=0)) < 3.0 * se_mean)
        assert np.all(np.abs(xs.var(axis=0, ddof=1) / t.variances - 1.0) < 0.05)

    def test_scg_covariance_entrywise(self):
        t = make_scg()
        rng = np.random.default_rng(29)
        xs = t.exact_sample(rng, 10 ** 5)
        emp = np.cov(xs.T)
        tol = 0.05 * np.sqrt(np.outer(np.diag(t.covariance),
                                      np.diag(t.covariance)))
        assert np.all(np.abs(emp - t.covariance) < tol)

    def test_funnel_top_marginal_and_identity(self):
        t = make_funnel(8, sigma=3.0)
        rng = np.random.default_rng(31)
        xs = t.exact_sample(rng, 10 ** 5)
        n = xs.shape[0]
        x0 = xs[:, 0]
        assert abs(x0.mean()) < 3.0 * t.sigma / np.sqrt(n)
        assert abs(x0.std(ddof=1) - t.sigma) < 3.0 * t.sigma / np.sqrt(2 * n)
        # law of total variance: exp(2 x0) * x_i^2 is chi-square(1)
        scaled = np.exp(2.0 * x0)[:, None] * xs[:, 1:] ** 2
        se = np.sqrt(2.0 / n)
        assert np.all(np.abs(scaled.mean(axis=0) - 1.0) < 3.0 * se)


class TestCounters:
    def test_batched_and_single_counting(self):
        t = make_icg(4)
        t.reset_counters()
        t.gradient(np.zeros((7, 4)))
        assert t.grad_eval_count == 7
        assert t.grad_counter.calls == 1
        for _ in range(5):
            t.gradient(np.zeros(4))
        assert t.grad_eval_count == 12
        t.hvp(np.zeros((3, 4)), np.ones((3, 4)))
        assert t.hvp_eval_count == 3
        t.reset_counters()
        assert t.grad_eval_count == 0 and t.hvp_eval_count == 0

    def test_t_steps_times_g_accounting(self):
        t = make_icg(3)
        t.reset_counters()
        x = np.zeros(3)
        for _ in range(40):  # a fake 40-step run with 2 gradient calls per step
            t.gradient(x)
            t.gradient(x)
        assert t.grad_eval_count == 80


class TestDatasetLoading:
    def test_two_row_standardization(self, tmp_path):
        p = tmp_path / "tiny.csv"
        p.write_text("f0,label\n1,0\n3,1\n")
        table = load_dataset_csv(str(p))
        s = np.std([1.0, 3.0], ddof=1)
        assert np.allclose(table.features[:, 0], [-1.0 / s, 1.0 / s])
        assert np.allclose(table.features[:, 1], 1.0)  # intercept column
        assert np.allclose(table.labels, [-1.0, 1.0])

    def test_identical_labels_allowed(self, tmp_path):
        p = tmp_path / "onelabel.csv"
        p.write_text("f0,f1,label\n1,2,1\n3,4,1\n5,7,1\n")
        table = load_dataset_csv(str(p))
        assert np.all(table.labels == 1.0)

    def test_constant_column_rejected(self, tmp_path):
        p = tmp_path / "const.csv"
        p.write_text("f0,f1,label\n1,2,0\n1,4,1\n")
        with pytest.raises(ValueError, match="zero-variance"):
            load_dataset_csv(str(p))

    def test_non_numeric_cell_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("f0,label\n1,0\nx,1\n")
        with pytest.raises(ValueError, match="non-numeric"):
            load_dataset_csv(str(p))

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("f0,label\n")
        with pytest.raises(ValueError, match="empty"):
            load_dataset_csv(str(p))

    def test_pm_one_labels_pass_through(self, tmp_path):
        p = tmp_path / "pm.csv"
        p.write_text("f0,label\n1,-1\n3,1\n")
        table = load_dataset_csv(str(p))
        assert np.allclose(table.labels, [-1.0, 1.0])

    @pytest.mark.parametrize("name,n,k", [
        ("german_synth.csv", 1000, 25),
        ("australian_synth.csv", 690, 15),
        ("heart_synth.csv", 270, 14),
    ])
    def test_bundled_files(self, name, n, k):
        table = load_dataset_csv(os.path.join(DATA_DIR, name))
        assert table.n == n and table.k == k
        assert set(np.unique(table.labels)) == {-1.0, 1.0}


class TestBlr:
    def test_energy_at_zero(self):
        data = load_dataset_csv(os.path.join(DATA_DIR, "heart_synth.csv"))
        t = make_blr(data)
        assert t.energy(np.zeros(t.dim)) == pytest.approx(
            data.n * np.log(2.0), rel=1e-12)

    def test_gradient_at_zero(self):
        data = load_dataset_csv(os.path.join(DATA_DIR, "heart_synth.csv"))
        t = make_blr(data)
        expect = -0.5 * (data.labels[:, None] * data.features).sum(axis=0)
        assert np.allclose(t.gradient(np.zeros(t.dim)), expect, atol=1e-10)

    def test_unit_hvp_example(self):
        t = make_blr(small_table(), prior_variance=100.0)
        h = t.hvp(np.zeros(1), np.ones(1))
        assert h[0] == pytest.approx(0.26, rel=1e-12)

    def test_large_margin_is_stable(self):
        t = make_blr(small_table())
        theta = np.array([1000.0])
        assert np.isfinite(t.energy(theta))
        assert np.isfinite(t.energy(-theta))
        assert np.isfinite(t.gradient(theta)).all()
