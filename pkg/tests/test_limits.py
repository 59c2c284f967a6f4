import numpy as np
import pytest
import scipy.stats

from services.channel import ConstantObservable, QuadraticObservable
from services.errors import HyperplaneDegenerate, NonConvexCurve, PreconditionError
from services.limits import (
    CumulantCurve,
    ScalarF,
    berry_esseen_scan,
    clt_check,
    cycle_convergence_scan,
    default_threshold,
    gamma_estimates,
    integral_gamma,
    ineqlog_scan,
    ldp_check,
    legendre_transform,
    log_moment,
    richardson_derivatives,
    scalar_f_checks,
    sigma2_estimates,
    spectral_curve,
    threshold_curve,
)
from services.operator import build_mesh
from services.projective import ProjectivePoint, basis_point, haar_vectors, random_hermitian
from services.sampler import RunConfig, run

X0 = ProjectivePoint(np.array([0.6, 0.8j]))
SPIN = QuadraticObservable(np.diag([1.0, -1.0]))


def linear_curve(c: float) -> CumulantCurve:
    grid = np.linspace(-2, 2, 41)
    return CumulantCurve(family="obs", grid=grid, values=c * grid, d1=c)


def test_richardson_on_a_cubic():
    result = richardson_derivatives(lambda x: x ** 3 + 2 * x ** 2 + x, step=1e-2)
    assert result["value_at_zero"] == 0.0
    assert result["d1"] == pytest.approx(1.0, abs=1e-8)
    assert result["d2"] == pytest.approx(4.0, abs=1e-6)


def test_legendre_of_quadratic():
    grid = np.arange(-200, 201) / 100
    curve = CumulantCurve(family="obs", grid=grid, values=grid ** 2 / 2)
    x = np.linspace(-1.5, 1.5, 31)
    rate = legendre_transform(curve, x)
    assert np.allclose(rate.values, x ** 2 / 2, atol=1e-3)
    assert rate.at(3.0) == float("inf")
    assert rate.at(1.0) == pytest.approx(0.5, abs=1e-3)
    assert rate.to_rows()[15]["x"] == pytest.approx(0.0)


def test_legendre_rejects_nonconvex_and_short_curves():
    grid = np.linspace(-1, 1, 21)
    with pytest.raises(NonConvexCurve):
        legendre_transform(CumulantCurve(family="obs", grid=grid, values=-grid ** 2), [0.0])
    with pytest.raises(PreconditionError):
        legendre_transform(CumulantCurve(family="obs", grid=grid[:1], values=grid[:1]), [0.0])


def test_spectral_curve_of_constant_observable(dr):
    curve = spectral_curve(dr, build_mesh(2, 200), "obs", [-1.0, 0.0, 1.0], h=ConstantObservable(0.4))
    assert np.allclose(curve.values, [-0.4, 0.0, 0.4], atol=1e-10)
    assert curve.d1 == pytest.approx(0.4, abs=1e-6)
    assert abs(curve.d2) < 1e-4
    assert curve.is_convex()


def test_clt_check_verdicts():
    quantiles = scipy.stats.norm.ppf((np.arange(1, 2001) - 0.5) / 2000)
    assert clt_check(quantiles, 1.0).passed
    assert not clt_check(quantiles, 4.0).passed
    report = clt_check(np.zeros(100), 0.0)
    assert report.passed and report.degenerate and report.ks == 0.0
    assert not clt_check(np.full(100, 0.5), 0.0).passed


def test_clt_check_preconditions():
    with pytest.raises(PreconditionError):
        clt_check([], 1.0)
    with pytest.raises(PreconditionError):
        clt_check([0.1, 0.2], -1.0)


def test_coin_scan_stays_bounded():
    result = berry_esseen_scan(None, "coin", [10, 40, 160], M=2000, seed=3)
    assert [row["n"] for row in result["rows"]] == [10, 40, 160]
    assert all(row["scaled_sqrt"] < 1.5 for row in result["rows"])
    assert result["sigma2"] == 1.0


def test_berry_esseen_degenerate(uni):
    result = berry_esseen_scan(uni, "lyapunov", [5, 10], M=50, seed=1)
    assert result["degenerate"] and not result["pass"] and result["rows"] == []


def test_berry_esseen_needs_observable(dr):
    with pytest.raises(PreconditionError):
        berry_esseen_scan(dr, "observable", [5], M=50, seed=1)


def test_berry_esseen_norm_mode_adds_quarter_column(dr):
    result = berry_esseen_scan(dr, "lyapunov_norm", [10, 20], M=200, seed=2)
    assert all("scaled_quarter" in row for row in result["rows"])


def test_default_threshold():
    assert default_threshold(0.1, 0.02, 200) == pytest.approx(0.1 + np.sqrt(0.001))
    assert default_threshold(0.1, 0.02, 200, a_sigma=0.5) == pytest.approx(0.1 + 0.5 * np.sqrt(0.02))
    with pytest.raises(PreconditionError):
        default_threshold(0.1, 0.0, 200)


def test_threshold_lies_inside_the_slope_range(dr):
    a, curve = threshold_curve(dr, build_mesh(2, 200), "obs", 200, h=SPIN)
    lo, hi = curve.slope_range()
    assert lo < a < hi
    assert 0.0 in curve.grid
    assert a == pytest.approx(curve.d1 + np.sqrt(10 * curve.d2 / 200), rel=1e-6)
    rate = legendre_transform(curve, [a])
    # Gaussian part of the rate: n_max * I(a) close to the requested exponent
    assert rate.at(a) == pytest.approx(5.0 / 200, rel=0.25)


def test_threshold_grid_widens_for_far_thresholds(dr):
    mesh = build_mesh(2, 200)
    a, curve = threshold_curve(dr, mesh, "obs", 200, h=SPIN, a_sigma=0.5)
    lo, hi = curve.slope_range()
    assert lo < a < hi
    assert np.isfinite(legendre_transform(curve, [a]).at(a))
    narrow = spectral_curve(dr, mesh, "obs", np.linspace(-1, 1, 21), h=SPIN)
    assert not narrow.slope_range()[0] < a < narrow.slope_range()[1]


def test_ldp_constant_observable(dr):
    h = ConstantObservable(0.5)
    rate = legendre_transform(linear_curve(0.5), [0.5])
    result = ldp_check(dr, "observable", 0.5, [10, 20], M=100, rate=rate, seed=4, h=h)
    assert result["I_a"] == pytest.approx(0.0, abs=1e-12)
    assert all(row["p_hat"] == 1.0 for row in result["rows"])
    assert result["pass"] and not result["unreachable"]

    result = ldp_check(dr, "observable", 0.6, [10, 20], M=100, rate=rate, seed=4, h=h)
    assert result["I_a"] == float("inf") and not result["in_domain"]
    assert result["unreachable"] and not result["pass"]


def test_ineqlog_constant_at_zero(rng):
    sample = haar_vectors(2, 500, rng)
    result = ineqlog_scan(sample, 0.0, trials=300, seed=1)
    assert result["min"] == pytest.approx(1.0) and result["max"] == pytest.approx(1.0)


def test_ineqlog_positive_on_haar_sample(rng):
    sample = haar_vectors(2, 2000, rng)
    result = ineqlog_scan(sample, 1.0, trials=500, seed=2)
    assert 0 < result["min"] <= result["max"]
    assert result["frame_min_eigenvalue"] > 0.4


def test_ineqlog_rejects_degenerate_samples():
    sample = np.tile(basis_point(2, 0).vector, (50, 1))
    with pytest.raises(HyperplaneDegenerate):
        ineqlog_scan(sample, 1.0, trials=10, seed=0)
    with pytest.raises(PreconditionError):
        ineqlog_scan(haar_vectors(2, 10, np.random.default_rng(0)), -2.0, trials=10, seed=0)


def test_scalar_f_values():
    F = ScalarF(1, 1.0)
    assert F(np.e) == pytest.approx(np.e)
    assert F(1.0) == 0.0 and F(0.0) == 0.0
    assert F.derivative(1.0) == pytest.approx(1.0)
    with pytest.raises(PreconditionError):
        ScalarF(-1, 1.0)
    with pytest.raises(PreconditionError):
        ScalarF(1, 0.0)


def test_scalar_f_checks_pass():
    result = scalar_f_checks(4, 1.5, 0.5, np.linspace(0.01, 10, 200))
    assert result["pass"]
    assert len(result["sup"]) == len(result["derivative"]) == len(result["holder"]) == 5
    assert result["r"] == pytest.approx(0.5)


def test_scalar_f_checks_skip_derivative_below_one():
    result = scalar_f_checks(3, 0.5 + 1j, 0.5, np.linspace(0.05, 4, 80))
    assert result["derivative_skipped"] and result["derivative"] == []
    assert result["power_holder"]["exponent"] == pytest.approx(0.5)
    assert result["pass"]


def test_scalar_f_checks_preconditions():
    grid = np.linspace(0.1, 1, 10)
    with pytest.raises(PreconditionError):
        scalar_f_checks(2, -0.5, 0.5, grid)
    with pytest.raises(PreconditionError):
        scalar_f_checks(2, 1.5, 0.0, grid)
    with pytest.raises(PreconditionError):
        scalar_f_checks(2, 1.5, 0.5, [-1.0, 1.0])


def test_gamma_estimates_vanish(uni, ad):
    result = gamma_estimates(uni, RunConfig(n_steps=200, n_traj=10, seed=1, burn_in=20))
    assert abs(result["traj"]) < 1e-12 and abs(result["integral"]) < 1e-12
    assert result["consistent"]

    cfg = RunConfig.from_point(basis_point(2, 0), n_steps=200, n_traj=10, seed=1, burn_in=20)
    result = gamma_estimates(ad, cfg)
    assert result["traj"] == 0.0 and result["integral"] == 0.0


def test_integral_gamma_groups(dr, rng):
    points = haar_vectors(2, 40, rng)
    mean, stderr = integral_gamma(dr, points, np.repeat(np.arange(4), 10))
    assert mean < 0 and stderr >= 0
    with pytest.raises(PreconditionError):
        integral_gamma(dr, np.zeros((0, 2)))


def test_sigma2_of_zero_observable(dr):
    result = sigma2_estimates(dr, ConstantObservable(0.0), RunConfig(n_steps=50, n_traj=20, seed=3))
    assert result["batch"] == 0.0 and result["degenerate"]


def test_log_moment(uni, ad):
    assert abs(log_moment(uni)["log_moment"]) < 1e-12
    result = log_moment(ad)
    assert result["finite"] and result["log_moment"] > 0
    assert result["moment_hi"] == pytest.approx(1 + 0.6 ** 3)


def test_cycle_decomposition_weights(pndm):
    result = cycle_convergence_scan(pndm, np.diag([1.0, 2.0]), X0, [1, 2], M=200, seed=5)
    assert result["period"] == 2
    assert np.allclose(result["weights"], [0.36, 0.64])
    assert np.allclose(result["nu_exact"], [1.0, 2.0])
    # diagonal observables are fixed by the square of the channel
    assert all(row["gap_exact"] < 1e-10 for row in result["rows"])


def test_cycle_convergence_random_observable(pndm, rng):
    A = random_hermitian(2, rng)
    x0 = ProjectivePoint(haar_vectors(2, 1, rng)[0])
    result = cycle_convergence_scan(pndm, A, x0, [1, 2, 5, 10, 20], M=1000, seed=5)
    gaps = [row["gap_exact"] for row in result["rows"]]
    assert result["decreasing"]
    # off-diagonal part shrinks by 4q(1-q) = 0.84 per period
    assert gaps[-1] == pytest.approx(gaps[0] * 0.84 ** 19, rel=1e-6)
    assert result["within_mc_error"] and result["pass"]
    assert result["rows"][-1]["band"] >= 3 * result["rows"][-1]["mc_stderr"]


@pytest.fixture(scope="module")
def dr_mesh():
    return build_mesh(2, 800)


@pytest.mark.slow
def test_gamma_estimators_agree_on_rotated_dephasing(dr, dr_mesh):
    curve = spectral_curve(dr, dr_mesh, "lyap", [-0.2, -0.1, 0.0, 0.1, 0.2])
    result = gamma_estimates(dr, RunConfig(n_steps=2000, n_traj=500, seed=11, burn_in=200), curve)
    assert result["consistent"], result["pairs"]
    assert result["traj"] < 0


@pytest.mark.slow
def test_sigma2_batch_matches_spectral(dr, dr_mesh):
    curve = spectral_curve(dr, dr_mesh, "obs", [-0.2, -0.1, 0.0, 0.1, 0.2], h=SPIN)
    result = sigma2_estimates(dr, SPIN, RunConfig(n_steps=2000, n_traj=500, seed=12, burn_in=200), curve)
    assert not result["degenerate"]
    assert result["agree"]


@pytest.mark.slow
def test_clt_for_sums_and_log_norms(dr):
    n = 2000
    stats = run(dr, RunConfig(n_steps=n, n_traj=2000, seed=13, observable=SPIN, record_occupation=False))
    for values in (stats.sum_h, stats.log_norm):
        sigma2 = float(np.var(values, ddof=1) / n)
        report = clt_check((values - values.mean()) / np.sqrt(n), sigma2, alpha=0.01, n=n)
        assert not report.degenerate
        assert report.passed, report.to_dict()


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["observable", "lyapunov", "lyapunov_norm"])
def test_berry_esseen_columns_stay_bounded(dr, mode):
    h = SPIN if mode == "observable" else None
    result = berry_esseen_scan(dr, mode, [100, 400, 1600], M=2000, seed=14, h=h)
    assert not result["degenerate"]
    assert not result["growth"] and result["pass"]


@pytest.mark.slow
def test_ldp_rate_matches_legendre_rate(dr, dr_mesh):
    a, curve = threshold_curve(dr, dr_mesh, "obs", 200, h=SPIN)
    rate = legendre_transform(curve, [a])
    result = ldp_check(dr, "observable", a, [100, 200], M=400_000, rate=rate, seed=15, h=SPIN)
    assert result["in_domain"] and not result["unreachable"]
    assert result["estimator"] == "corrected"
    assert result["agreement"] <= 0.15 and result["pass"]
    # the uncorrected rate still carries the log(n)/(2n) prefactor
    assert result["rows"][-1]["rate_hat"] > result["I_a"]
