import numpy as np
import pytest
from scipy.spatial.distance import directed_hausdorff

from lunardescent.controllability import (ClassificationDataset, ConicBoundary, ConvexityError,
                                          DegeneratePointError, DispersionModel, GuidanceDataset,
                                          InfeasibleRefinementError, RefinementConfig, _curve_midpoint,
                                          _interval_margins, build_datasets, fit_conic_boundary,
                                          fit_dm_surrogate, margin_sigma, reduced_coordinates, refine_waypoint,
                                          robustness_margin, rough_braking_line_search, sample_dispersions,
                                          trace_tradeoff)
from lunardescent.dynamics import MoonConstants
from lunardescent.guidance import GuidanceBoundary, fit_polynomial, tgo_grid
from lunardescent.mission import MissionConfig

MEAN = np.array([-3000.0, 6000.0, 0.0, 60.0, -40.0, 0.0, 980.0])


def _labelled_disc(rng, n=2000, band=0.05, radius=1.0, center=(0.0, 0.0)):
    s = rng.uniform(-2, 2, size=(4 * n, 2))
    r = np.hypot(*(s - center).T)
    s = s[np.abs(r - radius) > band][:n]
    y = np.where(np.hypot(*(s - center).T) < radius, 1, -1)
    return ClassificationDataset(states=np.zeros((len(s), 7)), labels=y, reduced=s)


# ------------------------------------------------------------------ sampling
def test_zero_covariance_returns_the_mean():
    X = sample_dispersions(DispersionModel(MEAN, np.zeros((4, 4)), n_samples=20))
    assert np.array_equal(X, np.tile(MEAN, (20, 1)))


def test_sample_mean_and_determinism():
    model = DispersionModel.diagonal(MEAN, 500.0, 10.0, n_samples=4000, seed=11)
    X = sample_dispersions(model)
    sd = np.array([500, 500, 10, 10])
    idx = [0, 1, 4, 3]
    assert np.all(np.abs(X[:, idx].mean(axis=0) - MEAN[idx]) < 5 * sd / np.sqrt(4000))
    assert np.array_equal(X, sample_dispersions(model))
    assert not np.array_equal(X, sample_dispersions(model, seed=12))
    assert np.all(X[:, [2, 5, 6]] == MEAN[[2, 5, 6]])


def test_singular_covariance_is_sampled():
    cov = np.zeros((4, 4))
    cov[0, 0] = cov[1, 1] = cov[0, 1] = cov[1, 0] = 100.0**2
    X = sample_dispersions(DispersionModel(MEAN, cov, n_samples=100))
    assert np.allclose(X[:, 0] - MEAN[0], X[:, 1] - MEAN[1])


@pytest.mark.parametrize("cov", [-np.eye(4), np.ones((3, 3)), np.triu(np.ones((4, 4)))])
def test_invalid_covariance(cov):
    with pytest.raises(ValueError):
        DispersionModel(MEAN, cov)


def test_reduced_coordinates():
    X = np.array([MEAN, MEAN * [1, 1, 1, 0, 1, 1, 1]])
    s = reduced_coordinates(X)
    assert np.allclose(s[0], [-50.0, -150.0])
    assert np.all(np.isnan(s[1]))


# ------------------------------------------------------------------ datasets
def _boundary():
    return GuidanceBoundary(MEAN[:3], MEAN[3:6], [0, 1.62, 0], [0, 800, 0], [0, 0, 0], [0, 1.62, 0])


def test_datasets_all_controllable_with_small_dispersions():
    c = MoonConstants()
    X = sample_dispersions(DispersionModel.diagonal(MEAN, 5.0, 0.1, n_samples=6, seed=1))
    D, T = build_datasets(X, _boundary(), tgo_grid(100, 220, 20), c, (0.3 * 3040, 3040))
    assert np.all(T.labels == 1)
    assert len(D) == 6 and np.all(D.dm >= 0)
    assert T.rollout_mass.shape == (6, 7)
    assert len(T.controllable_set()) == 6


def test_datasets_nothing_reachable_without_thrust():
    c = MoonConstants()
    X = sample_dispersions(DispersionModel.diagonal(MEAN, 50.0, 1.0, n_samples=5, seed=1))
    D, T = build_datasets(X, _boundary(), tgo_grid(100, 220, 40), c, (0.0, 1e-9))
    assert np.all(T.labels == -1)
    assert len(D) == 0 == np.sum(T.labels > 0)


# ------------------------------------------------------------------ conic fit
def test_separable_circle_is_recovered(rng):
    data = _labelled_disc(rng)
    b = fit_conic_boundary(data, iterations=20_000)
    assert b.training_accuracy == 1.0
    assert b.discriminant < 0
    assert b.inside_positive
    zs = b.zero_set(720)
    th = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    circle = np.column_stack([np.cos(th), np.sin(th)])
    h = max(directed_hausdorff(zs, circle)[0], directed_hausdorff(circle, zs)[0])
    assert h < 0.05
    assert abs(np.linalg.norm(b.coefficients) - 1) < 1e-12


def test_single_flipped_outlier_is_tolerated(rng):
    data = _labelled_disc(rng, n=500)
    k = int(np.argmin(np.abs(np.hypot(*data.reduced.T) - 0.5)))
    data.labels[k] *= -1
    b = fit_conic_boundary(data, iterations=20_000)
    n = len(data.labels)
    assert b.training_accuracy >= (n - 1) / n


def test_prediction_is_scale_invariant(rng):
    data = _labelled_disc(rng, n=400)
    b = fit_conic_boundary(data, iterations=10_000)
    scaled = ConicBoundary(7.3 * b.coefficients)
    assert np.array_equal(b.predict(data.reduced), scaled.predict(data.reduced))
    m1 = robustness_margin(b, data.reduced[:10])
    m2 = robustness_margin(scaled, data.reduced[:10])
    assert np.array_equal(np.sign(m1), np.sign(m2))


def test_fit_determinism(rng):
    data = _labelled_disc(rng, n=300)
    a = fit_conic_boundary(data, iterations=5000, seed=3)
    b = fit_conic_boundary(data, iterations=5000, seed=3)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_non_elliptic_fit_raises(rng):
    s = rng.uniform(-2, 2, size=(600, 2))
    s = s[np.abs(s[:, 0] * s[:, 1]) > 0.1]
    y = np.where(s[:, 0] * s[:, 1] > 0, 1, -1)
    data = ClassificationDataset(np.zeros((len(s), 7)), y, s)
    with pytest.raises(ConvexityError) as info:
        fit_conic_boundary(data, iterations=5000)
    assert len(info.value.args) >= 1


def test_fit_needs_both_labels(rng):
    data = _labelled_disc(rng, n=50)
    data.labels[:] = 1
    with pytest.raises(ValueError):
        fit_conic_boundary(data)


def test_conic_dict_round_trip():
    b = ConicBoundary([-1, 0, -1, 0, 0, 1], True, 0.99)
    again = ConicBoundary.from_dict(b.to_dict())
    assert np.array_equal(again.coefficients, b.coefficients) and again.training_accuracy == 0.99


# ------------------------------------------------------------------ margin
UNIT = ConicBoundary([-1.0, 0.0, -1.0, 0.0, 0.0, 1.0])  # 1 - s1^2 - s2^2, positive inside


def test_margin_examples():
    assert robustness_margin(UNIT, [0.5, 0.0]) == pytest.approx(0.75)
    assert robustness_margin(UNIT, [0.0, 1.0]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegeneratePointError):
        robustness_margin(UNIT, [0.0, 0.0])


def test_margin_sign_flips_along_rays(rng):
    for th in rng.uniform(0, 2 * np.pi, 20):
        u = np.array([np.cos(th), np.sin(th)])
        assert robustness_margin(UNIT, 0.9 * u) > 0 > robustness_margin(UNIT, 1.1 * u)


def test_margin_sigma_uses_controllable_samples(rng):
    data = _labelled_disc(rng, n=200)
    m = robustness_margin(UNIT, data.reduced[data.labels > 0])
    assert margin_sigma(UNIT, data) == pytest.approx(np.std(m, ddof=1))


# ------------------------------------------------------------------ refinement
H = 6000.0
# the centre (where the first-order margin is unbounded) lies outside the reachable s2 = H/w range
CENTER = np.array([-60.0, -350.0])
RADII = np.array([60.0, 200.0])


def _ellipse():
    # 1 - ((s1 - c1)/r1)^2 - ((s2 - c2)/r2)^2, positive inside
    p, q = 1 / RADII**2
    c1, c2 = CENTER
    return ConicBoundary([-p, 0.0, -q, 2 * p * c1, 2 * q * c2, 1 - p * c1**2 - q * c2**2])


def _dm_truth(F):
    S, Hh, v, w = F.T
    return 80 + 1e-6 * (S + 3000) ** 2 + 4e-3 * (v - 45) ** 2 + 6e-3 * (w + 20) ** 2


@pytest.fixture(scope="module")
def surrogate():
    rng = np.random.default_rng(5)
    F = np.column_stack([rng.uniform(-6500, -2000, 200), rng.normal(H, 300, 200),
                         rng.uniform(40, 100, 200), rng.uniform(-80, -20, 200)])
    states = np.zeros((200, 7))
    states[:, [0, 1, 3, 4]] = F
    return fit_dm_surrogate(GuidanceDataset(states, np.zeros(200), _dm_truth(F)))


def _cfg(lam=0.5, **kw):
    base = dict(lam=lam, H=H, S_bounds=(-6000.0, -2000.0), v_bounds=(40.0, 100.0), w_bounds=(-80.0, -20.0),
                sigma=0.1, dm_scale=1.0, starts_per_axis=2)
    base.update(kw)
    return RefinementConfig(**base)


def test_quadratic_surrogate_is_exact(surrogate):
    F = np.array([[-3500.0, H, 55.0, -30.0]])
    assert surrogate(F[0]) == pytest.approx(_dm_truth(F)[0], rel=1e-10)
    assert surrogate.rms < 1e-9


def test_lambda_extremes(surrogate):
    b = _ellipse()
    fuel = refine_waypoint(b, surrogate, _cfg(0.0))
    robust = refine_waypoint(b, surrogate, _cfg(1.0))
    assert fuel.margin > 0 and robust.margin > fuel.margin
    assert fuel.dm <= robust.dm
    # fuel-optimal pick against a brute-force grid of the feasible box
    S, v, w = np.meshgrid(np.linspace(-6000, -2000, 41), np.linspace(40, 100, 31), np.linspace(-80, -20, 31))
    P = np.column_stack([S.ravel(), v.ravel(), w.ravel()])
    s = np.column_stack([P[:, 0] / P[:, 1], H / P[:, 2]])
    ok = b.value(s) > 0
    F = np.column_stack([P[:, 0], np.full(len(P), H), P[:, 1], P[:, 2]])
    assert fuel.dm <= np.min(_dm_truth(F[ok])) + 1e-3
    assert robust.margin >= np.max(robustness_margin(b, s[ok]) / 0.1) - 1e-3


def test_refinement_respects_v_sops(surrogate):
    wp = refine_waypoint(_ellipse(), surrogate, _cfg(1.0, v_sops=50.0))
    assert wp.v <= 50.0


def test_infeasible_box_raises(surrogate):
    with pytest.raises(InfeasibleRefinementError):
        refine_waypoint(_ellipse(), surrogate, _cfg(0.5, S_bounds=(300.0, 400.0)))


def test_refinement_config_validation():
    with pytest.raises(ValueError):
        _cfg(1.5)
    with pytest.raises(ValueError):
        _cfg(0.5, S_bounds=(1.0, 0.0))
    with pytest.raises(ValueError):
        _cfg(0.5, sigma=0.0)


def test_tradeoff_curve_properties(surrogate):
    curve = trace_tradeoff(_ellipse(), surrogate, np.linspace(0, 1, 21), _cfg())
    m, d = curve.margins, curve.dms
    assert np.all(np.isfinite(m))
    assert np.all(np.diff(m) >= -1e-12)
    order = np.argsort(m, kind="stable")
    assert np.all(np.diff(d[order]) >= -1e-12)
    for i in range(len(m)):
        for j in range(len(m)):
            assert not (m[j] >= m[i] and d[j] <= d[i] and (m[j] > m[i] or d[j] < d[i]))
    assert curve.at_margin(0.0).lam == 0.0
    assert curve.at_margin(1e9).waypoint.margin == np.max(m)
    assert np.all(np.isfinite(curve.fuel_per_margin()) | np.isnan(curve.fuel_per_margin()))


def test_tradeoff_rejects_bad_weights(surrogate):
    with pytest.raises(ValueError):
        trace_tradeoff(_ellipse(), surrogate, [0.0, 1.2], _cfg())


# ------------------------------------------------------------------ rough-braking search helpers
def test_interval_margins():
    D = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    feas = np.array([True, True, False, True, True])
    m = _interval_margins(D, feas, 1.0, 5.0)
    assert np.allclose(m[[0, 1, 3, 4]], [0.0, 1.0, 1.0, 0.0]) and np.isnan(m[2])


def test_curve_midpoint_picks_middle_of_front():
    margin = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    dm = np.array([10.0, 11.0, 12.0, 13.0, 14.0])
    assert _curve_midpoint(margin, dm) == 2
    # a dominated point is never picked, ties go to the lower-margin point
    assert _curve_midpoint(np.array([1.0, 1.0, 2.0]), np.array([5.0, 6.0, 7.0])) == 0
    assert _curve_midpoint(np.array([1.0, np.nan]), np.array([5.0, np.nan])) == 0


def test_line_search_rejects_bad_range():
    with pytest.raises(ValueError):
        rough_braking_line_search(MissionConfig(), np.zeros(7), 2000.0, (5e5, 4e5), 1e4)
    with pytest.raises(ValueError):
        rough_braking_line_search(MissionConfig(), np.zeros(7), 2000.0, (4e5, 5e5), 0.0)
