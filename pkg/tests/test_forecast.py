import csv
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from flowcast.data import ExampleSet
from flowcast.dimred import Reducer
from flowcast.flow import Checkpoint, FlowTrainConfig, build_flow, fit_flow, sample
from flowcast.forecast import (
    ContourLevel,
    DensityGrid,
    GridSpec,
    OutOfDistributionError,
    calibration_score,
    conditional_density,
    contour_levels,
    hdr_threshold,
    hit,
    hit_rate,
    select_checkpoint,
    write_density_grid,
)

R683 = math.sqrt(-2 * math.log(1 - 0.683))  # radius of the .683 disc of a 2-D standard normal


def gaussian_model(mu, sd, m=2):
    """Zero coupling nets + standard latent: the joint density is N(mu, diag sd^2)."""
    mu, sd = np.asarray(mu, float), np.asarray(sd, float)
    model = build_flow(2, m, components=1, depth=3, width=4)
    P = {k: np.zeros_like(v) for k, v in model.params.items()}
    model = model.with_params(P)
    # flow is v -> v + 1 with w ~ N(0, I), so z = sd * (w - 1) + mean
    return type(model)(model.p, model.m, model.layers, model.latent, model.params, mu + sd, sd)


def identity_reducer(m=2):
    return Reducer("pca", m, m, {"V": np.eye(m)}, np.zeros(m), np.ones(m), np.zeros(m), np.ones(m))


def examples(Y, T):
    n = len(Y)
    return ExampleSet(np.asarray(Y, float), np.asarray(T, float), 0, (0, 0), 1, 1,
                      np.zeros(n, dtype=int), np.array(["Q1"] * n))


def pdf_grid(spec, pdf):
    vals = pdf(spec.points()).reshape(spec.n)
    return DensityGrid(spec, vals / (vals.sum() * spec.cell_area))


STD2 = lambda P: stats.multivariate_normal(np.zeros(2), np.eye(2)).pdf(P)  # noqa: E731
BOX = GridSpec((-6.0, -6.0), (6.0, 6.0), (128, 128))


# --- grid spec / density ---------------------------------------------------------------

def test_grid_spec_expands_bounding_box():
    spec = GridSpec.from_responses(np.array([[0.0, -1.0], [4.0, 1.0]]))
    assert spec.lo == (-1.0, -1.5) and spec.hi == (5.0, 1.5) and spec.n == (128, 128)
    assert spec.cell_area == pytest.approx(6 / 128 * 3 / 128)


def test_conditional_density_normalizes():
    model = gaussian_model([0.5, -1.0, 2.0, 0.0], [1.0, 2.0, 0.7, 1.0])
    spec = GridSpec((-6.0, -10.0), (7.0, 8.0), (64, 64))
    rng = np.random.default_rng(0)
    for t in rng.normal(1.0, 1.0, size=(20, 2)):
        g = conditional_density(model, t, spec)
        assert abs(g.mass() - 1) <= 1e-3
        assert np.all(g.values >= 0)


def test_conditional_density_matches_analytic_gaussian():
    model = gaussian_model([0.5, -1.0, 2.0, 0.0], [1.0, 2.0, 0.7, 1.0])
    g = conditional_density(model, [1.0, 0.5], GridSpec((-6.0, -12.0), (7.0, 10.0), (128, 128)))
    P = g.spec.points()
    w = g.values.ravel() * g.cell_area
    np.testing.assert_allclose(w @ P, [0.5, -1.0], atol=1e-3)
    np.testing.assert_allclose(np.sqrt(w @ (P - [0.5, -1.0]) ** 2), [1.0, 2.0], rtol=2e-3)


def test_out_of_distribution_conditioning_is_an_error():
    model = gaussian_model(np.zeros(4), np.ones(4))
    with pytest.raises(OutOfDistributionError, match="below"):
        conditional_density(model, [1e3, 0.0], BOX)


# --- contours / hits -----------------------------------------------------------------

def test_threshold_of_standard_normal():
    spec = GridSpec((-7.0, -7.0), (7.0, 7.0), (256, 256))
    lv = hdr_threshold(pdf_grid(spec, STD2), 0.683)
    assert R683 == pytest.approx(1.5152, abs=1e-3)
    expected = math.exp(-R683 ** 2 / 2) / (2 * math.pi)
    assert expected == pytest.approx(0.05045, abs=1e-5)
    assert abs(lv.threshold / expected - 1) <= 0.02
    assert lv.mass >= 0.683


def test_threshold_near_one_includes_every_positive_cell():
    spec = GridSpec((-1.0, -1.0), (1.0, 1.0), (32, 32))
    vals = np.zeros(spec.n)
    vals[8:24, 8:24] = np.random.default_rng(1).uniform(1, 2, size=(16, 16))
    g = DensityGrid(spec, vals / (vals.sum() * spec.cell_area))
    lv = hdr_threshold(g, 0.9999)
    assert lv.threshold == g.values[g.values > 0].min()
    assert lv.mass == pytest.approx(1.0)


def test_uniform_grid_ties_enclose_everything():
    spec = GridSpec((0.0, 0.0), (1.0, 1.0), (16, 16))
    g = DensityGrid(spec, np.ones(spec.n))
    assert hdr_threshold(g, 0.683).mass == pytest.approx(1.0)


def test_contour_levels_are_nested():
    rng = np.random.default_rng(2)
    spec = GridSpec((-4.0, -4.0), (4.0, 4.0), (48, 48))
    for _ in range(20):
        c = rng.normal(size=(3, 2))
        pdf = lambda P, c=c: sum(stats.multivariate_normal(m, 0.5 * np.eye(2)).pdf(P) for m in c)  # noqa
        lo, hi = contour_levels(pdf_grid(spec, pdf))
        assert hi.mass >= lo.mass and hi.threshold <= lo.threshold


def test_hit_at_mode_off_grid_and_inside_radius():
    g = pdf_grid(BOX, STD2)
    levels = contour_levels(g)
    i, j = np.unravel_index(np.argmax(g.values), g.values.shape)
    g1, g2 = BOX.centers()
    assert hit(g, levels, (g1[i], g2[j])) == (True, True)
    assert hit(g, levels, (6.5, 0.0)) == (False, False)
    assert hit(g, levels, (1.0, 0.0))[0]
    assert not hit(g, levels, (1.7, 0.0))[0]


def test_hit_is_monotone_across_levels():
    g = pdf_grid(BOX, STD2)
    levels = contour_levels(g)
    for y in np.random.default_rng(3).uniform(-6, 6, size=(500, 2)):
        a, b = hit(g, levels, y)
        assert b or not a


def test_bilinear_interpolation_reproduces_linear_field():
    spec = GridSpec((0.0, 0.0), (4.0, 2.0), (8, 4))
    P = spec.points()
    g = DensityGrid(spec, (1 + P[:, 0] + 2 * P[:, 1]).reshape(spec.n))
    assert g.interpolate((1.3, 0.7)) == pytest.approx(1 + 1.3 + 1.4)
    assert g.interpolate((5.0, 1.0)) == 0.0


# --- calibration -------------------------------------------------------------------

def test_calibration_score_exact_examples():
    assert calibration_score(0.683, 0.954) == 0
    s = calibration_score(1.0, 1.0)
    assert s == Fraction(13, 23) * Fraction(317, 1000) + Fraction(10, 23) * Fraction(46, 1000)
    assert float(s) == pytest.approx(0.19917, abs=1e-5)
    assert calibration_score(0.683, 1.0) == Fraction(1, 50)
    assert float(calibration_score(0.683, 1.0)) == 0.02


def test_calibration_score_is_symmetric_about_nominal():
    rng = np.random.default_rng(4)
    for _ in range(50):
        d1, d2 = (Fraction(int(x), 1000) for x in rng.integers(0, 46, size=2))
        nom = (Fraction(683, 1000), Fraction(954, 1000))
        assert calibration_score(nom[0] + d1, nom[1] + d2) == calibration_score(nom[0] - d1, nom[1] - d2)


def test_calibration_score_zero_only_at_nominal_and_weights_configurable():
    assert calibration_score(0.684, 0.954) > 0
    assert calibration_score(1.0, 0.954, weights=(1, 0)) == Fraction(317, 1000)


def test_hit_rate_at_mode_and_far_off_grid():
    model = gaussian_model(np.zeros(4), np.ones(4))
    spec = GridSpec((-5.0, -5.0), (5.0, 5.0), (64, 64))
    T = np.random.default_rng(5).normal(size=(30, 2))
    rep = hit_rate(model, identity_reducer(), examples(np.zeros((30, 2)), T), spec)
    assert (rep.hr683, rep.hr954) == (1, 1)
    rep = hit_rate(model, identity_reducer(), examples(np.full((30, 2), 40.0), T), spec)
    assert (rep.hr683, rep.hr954) == (0, 0) and rep.n == 30


def test_hit_rate_on_samples_from_the_model():
    model = gaussian_model([1.0, -0.5, 0.0, 0.3], [0.8, 1.5, 1.0, 0.5])
    rng = np.random.default_rng(6)
    Z = sample(model, 600, rng)
    spec = GridSpec.from_responses(Z[:, :2], n=64)
    rep = hit_rate(model, identity_reducer(), examples(Z[:, :2], Z[:, 2:]), spec)
    # 3-sigma binomial band at N = 600
    assert abs(float(rep.hr683) - 0.683) <= 3 * math.sqrt(0.683 * 0.317 / 600)
    assert abs(float(rep.hr954) - 0.954) <= 3 * math.sqrt(0.954 * 0.046 / 600)


def test_hit_rate_skips_rare_out_of_distribution_rows():
    model = gaussian_model(np.zeros(4), np.ones(4))
    spec = GridSpec((-5.0, -5.0), (5.0, 5.0), (32, 32))
    T = np.zeros((200, 2))
    T[7] = 1e3
    rep = hit_rate(model, identity_reducer(), examples(np.zeros((200, 2)), T), spec)
    assert rep.skipped == 1 and rep.n == 199
    T[:5] = 1e3
    with pytest.raises(OutOfDistributionError, match="out-of-distribution"):
        hit_rate(model, identity_reducer(), examples(np.zeros((200, 2)), T), spec)


# --- checkpoint selection -------------------------------------------------------------

def _cp(step, model):
    return Checkpoint(step, model, float("nan"))


def test_single_checkpoint_returned_unchanged():
    model = gaussian_model(np.zeros(4), np.ones(4))
    ex = examples(np.zeros((5, 2)), np.zeros((5, 2)))
    cp = _cp(400, model)
    chosen, scored = select_checkpoint([cp], identity_reducer(), ex, GridSpec((-4, -4), (4, 4), (16, 16)))
    assert chosen is cp and len(scored) == 1


def test_calibration_not_likelihood_governs_selection():
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(400, 4))
    ex = examples(Z[:, :2], Z[:, 2:])
    spec = GridSpec((-5.0, -5.0), (5.0, 5.0), (48, 48))
    sharp = gaussian_model(np.zeros(4), [0.9, 0.9, 1.0, 1.0])  # closer in likelihood, too narrow
    shifted = gaussian_model([0.3, 0.0, 0.0, 0.0], np.ones(4))  # lower likelihood, better calibrated
    ll = [float(np.mean(m.log_density(Z))) for m in (sharp, shifted)]
    assert ll[0] > ll[1]
    chosen, scored = select_checkpoint([_cp(400, sharp), _cp(500, shifted)], identity_reducer(), ex, spec)
    assert chosen.step == 500
    assert scored[1][1].score < scored[0][1].score
    # reversed order: still the better calibrated one
    chosen, _ = select_checkpoint([_cp(400, shifted), _cp(500, sharp)], identity_reducer(), ex, spec)
    assert chosen.step == 400


def test_ties_go_to_later_checkpoint_and_subset_is_seeded():
    model = gaussian_model(np.zeros(4), np.ones(4))
    ex = examples(np.zeros((50, 2)), np.zeros((50, 2)))
    spec = GridSpec((-4.0, -4.0), (4.0, 4.0), (16, 16))
    chosen, scored = select_checkpoint([_cp(400, model), _cp(500, model)], identity_reducer(), ex, spec,
                                       max_examples=10, seed=3)
    assert chosen.step == 500 and scored[0][1].n == 10


# --- trained models ------------------------------------------------------------------

def test_linear_gaussian_conditional_recovered():
    rng = np.random.default_rng(8)
    A = np.array([[1.0], [-0.5]])
    cov = np.array([[0.5, 0.2], [0.2, 0.3]])
    n = 3000
    T = rng.normal(size=(n, 1))
    Y = T @ A.T + rng.multivariate_normal(np.zeros(2), cov, size=n)
    Z = np.hstack([Y, T])
    model, _, _ = fit_flow(Z, Z[:100], 2, 1, FlowTrainConfig(batch=500, seed=3))
    spec = GridSpec.from_responses(Y)
    for t in (-1.0, 0.0, 1.0):
        g = conditional_density(model, [t], spec)
        P = spec.points()
        w = g.values.ravel() * g.cell_area
        mean = w @ P
        C = (P - mean).T @ ((P - mean) * w[:, None])
        # standard error of the least-squares conditional mean at t
        se = np.sqrt(np.diag(cov) * (1 / n + t * t / np.sum(T ** 2)))
        assert np.all(np.abs(mean - A[:, 0] * t) <= 3 * se)
        assert np.all(np.abs(np.diag(C) / np.diag(cov) - 1) <= 0.10)


def test_independent_data_gives_matching_conditionals():
    rng = np.random.default_rng(9)
    n = 8000
    Y = rng.multivariate_normal([0.0, 1.0], [[1.0, 0.6], [0.6, 2.0]], size=n)
    Z = np.column_stack([Y, rng.normal(size=n)])
    model, _, _ = fit_flow(Z, Z[:100], 2, 1, FlowTrainConfig(batch=1000, seed=0))
    spec = GridSpec.from_responses(Y)
    a = conditional_density(model, [-1.0], spec)
    b = conditional_density(model, [1.0], spec)
    tv = 0.5 * np.abs(a.values - b.values).sum() * spec.cell_area
    assert tv <= 0.05


# --- export ---------------------------------------------------------------------------

def test_density_grid_export(tmp_path):
    spec = GridSpec((-1.0, -2.0), (1.0, 2.0), (4, 6))
    g = pdf_grid(spec, STD2)
    levels = contour_levels(g)
    path, side = write_density_grid(g, tmp_path / "grid.csv", levels, t=[0.5, -0.1])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["y1", "y2", "density"] and len(rows) == 1 + 24
    assert float(rows[1][2]) == g.values[0, 0]
    doc = json.loads(side.read_text())
    assert doc["axes"][1] == {"lo": -2.0, "hi": 2.0, "n": 6}
    assert [c["prob"] for c in doc["contours"]] == [0.683, 0.954]
    assert isinstance(levels[0], ContourLevel)
