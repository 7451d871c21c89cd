import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hiercast.datasets import preprocess
from hiercast.errors import ShapeMismatchError
from hiercast.evaluation import (
    Forecast,
    context,
    default_halfwidth,
    evaluate,
    evaluate_origins,
    forecast,
    merge_reports,
    run_hfmv,
)
from hiercast.gaussian import GaussianDist, crps_gaussian
from hiercast.hierarchy import build_hierarchy
from hiercast.state import make_generator
from hiercast.training import fit

from test_training import SMALL, small_problem


@pytest.fixture(scope="module")
def trained():
    h, panel = small_problem(seed=4)
    return fit(panel, h, SMALL.with_(seed=4))


def unit_samples(n_nodes, S=1000):
    """Samples whose fitted Gaussian is exactly N(0, 1) at every node."""
    z = np.random.default_rng(0).normal(size=(S, n_nodes))
    z -= z.mean(0)
    return z / z.std(0, ddof=1)


def test_three_node_hand_case(tree3):
    rep = evaluate(unit_samples(3), np.zeros(3), tree3, 1.0)
    expected = 2 / math.sqrt(2 * math.pi) - 1 / math.sqrt(math.pi)
    assert expected == pytest.approx(0.2337, abs=1e-4)
    assert rep.overall[0] == pytest.approx(expected, abs=1e-12)
    assert set(rep.per_level) == {1, 2}


def test_sharp_forecasts_score_near_zero(tree3):
    y = np.array([3.0, 1.0, 2.0])
    s = y + 1e-6 * unit_samples(3)
    assert evaluate(s, y, tree3, 1.0).overall[0] < 1e-5


def test_single_node():
    h = build_hierarchy([], n_nodes=1)
    rep = evaluate(unit_samples(1) + 0.3, [0.0], h, 0.5)
    assert rep.overall == rep.per_node[1] == rep.per_level[1]


@given(st.integers(0, 10_000))
def test_overall_is_mean_and_levels_are_level_means(seed):
    rng = np.random.default_rng(seed)
    from conftest import random_tree

    h = random_tree(rng, int(rng.integers(2, 12)), weights=False)
    n = h.n_nodes
    s = rng.normal(size=(50, n)) * rng.uniform(0.1, 3, size=n) + rng.normal(size=n)
    y = rng.normal(size=n)
    rep = evaluate(s, y, h, rng.uniform(0.1, 2, size=n))
    per = np.array([rep.per_node[i] for i in h.nodes])
    assert abs(rep.overall[0] - per[:, 0].mean()) <= 1e-12
    assert abs(rep.overall[1] - per[:, 1].mean()) <= 1e-12
    for lvl, nodes in h.levels().items():
        assert rep.per_level[lvl][0] == pytest.approx(np.mean([rep.per_node[i][0] for i in nodes]), abs=1e-12)


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = 5
    s = rng.normal(size=(40, n)) + rng.normal(size=n)
    y, L = rng.normal(size=n), rng.uniform(0.2, 2, size=n)
    h = build_hierarchy([(1, j, 1.0) for j in range(2, n + 1)])
    perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
    a = evaluate(s, y, h, L)
    b = evaluate(s[:, perm], y[perm], h, L[perm])
    assert b.overall[0] == pytest.approx(a.overall[0], abs=1e-12)
    for new, old in enumerate(perm):
        assert b.per_node[new + 1] == pytest.approx(a.per_node[old + 1], abs=1e-12)


def test_shape_errors(tree3):
    with pytest.raises(ShapeMismatchError):
        evaluate(np.zeros((10, 2)), np.zeros(3), tree3, 1.0)
    with pytest.raises(ShapeMismatchError):
        evaluate(unit_samples(3), np.zeros(2), tree3, 1.0)
    with pytest.raises(ShapeMismatchError):
        evaluate(unit_samples(3), {1: 0.0, 2: 0.0}, tree3, 1.0)


def test_merge_reports_averages(tree3):
    a = evaluate(unit_samples(3), np.zeros(3), tree3, 1.0)
    b = evaluate(unit_samples(3), np.ones(3), tree3, 1.0)
    m = merge_reports([a, b], tree3)
    assert m.overall[0] == pytest.approx((a.overall[0] + b.overall[0]) / 2, abs=1e-12)


def test_csv_schema(tree5):
    rep = evaluate(unit_samples(5), np.zeros(5), tree5, 1.0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scope,level_or_node,crps,interval_score"
    scopes = [ln.split(",")[0] for ln in lines[1:]]
    assert scopes == ["overall"] + ["level"] * tree5.n_levels + ["node"] * 5
    assert float(lines[1].split(",")[2]) == rep.overall[0]


def test_forecast_reproducible_and_complete(trained):
    a = forecast(trained.state, trained.panel, 1, S=20, seed=3)
    b = forecast(trained.state, trained.panel, 1, S=20, seed=3)
    c = forecast(trained.state, trained.panel, 1, S=20, seed=4)
    assert a.samples.shape == (20, trained.hierarchy.n_nodes)
    assert np.array_equal(a.samples, b.samples) and not np.array_equal(a.samples, c.samples)
    assert sorted(a.as_dict()) == list(trained.hierarchy.nodes)
    with pytest.raises(ValueError):
        forecast(trained.state, trained.panel, 1, S=1)


def test_frozen_latents_clt(trained):
    S = 10_000
    st_, panel = trained.state, trained.panel
    origin = panel.T - 1
    fc = forecast(st_, panel, 1, S=S, seed=0, freeze_latents=True)
    ctx = torch.as_tensor(context(panel.filled_values(), origin, st_.cfg.max_len)).unsqueeze(0)
    with torch.no_grad():
        mu, sigma, _ = st_(ctx, torch.tensor([ctx.shape[-1]]), make_generator(0, "forecast", origin, 1))
    mu = panel.to_original(mu[0].numpy(), axis=0)
    sigma = sigma[0].numpy() * panel.scale
    assert np.all(np.abs(fc.fitted.mu - mu) <= 3 * sigma / math.sqrt(S))


def test_forecast_denormalises():
    h, panel = small_problem(seed=2)
    panel = panel.__class__(panel.values * 50 + 200, panel.mask, panel.node_names)
    r = fit(panel, h, SMALL.with_(preprocess="sum", max_epochs=1, pretrain_epochs=1))
    fc = forecast(r.state, r.panel, 1, S=200, seed=0)
    assert abs(np.median(fc.fitted.mu) - np.median(panel.values[:, -1])) < 0.5 * np.ptp(panel.values)


def test_default_halfwidth():
    h, panel = small_problem()
    L = default_halfwidth(panel, 1)
    v = panel.values
    np.testing.assert_allclose(L, np.std(v[:, 1:] - v[:, :-1], axis=1, ddof=1), rtol=1e-12)


def test_evaluate_origins_is_merge(trained):
    r = trained
    L = default_halfwidth(r.panel, 1, r.train_end)
    origins = [r.train_end - 1, r.train_end]
    rep = evaluate_origins(r.state, r.panel, r.hierarchy, 1, origins, 30, 0, L)
    singles = [evaluate_origins(r.state, r.panel, r.hierarchy, 1, [o], 30, 0, L) for o in origins]
    assert rep.overall[0] == pytest.approx(np.mean([s.overall[0] for s in singles]), abs=1e-12)


def test_hfmv_zero_k(trained):
    r = trained
    a = run_hfmv(r.state, r.panel, r.hierarchy, rho=5, k_percent=0, tau=1, iterations=3, seed=1, S=20)
    b = run_hfmv(r.state, r.panel, r.hierarchy, rho=5, k_percent=0, tau=1, iterations=3, seed=1, S=20)
    assert a.pct_degradation == 0.0 and a.n_masked == 0
    assert a.masked_metrics is a.baseline_metrics
    assert a.baseline_metrics.to_csv() == b.baseline_metrics.to_csv()


def test_hfmv_pooling_and_masking(trained):
    r = trained
    one = run_hfmv(r.state, r.panel, r.hierarchy, 5, 10, 1, iterations=1, seed=2, S=25)
    eight = run_hfmv(r.state, r.panel, r.hierarchy, 5, 10, 1, iterations=8, seed=2, S=25)
    assert one.masked_metrics.n_samples == 25 and eight.masked_metrics.n_samples == 200
    assert eight.baseline_metrics.n_samples == 200
    assert one.n_masked == math.floor(0.1 * r.hierarchy.n_nodes * 5 + 0.5)
    again = run_hfmv(r.state, r.panel, r.hierarchy, 5, 10, 1, iterations=1, seed=2, S=25)
    assert again.pct_degradation == one.pct_degradation
    assert math.isfinite(eight.pct_degradation)
