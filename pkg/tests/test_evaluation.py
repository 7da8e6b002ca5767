import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetvae import evaluation as ev
from hetvae.data import Channel, IrregularSeries, split_condition_target
from hetvae.model import HetvaeConfig, HeTVAE
from hetvae.rng import stream

UNION = [np.round(np.linspace(0.0, 1.0, 11), 10)]


def tiny(seed=0, **kw):
    base = dict(D=1, K=4, d_e=8, H=1, J=8, latent_dim=4, mlp_width=8)
    base.update(kw)
    return HeTVAE(HetvaeConfig(**base), UNION, seed=seed)


def mixture_oracle(x, mu, s2):
    out = []
    for n in range(len(x)):
        dens = sum(math.exp(-((x[n] - mu[s][n]) ** 2) / (2 * s2[s][n])) / math.sqrt(2 * math.pi * s2[s][n]) for s in range(len(mu)))
        out.append(math.log(dens / len(mu)))
    return -sum(out) / len(out)


def toy_cases(n=5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(2, 8))
        t = np.sort(rng.choice(UNION[0], size=k, replace=False))
        out.append(IrregularSeries(f"c{i}", [Channel(t, rng.normal(size=k))]))
    return out


# -- mixture likelihood ------------------------------------------------------------------------


def test_single_component_is_mean_negative_logpdf():
    x, mu, s2 = np.array([0.3, -1.0]), np.array([[0.0, 0.5]]), np.array([[1.0, 0.2]])
    direct = -np.mean(-0.5 * np.log(2 * np.pi * s2[0]) - (x - mu[0]) ** 2 / (2 * s2[0]))
    assert ev.mixture_nll(x, mu, s2) == pytest.approx(direct, abs=1e-15)


def test_identical_components_equal_single_component():
    x, mu, s2 = np.array([0.3, -1.0]), np.array([[0.0, 0.5]]), np.array([[1.0, 0.2]])
    assert ev.mixture_nll(x, np.repeat(mu, 2, 0), np.repeat(s2, 2, 0)) == ev.mixture_nll(x, mu, s2)


def test_mixture_matches_direct_density_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    mu = rng.normal(size=(3, 6))
    s2 = rng.uniform(0.05, 2.0, size=(3, 6))
    assert abs(ev.mixture_nll(x, mu, s2) - mixture_oracle(x, mu, s2)) < 1e-10


def test_mixture_far_outlier_stays_finite():
    assert math.isfinite(ev.mixture_nll(np.array([1e3]), np.zeros((2, 1)), np.full((2, 1), 0.01)))


@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_property_mixture_invariant_to_sample_order(seed, rnd):
    rng = np.random.default_rng(seed)
    mu, s2, x = rng.normal(size=(5, 3)), rng.uniform(0.01, 3, size=(5, 3)), rng.normal(size=3)
    order = list(range(5))
    rnd.shuffle(order)
    assert ev.mixture_nll(x, mu[order], s2[order]) == pytest.approx(ev.mixture_nll(x, mu, s2), abs=1e-13)


# -- point metrics and moments ----------------------------------------------------------------------


def test_point_metric_examples():
    assert ev.point_metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0)
    assert ev.point_metrics([0.0, 0.0], [1.0, -1.0]) == (1.0, 1.0)
    with pytest.raises(ValueError):
        ev.point_metrics([0.0], [1.0, 2.0])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_property_point_metrics_loop_oracle(pairs):
    pred, targ = zip(*pairs)
    mae, mse = ev.point_metrics(pred, targ)
    assert mae == pytest.approx(sum(abs(t - p) for p, t in pairs) / len(pairs), rel=1e-12, abs=1e-9)
    assert mse == pytest.approx(sum((t - p) ** 2 for p, t in pairs) / len(pairs), rel=1e-12, abs=1e-9)
    assert mae**2 <= mse * (1 + 1e-12) + 1e-12


def test_mixture_moments_examples():
    m, v = ev.mixture_moments(np.array([[1.0], [-1.0]]), np.array([[0.01], [0.01]]))
    assert m[0] == 0.0 and v[0] == pytest.approx(1.01, abs=1e-15)


def test_mixture_moments_total_variance_oracle():
    rng = np.random.default_rng(2)
    mu, s2 = rng.normal(size=(7, 4)), rng.uniform(0.01, 1, size=(7, 4))
    m, v = ev.mixture_moments(mu, s2)
    oracle = np.mean(s2 + mu**2, axis=0) - np.mean(mu, axis=0) ** 2
    np.testing.assert_allclose(v, oracle, rtol=0, atol=1e-12)
    assert np.all(v >= s2.min(axis=0) - 1e-15)


# -- evaluate -------------------------------------------------------------------------------------


def test_perfect_homoscedastic_model_closed_form():
    m = tiny(het=False, sigma_c2=1.0)
    for n in ("dec.mu.l2.weight", "dec.mu.l2.bias"):
        m.params[n] = np.zeros_like(m.params[n])
    cases = [IrregularSeries(f"z{i}", [Channel([0.1, 0.4, 0.6, 0.9], np.zeros(4))]) for i in range(3)]
    rep = ev.evaluate(m, cases, n_samples=4)
    assert rep.nll == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)
    assert rep.mse == 0.0 and rep.mae == 0.0 and rep.n_targets == 6


def test_duplicated_test_set_gives_identical_report():
    m = tiny(seed=1)
    cases = toy_cases()
    a = ev.evaluate(m, cases, n_samples=5, seed=3)
    b = ev.evaluate(m, cases + cases[::-1], n_samples=5, seed=3)
    assert b.n_targets == 2 * a.n_targets
    assert b.nll == pytest.approx(a.nll, abs=1e-14) and b.mse == pytest.approx(a.mse, abs=1e-14)


def test_aggregate_equals_hand_combined_cases():
    m = tiny(seed=2)
    cases = toy_cases(5, seed=4)
    rep = ev.evaluate(m, cases, n_samples=6, seed=7, chunk=5)
    logs, errs, n = 0.0, [], 0
    for s in cases:
        key = ev.case_key(s.id)
        c, t = split_condition_target(s, 0.5, stream(7, 200, key))
        noise = ev.latent_noise(m, 6, 7, key)
        mu, s2 = ev.predict(m, [c], t.channels[0].times[None, :], noise[:, None])
        x = t.channels[0].values
        logs += ev.mixture_nll(x, mu[:, 0, :, 0], s2[:, 0, :, 0]) * x.size
        errs.extend(x - mu[:, 0, :, 0].mean(axis=0))
        n += x.size
    assert rep.n_targets == n
    assert rep.nll == pytest.approx(logs / n, abs=1e-12)
    assert rep.mse == pytest.approx(np.mean(np.square(errs)), abs=1e-12)


def test_chunking_and_jobs_do_not_change_results():
    m = tiny(seed=3)
    cases = toy_cases(7, seed=1)
    a = ev.evaluate(m, cases, n_samples=3, chunk=7)
    b = ev.evaluate(m, cases, n_samples=3, chunk=2, jobs=3)
    assert (a.nll, a.mae, a.mse) == (b.nll, b.mae, b.mse)


def test_cases_without_targets_are_skipped():
    m = tiny()
    cases = toy_cases(3) + [IrregularSeries("one", [Channel([0.5], [1.0])])]
    assert ev.evaluate(m, cases, n_samples=2).n_skipped == 1


def test_combined_reports():
    m = tiny(seed=4)
    cases = toy_cases()
    one = ev.evaluate_seeds(m, cases, [5], n_samples=3)
    assert one.nll_std == 0.0 and one.mse_std == 0.0
    same = ev.evaluate_seeds(m, cases, [5, 5], n_samples=3)
    assert same.nll == one.nll and same.nll_std == 0.0
    reps = [ev.evaluate(m, cases, n_samples=3, seed=s) for s in range(5)]
    comb = ev.combine_reports(reps)
    assert comb.nll == pytest.approx(np.mean([r.nll for r in reps]), abs=1e-15)
    assert comb.mae_std == pytest.approx(np.std([r.mae for r in reps]), abs=1e-15)


# -- traces ---------------------------------------------------------------------------------------------


def test_single_sample_trace_std_is_component_sigma():
    m = tiny(seed=5)
    cond = toy_cases(1)[0]
    grid = np.linspace(0, 1, 5)
    tr = ev.interpolation_trace(m, cond, grid, n_samples=1, seed=2)
    noise = ev.latent_noise(m, 1, 2, ev.case_key(cond.id))
    _, s2 = ev.predict(m, [cond], grid[None], noise[:, None])
    np.testing.assert_allclose(tr.std[:, 0], np.sqrt(s2[0, 0, :, 0]), rtol=1e-15)


def test_trace_floor_and_csv():
    m = tiny(seed=6)
    tr = ev.interpolation_trace(m, toy_cases(1)[0], [0.5], n_samples=3)
    assert np.all(tr.std >= 0.1 - 1e-15)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "time,dim,mean,std" and len(lines) == 2


def test_trace_is_repeatable_and_validates_grid():
    m = tiny(seed=7)
    c = toy_cases(1)[0]
    assert ev.interpolation_trace(m, c, [0.1, 0.2], seed=1).to_csv() == ev.interpolation_trace(m, c, [0.1, 0.2], seed=1).to_csv()
    with pytest.raises(ValueError):
        ev.interpolation_trace(m, c, [0.5, 0.1])


def test_sparsity_response_bins():
    tr = ev.InterpolationTrace(np.array([0.0, 0.01, 0.5]), np.zeros((3, 1)), np.array([[1.0], [3.0], [10.0]]))
    cond = IrregularSeries("c", [Channel([0.0], [0.0])])
    far, near = ev.sparsity_response([tr], [cond])
    assert far == 10.0 and near == 2.0
