import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from diflab import diffable as df, targets, train
from diflab.dif import (ConditionalDifLayer, ConditionalDifModel, CouplingLayer, DifLayer,
                        DifStack, expand_cascade)
from diflab.diffable import ParameterStore, Tensor


def random_model(dim=1, K=3, seed=0, hidden=(8,), scale=0.5):
    m = DifStack(dim, [DifLayer("l0", dim, K, hidden)], seed=seed)
    m.store.values[:] += np.random.default_rng(seed + 1).normal(scale=scale, size=len(m.store))
    return m


def identity_model(dim=1):
    return DifStack(dim, [DifLayer("l0", dim, 1, ())], seed=0, locs={0: np.zeros((1, dim))})


def total_loglik(model, x, store=None):
    return df.evaluate(lambda p, b: model.log_density_graph(p, b).sum(), store or model.store, x)


# -- mle ----------------------------------------------------------------------------------------
def test_mle_identity_at_zero():
    m = identity_model()
    value = df.evaluate(lambda p, b: train.mle_loss(m, p, b), m.store, np.zeros((1, 1)))
    assert value == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-15)
    assert value == pytest.approx(0.918939, abs=1e-6)


def test_mle_duplicate_batch_invariant():
    m = random_model()
    x = np.random.default_rng(2).normal(size=(16, 1))
    f = lambda p, b: train.mle_loss(m, p, b)
    assert df.evaluate(f, m.store, np.vstack([x, x])) == pytest.approx(df.evaluate(f, m.store, x), rel=1e-14)


# -- GEM ----------------------------------------------------------------------------------------
def test_gem_tangency_and_gradient_equality():
    m = random_model(K=3, seed=3)
    x = np.random.default_rng(4).normal(size=(16, 1)) * 2
    frozen = m.store.copy()
    g = lambda p, b: train.gem_surrogate(m, p, b, frozen)
    ll = lambda p, b: m.log_density_graph(p, b).sum()
    gv, gg = df.value_and_grad(g, m.store, x)
    lv, lg = df.value_and_grad(ll, m.store, x)
    assert abs(gv - lv) <= 1e-10 * abs(lv)
    assert np.max(np.abs(gg - lg)) <= 1e-8 * np.max(np.abs(lg))


def test_gem_minorizes():
    m = random_model(K=3, seed=5)
    x = np.random.default_rng(6).normal(size=(16, 1)) * 2
    frozen = m.store.copy()
    rng = np.random.default_rng(7)
    for _ in range(50):
        theta = m.store.with_values(m.store.values + rng.normal(scale=0.3, size=len(m.store)))
        g = df.evaluate(lambda p, b: train.gem_surrogate(m, p, b, frozen), theta, x)
        assert g <= total_loglik(m, x, theta) + 1e-9


def test_gem_drops_underflowed_responsibilities():
    m = random_model(K=2, seed=8)
    for k, mp in enumerate(m.layers[0].maps):
        mp.set(m.store, np.array([-200.0 + 400.0 * k]), np.array([0.1]))
    x = np.array([[-200.0], [200.0]])
    log_v = train.responsibilities(m, x)
    assert np.any(np.exp(log_v) == 0)
    value = df.evaluate(lambda p, b: train.gem_surrogate(m, p, b, m.store.copy()), m.store, x)
    assert value == pytest.approx(total_loglik(m, x), rel=1e-12)


def test_gem_step_zero_gradient_keeps_theta():
    m = identity_model()
    before = m.store.values.copy()
    res = train.gem_step(m, np.array([[-1.0], [1.0]]), lr=0.1)
    np.testing.assert_array_equal(m.store.values, before)
    assert res.grad_norm == 0.0


def test_gem_step_moves_location_toward_mean():
    m = identity_model()
    x = np.random.default_rng(9).normal(loc=3.0, size=(32, 1))
    train.gem_step(m, x, lr=0.01, line_search=False)
    mu = m.store.get("l0.map0.loc")[0]
    assert 0 < mu < x.mean()
    assert mu == pytest.approx(0.01 * np.sum(x), rel=1e-12)


def test_gem_line_search_monotone():
    m = random_model(K=3, seed=10)
    x = np.random.default_rng(11).normal(size=(40, 1)) * 2
    prev = total_loglik(m, x)
    for _ in range(15):
        res = train.gem_step(m, x, lr=1.0, line_search=True)
        cur = total_loglik(m, x)
        assert cur >= prev - 1e-9
        if not res.accepted:
            break
        prev = cur


def test_gem_rejects_bad_lr():
    with pytest.raises(ValueError):
        train.gem_step(identity_model(), np.zeros((2, 1)), lr=0.0)


# -- reverse KL --------------------------------------------------------------------------------
def mixture_log_p(scale=1.0):
    return targets.log_p_callable(targets.gaussian_mixture([0.4, 0.6], [[-1.0], [1.5]], [0.6, 0.8], scale=scale))


def test_rb_kl_single_component_is_nf_objective():
    m = random_model(K=1, seed=12, hidden=())
    z = np.random.default_rng(13).normal(size=(32, 1))
    log_p = mixture_log_p()
    value = df.evaluate(lambda p, b: train.rb_kl_loss(m, p, log_p, b), m.store, z)
    mp = m.layers[0].maps[0]
    x = m.store.get(mp.loc_name) + np.exp(m.store.get(mp.log_scale_name)) * z
    expect = np.mean(m.log_density(x) - log_p(x))
    assert value == pytest.approx(expect, rel=1e-12)


def test_rb_kl_shift_under_scaling():
    m = random_model(K=3, seed=14)
    z = np.random.default_rng(15).normal(size=(32, 1))
    a = df.evaluate(lambda p, b: train.rb_kl_loss(m, p, mixture_log_p(), b), m.store, z)
    c = 7.3
    b_ = df.evaluate(lambda p, b: train.rb_kl_loss(m, p, mixture_log_p(c), b), m.store, z)
    assert b_ == pytest.approx(a - np.log(c), abs=1e-12)


def test_rb_kl_cascaded_matches_expansion():
    m = DifStack(1, [DifLayer("a", 1, 2, (6,)), DifLayer("b", 1, 3, (6,))], seed=16)
    m.store.values[:] += np.random.default_rng(17).normal(scale=0.4, size=len(m.store))
    z = np.random.default_rng(18).normal(size=(32, 1))
    log_p = mixture_log_p()
    casc = df.evaluate(lambda p, b: train.rb_kl_loss_cascaded(m, p, log_p, b), m.store, z)
    flat = expand_cascade(m)
    single = df.evaluate(lambda p, b: train.rb_kl_loss(flat, p, log_p, b), flat.store, z)
    assert abs(casc - single) <= 1e-10
    with df.no_grad():
        _, logw = m.backward_paths(m.store.constants(), Tensor(z))
    np.testing.assert_allclose(np.exp(logw.data).sum(axis=1), 1.0, atol=1e-12)


def test_rb_kl_cascaded_needs_two_layers():
    with pytest.raises(ValueError):
        train.rb_kl_loss_cascaded(random_model(), None, None, np.zeros((1, 1)))


def test_rb_kl_zero_for_prior_target():
    m = identity_model()
    log_q = lambda x: -0.5 * df.square(df.as_tensor(x)).sum(axis=1) - 0.5 * np.log(2 * np.pi)
    z = np.random.default_rng(19).normal(size=(64, 1))
    assert df.evaluate(lambda p, b: train.rb_kl_loss(m, p, log_q, b), m.store, z) == pytest.approx(0.0, abs=1e-12)


# -- GMM -----------------------------------------------------------------------------------------
def test_gmm_single_component_closed_form():
    x = np.random.default_rng(20).normal(size=(200, 2)) * [1.0, 3.0] + [2.0, -1.0]
    g = train.gmm_em_fit(x, 1, iters=5)
    assert g.weights.tolist() == [1.0]
    np.testing.assert_allclose(g.means[0], x.mean(axis=0), rtol=1e-13)
    np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-12)


def test_gmm_em_monotone_and_recovers_clusters():
    rng = np.random.default_rng(21)
    x = np.concatenate([rng.normal(-10, 1, size=(500, 1)), rng.normal(10, 1, size=(500, 1))])
    g = train.gmm_em_fit(x, 2, iters=50, seed=0)
    assert np.all(np.diff(g.loglik_trace) >= -1e-10)
    np.testing.assert_allclose(np.sort(g.means[:, 0]), [x[:500].mean(), x[500:].mean()], atol=0.1)
    assert np.sort(g.means[:, 0]) == pytest.approx([-10, 10], abs=0.2)


def test_gmm_reseeds_empty_components():
    x = np.concatenate([np.zeros((50, 1)), np.ones((50, 1))])
    g = train.gmm_em_fit(x, 4, iters=20, seed=1)
    assert np.all(np.isfinite(g.means)) and np.all(g.weights > 0)


def test_gmm_input_validation():
    with pytest.raises(ValueError):
        train.gmm_em_fit(np.zeros((2, 1)), 3)


def test_warm_start_matches_gmm():
    rng = np.random.default_rng(22)
    x = np.concatenate([rng.normal(-2, 0.5, (300, 2)), rng.normal(2, 1.0, (300, 2))])
    g = train.gmm_em_fit(x, 3, iters=40, seed=2)
    m = DifStack(2, [DifLayer("l0", 2, 3, (16,))], seed=3)
    train.warm_start_from_gmm(m, g)
    pts = rng.normal(size=(100, 2)) * 3
    oracle = logsumexp([np.log(g.weights[k]) + stats.norm.logpdf(pts, g.means[k], np.sqrt(g.variances[k])).sum(axis=1)
                        for k in range(3)], axis=0)
    np.testing.assert_allclose(m.log_density(pts), oracle, atol=1e-12, rtol=0)
    assert np.mean(m.log_density(x)) == pytest.approx(g.loglik_trace[-1], abs=1e-12)


def test_warm_start_k_mismatch():
    g = train.gmm_em_fit(np.random.default_rng(0).normal(size=(50, 1)), 2, iters=3)
    with pytest.raises(ValueError):
        train.warm_start_from_gmm(random_model(K=3), g)


def test_gem_after_warm_start_never_below_em():
    rng = np.random.default_rng(23)
    x = targets.sample_target(targets.five_modes_1d(), 300, rng)
    g = train.gmm_em_fit(x, 4, iters=100, seed=0)
    m = DifStack(1, [DifLayer("l0", 1, 4, (16,))], seed=0)
    train.warm_start_from_gmm(m, g)
    train.fit(m, x, train.TrainConfig("gem", steps=20, lr=0.01, line_search=True))
    assert np.mean(m.log_density(x)) >= g.loglik_trace[-1] - 1e-9


# -- SIR -------------------------------------------------------------------------------------------
def test_sir_self_target_uniform_weights():
    m = random_model(K=2, seed=24)
    res = train.sir_resample(m, m.log_density, 2000, 500, seed=0)
    np.testing.assert_allclose(res.weights, 1 / 2000, rtol=1e-9)
    assert res.Z == pytest.approx(1.0, rel=1e-9)
    assert res.samples.shape == (500, 1)


def test_sir_shifted_gaussian_mean():
    m = identity_model()
    log_p = lambda x: stats.norm.logpdf(np.asarray(x)[:, 0], 2.0, 1.0)
    res = train.sir_resample(m, log_p, 100_000, 1000, seed=1)
    assert res.expectation()[0] == pytest.approx(2.0, abs=0.05)


def test_sir_normalizing_constant():
    spec = targets.gaussian_mixture([0.5, 0.5], [[-1.0], [1.0]], [1.0, 1.0], scale=3.0)
    m = DifStack(1, [DifLayer("l0", 1, 1, ())], seed=0, locs={0: np.zeros((1, 1))})
    m.layers[0].maps[0].set(m.store, np.array([0.0]), np.array([1.6]))
    res = train.sir_resample(m, targets.log_p_callable(spec), 100_000, 100, seed=2)
    assert res.Z == pytest.approx(3.0, rel=0.05)
    assert res.Z_se < 0.05


def test_sir_disjoint_support():
    with pytest.raises(ValueError):
        train.sir_resample(identity_model(), lambda x: np.full(len(x), -np.inf), 100, 10)
    with pytest.raises(ValueError):
        train.sir_resample(identity_model(), lambda x: np.zeros(len(x)), 10, 100)


# -- fit --------------------------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(objective="nope")
    with pytest.raises(ValueError):
        train.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        train.TrainConfig(batch_size=0)
    assert train.TrainConfig("gem").use_full_batch
    assert not train.TrainConfig("mle").use_full_batch


def test_fit_zero_steps():
    m = random_model()
    before = m.store.values.copy()
    trace = train.fit(m, np.zeros((10, 1)), train.TrainConfig(steps=0))
    assert len(trace) == 0
    np.testing.assert_array_equal(m.store.values, before)


@pytest.mark.parametrize("objective", ["mle", "rb_kl"])
def test_fit_deterministic(objective):
    data = targets.sample_target(targets.five_modes_1d(), 200, 0) if objective == "mle" else mixture_log_p()
    traces = []
    for _ in range(2):
        m = random_model(K=2, seed=25)
        traces.append(train.fit(m, data, train.TrainConfig(objective, steps=15, batch_size=32, lr=1e-2, seed=4)))
    assert traces[0].objective == traces[1].objective
    assert traces[0].grad_norm == traces[1].grad_norm


def test_fit_divergence_reports_step():
    m = identity_model()
    with pytest.raises(train.TrainingDiverged) as info:
        train.fit(m, np.array([[1e200]]), train.TrainConfig(steps=3))
    assert info.value.step == 0


def test_fit_rb_kl_needs_log_density():
    with pytest.raises(ValueError):
        train.fit(identity_model(), np.zeros((3, 1)), train.TrainConfig("rb_kl", steps=1))


def test_fit_from_sampleable_target():
    m = random_model(K=2, seed=26)
    trace = train.fit(m, targets.five_modes_1d(), train.TrainConfig("mle", steps=5, batch_size=64, lr=1e-2))
    assert len(trace) == 5


def test_trace_csv(tmp_path):
    t = train.TraceRecord()
    t.append(1.5, 0.25, 0.01)
    t.append(1.25, 0.125, 0.02)
    t.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,objective,grad_norm,seconds"
    assert lines[2].startswith("1,1.25,0.125,")


# -- conditional -------------------------------------------------------------------------------------
def test_conditional_loss_is_mean_negative_loglik():
    layer = ConditionalDifLayer("c", 1, 2, K=2, hidden=(8,), cov_hidden=(8,))
    m = ConditionalDifModel(layer, seed=27)
    m.store.values[:] += np.random.default_rng(28).normal(scale=0.3, size=len(m.store))
    rng = np.random.default_rng(29)
    x, om = rng.normal(size=(20, 1)), rng.normal(size=(20, 2))
    value = df.evaluate(lambda p, b: train.conditional_mle_loss(m, p, *b), m.store, (x, om))
    assert value == pytest.approx(-np.mean(m.log_density(x, om)), rel=1e-14)


def test_conditional_ignoring_covariate_reduces_to_mle():
    layer = ConditionalDifLayer("c", 1, 1, K=1, hidden=(), cov_hidden=())
    cm = ConditionalDifModel(layer, seed=30, locs=np.array([[0.7]]))
    um = DifStack(1, [DifLayer("l0", 1, 1, ())], seed=0, locs={0: np.array([[0.7]])})
    x = np.random.default_rng(31).normal(size=(25, 1))
    om = np.random.default_rng(32).normal(size=(25, 1))
    a = df.evaluate(lambda p, b: train.conditional_mle_loss(cm, p, x, b), cm.store, om)
    b = df.evaluate(lambda p, b: train.mle_loss(um, p, b), um.store, x)
    assert a == pytest.approx(b, rel=1e-14)


def test_coupling_tail_rb_kl_runs():
    m = DifStack(2, [CouplingLayer("c", 2, 0, (8,)), DifLayer("d", 2, 2, (8,))], seed=33)
    log_p = targets.log_p_callable(targets.two_moons())
    trace = train.fit(m, log_p, train.TrainConfig("rb_kl", steps=3, batch_size=16, lr=1e-3))
    assert len(trace) == 3 and np.all(np.isfinite(trace.objective))


def test_gem_surrogate_gradient_k3_m16():
    m = random_model(K=3, seed=21)
    x = np.random.default_rng(22).normal(scale=2.0, size=(16, 1))
    frozen = m.store.copy()
    m.store.values[:] += np.random.default_rng(23).normal(scale=0.1, size=len(m.store))
    assert df.finite_diff_check(lambda p, b: train.gem_surrogate(m, p, b, frozen), m.store, inputs=x) <= 1e-4


def test_cosine_schedule_endpoints():
    cfg = train.TrainConfig("mle", steps=11, lr=0.2, schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(0.2)
    assert cfg.lr_at(5) == pytest.approx(0.1)
    assert cfg.lr_at(10) == pytest.approx(0.0, abs=1e-15)
    assert train.TrainConfig("mle", steps=11, lr=0.2).lr_at(7) == 0.2
