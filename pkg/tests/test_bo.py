import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from mpctune import bo, gp
from mpctune.bo import (
    AcquisitionContext,
    BoConfig,
    ConstraintSpec,
    Dataset,
    KnnClassifier,
    Observation,
    SearchSpace,
)


def toy_model(X, Y, noise=0.01):
    hyper = gp.GpHyperparams(float(np.mean(Y)), 1.0, np.full(np.shape(X)[1], 0.3), noise)
    return gp.condition(X, Y, hyper)


# --------------------------------------------------------------------------
# Search space


def test_canonical_rounds_clips_and_projects():
    space = SearchSpace(np.array([[1, 30], [1, 30], [-6, 1]]), (True, True, False),
                        project=lambda x: np.concatenate([x[..., :1], np.maximum(x[..., 1:2], x[..., :1]), x[..., 2:]], -1))
    x = space.canonical(np.array([12.6, 3.2, 5.0]))
    assert x.tolist() == [13.0, 13.0, 1.0]


def test_samples_are_admissible():
    space = SearchSpace(np.array([[1, 30], [-6, 1]]), (True, False))
    for pts in (space.sample_lhs(50, 0), space.sample_uniform(50, 0)):
        assert np.all(pts[:, 0] == np.rint(pts[:, 0]))
        assert np.all((pts >= space.bounds[:, 0]) & (pts <= space.bounds[:, 1]))


def test_dataset_records_round_trip():
    data = Dataset([Observation([1.0, 2.0], [0.5, 0.6], ([1e-4], [0.1])),
                    Observation([3.0, 4.0], [], (), failed=True)])
    back = Dataset.from_records(data.to_records())
    assert back.to_records() == data.to_records()
    X, Y = back.stacked()
    assert X.shape == (2, 2) and Y.tolist() == [0.5, 0.6]


# --------------------------------------------------------------------------
# Reinterpolation and RI


def test_reinterpolation_of_noise_free_model_is_identity():
    rng = np.random.default_rng(0)
    X = rng.random((6, 2))
    model = toy_model(X, np.sin(X).sum(1), noise=0.0)
    ri = bo.reinterpolate(model)
    grid = rng.random((50, 2))
    assert np.max(np.abs(gp.gp_predict(ri, grid).mean - gp.gp_predict(model, grid).mean)) < 1e-9


def test_reinterpolated_means_equal_noisy_means_at_training_inputs():
    rng = np.random.default_rng(1)
    X = rng.random((8, 2))
    model = toy_model(X, np.sin(3 * X).sum(1) + 0.1 * rng.standard_normal(8), noise=0.05)
    ri = bo.reinterpolate(model)
    assert np.allclose(gp.gp_predict(ri, X).mean, gp.gp_predict(model, X).mean, atol=1e-10)


def test_ri_is_zero_at_training_inputs():
    rng = np.random.default_rng(2)
    X = rng.random((8, 2))
    ri = bo.reinterpolate(toy_model(X, rng.standard_normal(8), noise=0.1))
    assert np.all(bo.ri_value(ri, X) == 0.0)


def test_ei_special_cases():
    assert bo.expected_improvement(1.0, 0.0, 0.5) == 0.0
    assert bo.expected_improvement(-0.5, 0.0, 0.5) == pytest.approx(1.0)
    assert bo.expected_improvement(0.0, 1.0, 0.0) == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-15)
    with pytest.raises(ValueError):
        bo.expected_improvement(0.0, -1.0, 0.0)


def test_ei_against_monte_carlo():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(2_000_000)
    for mu, s, best in [(0.0, 1.0, 0.0), (0.3, 0.5, 0.1), (-1.0, 2.0, 0.5)]:
        mc = np.mean(np.maximum(best - (mu + s * z), 0.0))
        assert bo.expected_improvement(mu, s, best) == pytest.approx(mc, abs=3e-3)


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(-5, 5), s=st.floats(0, 5), best=st.floats(-5, 5))
def test_ei_is_non_negative_and_bounded(mu, s, best):
    ei = float(bo.expected_improvement(mu, s, best))
    assert ei >= 0.0
    assert ei >= max(best - mu, 0.0) - 1e-12
    assert ei <= max(best - mu, 0.0) + s / np.sqrt(2 * np.pi) + 1e-12


# --------------------------------------------------------------------------
# Feasibility


def test_feasibility_probabilities():
    X = np.array([[0.1], [0.5], [0.9]])
    Y = np.array([0.0, 0.0, 0.0])
    model = toy_model(X, Y, noise=0.0)
    far = ConstraintSpec("g", 100.0)
    assert bo.constraint_probability(model, far, np.array([[0.3]]))[0] == pytest.approx(1.0)
    # mean exactly at the limit and positive latent variance: one half
    at_limit = ConstraintSpec("g", 0.0)
    assert bo.constraint_probability(model, at_limit, np.array([[0.3]]))[0] == pytest.approx(0.5)


def test_predictive_constraint_uses_z_shift():
    X = np.array([[0.1], [0.9]])
    model = toy_model(X, np.array([0.0, 0.0]), noise=0.04)
    pred = gp.gp_predict(model, np.array([[0.5]]))
    spec = ConstraintSpec("t", 0.5, "predictive", 3.0)
    expected = norm.cdf((0.5 - pred.mean[0]) / np.sqrt(pred.var[0]) - 3.0)
    assert bo.constraint_probability(model, spec, np.array([[0.5]]))[0] == pytest.approx(expected, rel=1e-12)


def test_independent_constraints_multiply():
    X = np.array([[0.1], [0.9]])
    model = toy_model(X, np.array([0.0, 0.0]), noise=0.04)
    xq = np.array([[0.5]])
    s = np.sqrt(gp.gp_predict(model, xq).latent_var[0])
    m = gp.gp_predict(model, xq).mean[0]
    limit = m + norm.ppf(0.9) * s
    spec = ConstraintSpec("g", limit)
    assert bo.prob_feasibility([model], [spec], xq)[0] == pytest.approx(0.9)
    assert bo.prob_feasibility([model, model], [spec, spec], xq)[0] == pytest.approx(0.81)
    assert bo.prob_feasibility([], [], xq)[0] == 1.0


# --------------------------------------------------------------------------
# knn classifiers


def test_inverse_square_vote_hand_example():
    assert bo.inverse_square_vote([1.0, 2.0, 2.0], [1, 0, 0]) == pytest.approx(2 / 3, abs=1e-15)
    assert bo.inverse_square_vote([0.0, 1.0], [1, 0]) == 1.0
    assert bo.inverse_square_vote([], []) == 0.0


def test_inverse_square_vote_scale_and_permutation():
    rng = np.random.default_rng(4)
    d = rng.uniform(0.1, 2.0, 5)
    lab = rng.integers(0, 2, 5)
    p = bo.inverse_square_vote(d, lab)
    assert bo.inverse_square_vote(2 * d, lab) == pytest.approx(p, rel=1e-14)
    for _ in range(50):
        perm = rng.permutation(5)
        assert bo.inverse_square_vote(d[perm], lab[perm]) == pytest.approx(p, rel=1e-14)


def test_knn_extremes():
    pts = np.random.default_rng(5).random((6, 2))
    all_out = KnnClassifier(pts, np.ones(6, bool), np.array([0.3, 0.3]))
    none_out = KnnClassifier(pts, np.zeros(6, bool), np.array([0.3, 0.3]))
    q = np.random.default_rng(6).random((4, 2))
    assert np.all(all_out.prob(q) == 1.0)
    assert np.all(none_out.prob(q) == 0.0)


def test_knn_uses_k_nearest_by_kernel_distance():
    pts = np.array([[0.0], [0.1], [0.2], [0.9]])
    labels = np.array([1, 0, 0, 1], bool)
    clf = KnnClassifier(pts, labels, np.array([1.0]), k=3)
    q = np.array([[0.0001]])
    d = gp.kernel_distance(q, pts[:3], [1.0])[0]
    w = 1 / d**2
    assert clf.prob(q)[0] == pytest.approx(w[0] / w.sum(), rel=1e-12)


# --------------------------------------------------------------------------
# Acquisition


def test_outlier_veto_and_neutral_factors():
    rng = np.random.default_rng(7)
    X = rng.random((5, 2))
    ri = bo.reinterpolate(toy_model(X, rng.standard_normal(5)))
    q = rng.random((10, 2))
    plain = AcquisitionContext(ri)
    assert np.allclose(bo.acquisition(plain, q), bo.ri_value(ri, q))
    veto = AcquisitionContext(ri, outlier_clf=KnnClassifier(X, np.ones(5, bool), np.array([0.3, 0.3])))
    assert np.all(bo.acquisition(veto, q) == 0.0)


def test_composite_equals_product_of_components():
    X = np.array([[0.1, 0.2], [0.5, 0.5], [0.8, 0.3]])
    Y = np.array([1.0, 0.2, 0.7])
    ri = bo.reinterpolate(toy_model(X, Y, noise=0.05))
    cm = toy_model(X, np.array([0.05, 0.1, 0.2]))
    spec = ConstraintSpec("g", 0.15)
    out = KnnClassifier(X, np.array([0, 1, 0], bool), np.array([0.3, 0.3]))
    fail = KnnClassifier(X, np.array([0, 0, 1], bool), np.array([0.3, 0.3]))
    ctx = AcquisitionContext(ri, (cm,), (spec,), out, fail)
    q = np.random.default_rng(8).random((7, 2))
    expected = (bo.ri_value(ri, q) * bo.prob_feasibility([cm], [spec], q)
                * (1 - out.prob(q)) * (1 - fail.prob(q)))
    assert np.allclose(bo.acquisition(ctx, q), expected, atol=1e-12, rtol=0)


# --------------------------------------------------------------------------
# PSO


def test_pso_unimodal():
    target = np.array([0.3, -1.2])
    f = lambda x: -np.sum((x - target) ** 2, axis=1)  # noqa: E731
    x, val = bo.pso_maximize(f, np.array([[-2, 2], [-2, 2]]), rng=0)
    assert np.max(np.abs(x - target)) < 1e-3


def test_pso_integer_dimensions():
    f = lambda x: -np.sum((x - np.array([7.3, 0.5])) ** 2, axis=1)  # noqa: E731
    x, _ = bo.pso_maximize(f, np.array([[1, 30], [0, 1]]), [True, False], rng=1)
    assert x[0] == 7.0 and 1 <= x[0] <= 30


def test_pso_is_deterministic():
    f = lambda x: np.sin(5 * x).sum(1)  # noqa: E731
    a = bo.pso_maximize(f, np.array([[0, 1], [0, 1]]), rng=3)
    b = bo.pso_maximize(f, np.array([[0, 1], [0, 1]]), rng=3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def multimodal(x):
    return np.sum(np.sin(3 * x) * np.exp(-0.1 * x**2), axis=1) - 0.05 * np.sum((x - 1.0) ** 2, axis=1)


def test_pso_beats_random_search_on_multimodal():
    bounds = np.array([[-3, 3]] * 4, dtype=float)
    from mpctune.dynamics import latin_hypercube

    wins = 0
    for seed in range(10):
        _, val = bo.pso_maximize(multimodal, bounds, rng=seed)
        baseline = multimodal(latin_hypercube(10_000, bounds, rng=seed + 100)).max()
        wins += val >= baseline
    assert wins >= 9


# --------------------------------------------------------------------------
# bo_step


def quadratic_problem(seed, noise=0.005):
    rng = np.random.default_rng(seed)
    space = SearchSpace(np.array([[0.0, 1.0]]), (False,))

    def evaluate(x):
        return Observation(x, [(x[0] - 0.37) ** 2 + noise * rng.standard_normal()])

    return space, evaluate


def test_bo_step_does_not_repeat_single_point():
    space = SearchSpace(np.array([[0.0, 1.0], [0.0, 1.0]]), (False, False))
    data = Dataset([Observation([0.4, 0.6], [1.0])])
    step = bo.bo_step(data, space, BoConfig(), 0)
    assert not np.allclose(step.x, [0.4, 0.6])


def test_bo_step_replay_is_deterministic():
    space, evaluate = quadratic_problem(0)
    data = Dataset([evaluate(np.array([v])) for v in (0.1, 0.5, 0.9)])
    a = bo.bo_step(data, space, BoConfig(), 11)
    b = bo.bo_step(data, space, BoConfig(), 11)
    assert np.array_equal(a.x, b.x) and a.components == b.components


def test_bo_finds_noisy_quadratic_minimum():
    for seed in range(10):
        space, evaluate = quadratic_problem(seed)
        run = bo.run_bo(evaluate, space, BoConfig(gp_restarts=3), np.array([[0.05], [0.5], [0.95]]), 23, seed)
        x_best = run.data.observations[run.best_index].x[0]
        assert abs(x_best - 0.37) < 0.05


def test_failed_points_are_not_modelled_but_vetoed():
    space = SearchSpace(np.array([[0.0, 1.0]]), (False,))
    data = Dataset([Observation([0.1], [1.0]), Observation([0.5], [0.5]), Observation([0.9], [], (), failed=True)])
    sur = bo.fit_surrogates(data, space, BoConfig(), 0)
    assert sur.objective.X.shape[0] == 2
    assert sur.failure_clf.prob(np.array([[0.9]]))[0] == 1.0


def test_incumbent_prefers_feasible_points():
    space = SearchSpace(np.array([[0.0, 1.0]]), (False,))
    spec = ConstraintSpec("g", 0.5)
    data = Dataset([
        Observation([0.1], [0.0], ([0.9],)),   # best objective, infeasible
        Observation([0.5], [1.0], ([0.1],)),
        Observation([0.9], [2.0], ([0.2],)),
    ])
    sur = bo.fit_surrogates(data, space, BoConfig(constraints=(spec,)), 0)
    idx, feas = bo.incumbent(data, space, sur)
    assert idx == 1 and feas
