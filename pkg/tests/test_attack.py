from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advcritic import attack as atk
from advcritic import autodiff as ad
from models import AffineLogProbModel, LinearModel, random_mlp
from oracles import bim, central_diff, mlp_target_logprob_grad, rel_error

NO_BOUNDS = dict(bounds=None, clip=None)


def logistic(w=2.0, b=0.0):
    # two logits [0, w x + b] so p_1 = sigmoid(w x + b)
    return LinearModel(np.array([[0.0, w]]), np.array([0.0, b]))


# -- minimal step ---------------------------------------------------------------


def test_logistic_step_closed_form():
    model = logistic()
    r = atk.minimal_step(np.zeros((1, 1)), 1, 0.9, model)
    # log-likelihood gradient w(1 - p) = 1 at x = 0, so r = ln 0.9 - ln 0.5
    assert r[0, 0] == pytest.approx(np.log(0.9 / 0.5), abs=1e-15)
    assert r[0, 0] == pytest.approx(0.5877866649, abs=1e-10)
    cfg = atk.AttackConfig(confidence=0.9, max_iter=50, **NO_BOUNDS)
    res = atk.high_confidence_attack(np.zeros((1, 1)), 1, cfg, model)
    assert res.success[0] and res.confidence[0] >= 0.9


def test_step_is_zero_when_already_confident():
    model = logistic()
    x = np.array([[3.0]])  # p_1 = sigmoid(6) > 0.9
    np.testing.assert_array_equal(atk.minimal_step(x, 1, 0.9, model), [[0.0]])
    cfg = atk.AttackConfig(confidence=0.9, max_iter=5, **NO_BOUNDS)
    res = atk.high_confidence_attack(x, 1, cfg, model)
    assert res.iterations[0] == 0 and res.success[0]
    np.testing.assert_array_equal(res.x_adv, x)


def test_positive_logit_scaling_keeps_direction():
    x = np.array([[0.3, -0.2]])
    w = np.array([[0.0, 1.0], [0.0, -2.0]])
    base = atk.minimal_step(x, 1, 0.95, LinearModel(w, np.zeros(2)))
    scaled = atk.minimal_step(x, 1, 0.95, LinearModel(3.7 * w, np.zeros(2)))
    u = base / np.linalg.norm(base)
    v = scaled / np.linalg.norm(scaled)
    np.testing.assert_allclose(u, v, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), conf=st.floats(0.3, 0.99))
def test_affine_log_prob_one_step_exact(seed, conf):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=4)
    x = rng.uniform(-0.5, 0.5, (1, 4))
    c = np.log(conf) - 1.0 - a @ x[0]  # start one nat below the target
    model = AffineLogProbModel(a, c)
    r = atk.minimal_step(x, 0, conf, model)
    assert (x + r) @ a + c == pytest.approx(np.log(conf), abs=1e-8)
    cfg = atk.AttackConfig(confidence=conf, max_iter=1, **NO_BOUNDS)
    res = atk.high_confidence_attack(x, 0, cfg, model)
    assert abs(res.x_adv @ a + c - np.log(conf))[0] <= 1e-8
    assert res.success[0]


def test_degenerate_gradient():
    model = LinearModel(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(atk.DegenerateGradientError):
        atk.minimal_step(np.zeros((1, 3)), 1, 0.9, model)
    cfg = atk.AttackConfig(confidence=0.9, max_iter=3)
    with pytest.raises(atk.DegenerateGradientError):
        atk.high_confidence_attack(np.zeros((1, 3)), 1, cfg, model)


def test_config_validation():
    for bad in (dict(confidence=1.0), dict(confidence=0.0), dict(max_iter=0),
                dict(clip=0.0), dict(bounds=(1.0, 0.0)), dict(step="wild")):
        with pytest.raises(ValueError):
            atk.AttackConfig(**bad)
    assert atk.TRAIN_ATTACK.max_iter == 5 and atk.TRAIN_ATTACK.differentiable
    assert atk.TRAIN_ATTACK.clip is None
    assert atk.EVAL_ATTACK.max_iter == 500 and atk.EVAL_ATTACK.clip == 0.1
    assert not atk.EVAL_ATTACK.differentiable


# -- full attack ----------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), clip=st.sampled_from([None, 0.05, 0.1]))
def test_result_invariants(seed, clip):
    model, _ = random_mlp(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (5, 6))
    target = rng.integers(0, 3, 5)
    cfg = atk.AttackConfig(confidence=0.8, max_iter=40, clip=clip)
    try:
        res = atk.high_confidence_attack(x, target, cfg, model)
    except atk.DegenerateGradientError:
        return
    assert np.array_equal(res.x_adv, np.clip(x + res.r, 0.0, 1.0))
    assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0
    p = model.predict_probs(res.x_adv)[np.arange(5), target]
    np.testing.assert_array_equal(res.success, p >= 0.8)
    assert np.all(res.iterations <= 40)


def bim_max_deviation(n_instances=50, n_iter=8, eps=0.05):
    """Largest |ours - BIM| over every iterate of n non-degenerate random instances."""
    worst = 0.0
    checked = 0
    seed = 0
    while checked < n_instances:
        seed += 1
        model, weights = random_mlp(seed)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.2, 0.8, (4, 6))
        target = rng.integers(0, 3, 4)
        ref = bim_or_none(weights, x, target, eps, n_iter)
        if ref is None:
            continue  # a dead-ReLU row; the oracle itself has no direction
        checked += 1
        cfg = atk.AttackConfig(confidence=1 - 1e-12, max_iter=n_iter, step="fixed",
                               step_norm=eps, clip=None)
        res = atk.high_confidence_attack(x, target, cfg, model, record_trace=True)
        assert len(res.trace) == 4 * n_iter
        for row in res.trace:
            want = ref[row["iteration"]][row["index"]]
            worst = max(worst, float(np.max(np.abs(row["x"] - want))))
        worst = max(worst, float(np.max(np.abs(res.x_adv - ref[-1]))))
    return worst


def test_fixed_step_matches_bim_oracle():
    assert bim_max_deviation(50) <= 1e-10


def test_oracle_gradient_agrees_with_engine():
    model, weights = random_mlp(3)
    x = np.random.default_rng(0).uniform(0, 1, (5, 6))
    t = np.array([0, 1, 2, 0, 1])
    lp, g = atk.target_log_prob_and_grad(model, x, t)
    lp_ref, g_ref = mlp_target_logprob_grad(weights, x, t)
    np.testing.assert_allclose(lp, lp_ref, rtol=1e-13)
    np.testing.assert_allclose(g, g_ref, rtol=1e-11, atol=1e-14)


def bim_or_none(weights, x, target, eps, n_iter):
    with np.errstate(all="raise"):
        try:
            return bim(weights, x, target, eps, n_iter)
        except FloatingPointError:
            return None


def _masks_from(iterations, max_iter):
    return (np.arange(max_iter)[:, None] < iterations[None, :]).astype(float)


def test_differentiable_attack_parameter_gradient():
    model, _ = random_mlp(7, n_in=4, hidden=(5,), k=3, scale=2.0)
    rng = np.random.default_rng(1)
    x = rng.uniform(0.3, 0.7, (3, 4))
    target = np.array([1, 2, 0])
    probe = rng.normal(size=x.shape)
    base = replace(atk.TRAIN_ATTACK, confidence=0.9, bounds=None, surrogate=False)
    first = atk.high_confidence_attack(x, target, base, model)
    masks = _masks_from(first.iterations, base.max_iter)
    assert masks.sum() > 0

    def contracted():
        res = atk.high_confidence_attack(x, target, base, model, masks=masks)
        return ad.sum(res.node * probe)

    nodes = model.params.nodes()
    grads = ad.gradient(contracted(), nodes, create_graph=False)
    for name, node in list(model.params.items()):
        analytic = grads[node].value
        original = node.value.copy()

        def f(v, name=name):
            model.params.assign(name, v)
            return contracted().value

        numeric = central_diff(f, original)
        model.params.assign(name, original)
        assert rel_error(analytic, numeric) <= 1e-3, name


def test_straight_through_surrogate_changes_only_gradients():
    model, _ = random_mlp(2, n_in=4, hidden=(6,), k=3)
    x = np.random.default_rng(2).uniform(0.3, 0.7, (4, 4))
    target = np.array([0, 1, 2, 1])
    hard = atk.high_confidence_attack(
        x, target, replace(atk.TRAIN_ATTACK, confidence=0.7, surrogate=False), model)
    soft = atk.high_confidence_attack(
        x, target, replace(atk.TRAIN_ATTACK, confidence=0.7), model)
    np.testing.assert_array_equal(hard.x_adv, soft.x_adv)
    plain = atk.high_confidence_attack(
        x, target, replace(atk.TRAIN_ATTACK, confidence=0.7, differentiable=False), model)
    np.testing.assert_allclose(plain.x_adv, soft.x_adv, rtol=0, atol=1e-12)


# -- projection -----------------------------------------------------------------


def test_projection_examples():
    x = np.full((1, 4), 0.5)
    r = np.array([[0.05, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(atk.project_and_clip(r, x, 0.1, None), r)
    np.testing.assert_allclose(atk.project_and_clip(r, x, 0.1), r, rtol=0, atol=1e-16)
    r = np.array([[0.24, 0.32, 0.0, 0.0]])  # norm 0.4
    out = atk.project_and_clip(r, x, 0.1, None)
    assert np.linalg.norm(out) == pytest.approx(0.1, rel=1e-15)
    np.testing.assert_allclose(out / np.linalg.norm(out), r / 0.4, rtol=1e-15)
    x = np.array([[1.0, 0.5]])
    out = atk.project_and_clip(np.array([[0.05, 0.05]]), x, None)
    assert out[0, 0] == 0.0
    assert out[0, 1] == pytest.approx(0.05, abs=1e-16)
    with pytest.raises(ValueError):
        atk.project_and_clip(np.zeros((1, 3)), x)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), clip=st.floats(0.01, 2.0))
def test_projection_properties(seed, clip):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (3, 5))
    r = rng.normal(0, 1, (3, 5))
    out = atk.project_and_clip(r, x, clip)
    assert np.all(np.linalg.norm(out, axis=1) <= clip * (1 + 1e-12))
    assert np.all(x + out >= -1e-15) and np.all(x + out <= 1 + 1e-15)


# -- deepfool / fgsm / targets --------------------------------------------------


def test_deepfool_affine_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    b = 0.7
    model = LinearModel(np.stack([np.zeros(5), w], axis=1), np.array([0.0, b]))
    x = rng.normal(size=(1, 5))
    if x[0] @ w + b > 0:
        x = -x - 2 * b * w / (w @ w)  # put x on the class-0 side
    f = x[0] @ w + b
    assert f < 0
    res = atk.deepfool(x, model, max_iter=10, overshoot=0.02, bounds=None)
    expected = -f * w / (w @ w) * 1.02
    np.testing.assert_allclose(res.r[0], expected, rtol=0, atol=1e-10)
    assert res.iterations[0] == 1 and res.success[0]
    assert res.x_adv[0] @ w + b > 0


def test_deepfool_on_boundary_gives_zero_step():
    w = np.array([1.0, -1.0])
    model = LinearModel(np.stack([np.zeros(2), w], axis=1), np.zeros(2))
    x = np.array([[0.4, 0.4]])  # f(x) = 0 exactly
    res = atk.deepfool(x, model, max_iter=5, bounds=None)
    assert np.linalg.norm(res.r) <= 1e-12


def test_deepfool_success_changes_label():
    model, _ = random_mlp(4)
    x = np.random.default_rng(4).uniform(0, 1, (8, 6))
    res = atk.deepfool(x, model, max_iter=100, clip=0.1)
    before = model.predict(x)
    after = model.predict(res.x_adv)
    np.testing.assert_array_equal(res.success, after != before)
    assert res.success.mean() >= 0.75
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1


def test_closest_boundary_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(50):
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        model = LinearModel(w, b)
        x = rng.normal(size=(6, 4))
        y = model.predict(x)
        got = atk.closest_boundary_targets(model, x, y)
        z = x @ w + b
        for i in range(6):
            best, best_d = None, np.inf
            for k in range(3):
                if k == y[i]:
                    continue
                d = abs(z[i, k] - z[i, y[i]]) / np.linalg.norm(w[:, k] - w[:, y[i]])
                if d < best_d:
                    best, best_d = k, d
            assert got[i] == best
        res = atk.deepfool(x, model, max_iter=1, overshoot=0.0, bounds=None)
        np.testing.assert_array_equal(res.target[~res.success], got[~res.success])


def test_fgsm():
    model, _ = random_mlp(6)
    x = np.random.default_rng(6).uniform(0, 1, (5, 6))
    y = np.array([0, 1, 2, 0, 1])
    np.testing.assert_array_equal(atk.fgsm(x, y, 0.0, model), x)
    adv = atk.fgsm(x, y, 0.1, model)
    assert np.max(np.abs(adv - x)) <= 0.1 + 1e-15
    assert adv.min() >= 0 and adv.max() <= 1
    _, g = mlp_target_logprob_grad(random_mlp(6)[1], x, y)
    np.testing.assert_array_equal(adv, np.clip(x - 0.1 * np.sign(g), 0, 1))
    with pytest.raises(ValueError):
        atk.fgsm(x, y, -0.1, model)


def test_trace_csv(tmp_path):
    model = logistic()
    cfg = atk.AttackConfig(confidence=0.99, max_iter=20, clip=0.1, bounds=None)
    res = atk.high_confidence_attack(np.zeros((2, 1)), 1, cfg, model, record_trace=True)
    path = tmp_path / "trace.csv"
    atk.write_trace_csv(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,index,confidence,step_norm,cumulative_norm"
    assert len(lines) == 1 + len(res.trace)
    steps = [float(line.split(",")[3]) for line in lines[1:]]
    assert max(steps) <= 0.1 + 1e-15
