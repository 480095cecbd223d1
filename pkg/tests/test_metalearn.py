import dataclasses
import math

import numpy as np
import pytest

from metamix import autodiff as ad
from metamix import rng as rngs
from metamix.autodiff import Node, grad
from metamix.episodes import TaskDistribution, generate_synthetic, sample_episode
from metamix.metalearn import (
    RATE_PREFIX,
    Adam,
    Algorithm,
    EvalReport,
    MetaConfig,
    MetaState,
    NumericalError,
    ci95_halfwidth,
    evaluate,
    inner_adapt,
    meta_gradient,
    meta_step,
    mtl_pretrain,
    outer_loss,
    pretrain_classifier,
    support_loss,
    train,
)
from metamix.mixup import MixConfig, mix_for_episode
from metamix.models import MlpArchitecture, cross_entropy, forward, init_params

ARCH = MlpArchitecture(8, (16,), 5)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(25, 24, 8, 0.7, seed=5)


@pytest.fixture(scope="module")
def episodes(data):
    rng = np.random.default_rng(0)
    dist = TaskDistribution(data, "train", 5, 1, 4)
    return [sample_episode(dist, rng) for _ in range(3)]


@pytest.fixture(scope="module")
def theta():
    return init_params(ARCH, 1)


def quad(target):
    return lambda p: (p["w"] - Node(target)) * (p["w"] - Node(target))


def hand_recurrence(w, lr, steps, target=3.0):
    for _ in range(steps):
        w = w - lr * 2 * (w - target)
    return w


# -- inner loop ------------------------------------------------------------------


def test_zero_rate_is_identity(theta, episodes):
    ep = episodes[0]
    out = inner_adapt(theta, support_loss(ARCH, ep.support_x, ep.support_y), 0.0, 3, differentiable=True)
    for k in theta:
        assert out[k].value.tobytes() == theta[k].tobytes()


@pytest.mark.parametrize("steps,expected", [(1, 0.6), (2, 1.08)])
@pytest.mark.parametrize("differentiable", [True, False])
def test_scalar_recurrence(steps, expected, differentiable):
    out = inner_adapt({"w": np.array(0.0)}, quad(3.0), 0.1, steps, differentiable)
    assert float(out["w"].value) == pytest.approx(expected, abs=1e-12)
    assert float(out["w"].value) == pytest.approx(hand_recurrence(0.0, 0.1, steps), abs=1e-12)


def test_differentiable_adaptation_carries_jacobian():
    # w' = w - 0.1 * 2 (w - 3) = 0.8 w + 0.6, so dw'/dw = 0.8 and d(w'^2)/dw = 2 w' 0.8
    w = Node(0.0)
    adapted = inner_adapt({"w": w}, quad(3.0), 0.1, 1, differentiable=True)["w"]
    assert float(grad(adapted * adapted, w).value) == pytest.approx(2 * 0.6 * 0.8, abs=1e-12)
    detached = inner_adapt({"w": w}, quad(3.0), 0.1, 1, differentiable=False)["w"]
    assert float(grad(detached * detached, w).value) == 0.0


def test_elementwise_rates():
    out = inner_adapt({"w": np.array([0.0, 0.0])}, lambda p: ad.sum((p["w"] - 3.0) * (p["w"] - 3.0)), {"w": np.array([0.1, 0.2])}, 1, True)
    np.testing.assert_allclose(out["w"].value, [0.6, 1.2], atol=1e-15)


def test_inner_adapt_works_under_no_grad(theta, episodes):
    ep = episodes[0]
    loss = support_loss(ARCH, ep.support_x, ep.support_y)
    ref = inner_adapt(theta, loss, 0.5, 1, differentiable=False)
    with ad.no_grad():
        out = inner_adapt(theta, loss, 0.5, 1, differentiable=False)
    for k in theta:
        assert out[k].value.tobytes() == ref[k].value.tobytes()
        assert not np.array_equal(out[k].value, theta[k]) or k.endswith("bias")


# -- outer loss ----------------------------------------------------------------------


def test_outer_loss_lambda_one_is_vanilla(theta, episodes):
    ep = episodes[0]
    mixed = mix_for_episode(ep, MixConfig(fixed_lambda=1.0), np.random.default_rng(0))
    adapted = inner_adapt(theta, support_loss(ARCH, ep.support_x, ep.support_y), 0.1, 1, True)
    a = outer_loss(ARCH, adapted, ep.query_x, ep.query_y).value
    b = outer_loss(ARCH, adapted, mixed.query_x, mixed.query_y).value
    assert a.tobytes() == b.tobytes()


def test_outer_loss_uniform_backbone_is_log_n(episodes):
    zero = {k: np.zeros(s) for k, s in ARCH.param_shapes().items()}
    ep = mix_for_episode(episodes[1], MixConfig(), np.random.default_rng(3))
    assert float(outer_loss(ARCH, zero, ep.query_x, ep.query_y).value) == pytest.approx(math.log(5), abs=1e-12)


# -- meta-gradients ------------------------------------------------------------------


def state_for(theta, cfg):
    return MetaState.initial(theta, cfg)


def test_alpha_zero_maml_equals_fomaml(theta, episodes):
    maml = MetaConfig(Algorithm.MAML, inner_lr=0.0)
    fo = MetaConfig(Algorithm.FOMAML, inner_lr=0.0)
    s1, _ = meta_step(state_for(theta, maml), ARCH, episodes, maml)
    s2, _ = meta_step(state_for(theta, fo), ARCH, episodes, fo)
    assert max(np.abs(s1.params[k] - s2.params[k]).max() for k in theta) <= 1e-12


def test_generic_alpha_maml_differs_from_fomaml(theta, episodes):
    maml = MetaConfig(Algorithm.MAML, inner_lr=0.01)
    fo = MetaConfig(Algorithm.FOMAML, inner_lr=0.01)
    _, g1 = meta_gradient(state_for(theta, maml), ARCH, episodes, maml)
    _, g2 = meta_gradient(state_for(theta, fo), ARCH, episodes, fo)
    assert max(np.abs(g1[k] - g2[k]).max() for k in theta) > 1e-8


def test_fomaml_gradient_is_outer_gradient_at_adapted_point(theta, episodes):
    cfg = MetaConfig(Algorithm.FOMAML, inner_lr=0.3)
    ep = episodes[0]
    _, g = meta_gradient(state_for(theta, cfg), ARCH, [ep], cfg)
    # adapted point by plain numpy gradient descent, then the query gradient there
    leaves = {k: Node(v) for k, v in theta.items()}
    sg = grad(cross_entropy(forward(ARCH, leaves, ep.support_x), ep.support_y), leaves)
    adapted = {k: Node(theta[k] - 0.3 * sg[k].value) for k in theta}
    qg = grad(cross_entropy(forward(ARCH, adapted, ep.query_x), ep.query_y), adapted)
    for k in theta:
        np.testing.assert_array_equal(g[k], qg[k].value)


def test_fomaml_two_parameter_hand_derivation():
    # support L_s = (w-3)^2 + (b+1)^2, query L_q = (w*b - 2)^2, alpha = 0.1, from w=1, b=1
    # w' = 1 - 0.2*(1-3) = 1.4, b' = 1 - 0.2*(1+1) = 0.6, r = w'b' - 2 = -1.16
    # first order: (2 r b', 2 r w');  second order multiplies by dw'/dw = db'/db = 0.8
    def support(p):
        return (p["w"] - 3.0) * (p["w"] - 3.0) + (p["b"] + 1.0) * (p["b"] + 1.0)

    def query(p):
        r = p["w"] * p["b"] - 2.0
        return r * r

    r = 1.4 * 0.6 - 2
    for differentiable, factor in ((False, 1.0), (True, 0.8)):
        theta = {"w": Node(1.0), "b": Node(1.0)}
        adapted = inner_adapt(theta, support, 0.1, 1, differentiable)
        wrt = theta if differentiable else adapted
        g = grad(query(adapted), wrt)
        assert float(g["w"].value) == pytest.approx(factor * 2 * r * 0.6, abs=1e-12)
        assert float(g["b"].value) == pytest.approx(factor * 2 * r * 1.4, abs=1e-12)


def test_batch_gradient_is_sum_not_mean(theta, episodes):
    cfg = MetaConfig(inner_lr=0.2)
    st = state_for(theta, cfg)
    l2, g2 = meta_gradient(st, ARCH, episodes[:2], cfg)
    la, ga = meta_gradient(st, ARCH, episodes[:1], cfg)
    lb, gb = meta_gradient(st, ARCH, episodes[1:2], cfg)
    assert l2 == la + lb
    for k in theta:
        np.testing.assert_array_equal(g2[k], ga[k] + gb[k])


def test_maml_meta_gradient_matches_finite_differences(theta, episodes):
    cfg = MetaConfig(inner_lr=0.4, inner_steps_train=2)
    ep = mix_for_episode(episodes[2], MixConfig(), np.random.default_rng(7))
    _, g = meta_gradient(state_for(theta, cfg), ARCH, [ep], cfg)

    def loss(p):
        adapted = inner_adapt(p, support_loss(ARCH, ep.support_x, ep.support_y), 0.4, 2, True)
        return outer_loss(ARCH, adapted, ep.query_x, ep.query_y)

    assert max(ad.finite_diff_check(loss, theta).values()) <= 1e-4
    leaves = {k: Node(v) for k, v in theta.items()}
    direct = grad(loss(leaves), leaves)
    for k in theta:
        np.testing.assert_array_equal(g[k], direct[k].value)


def test_nonfinite_loss_reports_episode(theta, episodes):
    bad = dataclasses.replace(episodes[1], query_x=np.full_like(episodes[1].query_x, np.nan))
    with pytest.raises(NumericalError) as info:
        meta_gradient(state_for(theta, MetaConfig()), ARCH, [episodes[0], bad], MetaConfig())
    assert info.value.episode_index == 1 and math.isnan(info.value.value)


def test_mixing_requires_stream(theta, episodes):
    cfg = MetaConfig(metamix=MixConfig())
    with pytest.raises(ValueError):
        meta_gradient(state_for(theta, cfg), ARCH, episodes, cfg)


# -- optimizer ---------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    opt = Adam(0.01)
    p = {"w": np.array([1.0, -2.0])}
    new, st = opt.update(p, {"w": np.array([0.5, -3.0])}, opt.init(p))
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(new["w"], [0.99, -1.99], atol=1e-9)
    assert st.t == 1


# -- Meta-SGD --------------------------------------------------------------------------


def test_meta_sgd_first_step_equals_maml(theta, episodes):
    maml = MetaConfig(Algorithm.MAML, inner_lr=0.01)
    msgd = MetaConfig(Algorithm.META_SGD, inner_lr=0.01)
    s_m, loss_m = meta_step(state_for(theta, maml), ARCH, episodes, maml)
    s_s, loss_s = meta_step(state_for(theta, msgd), ARCH, episodes, msgd)
    assert abs(loss_m - loss_s) <= 1e-10
    assert max(np.abs(s_m.params[k] - s_s.params[k]).max() for k in theta) <= 1e-10
    assert set(s_s.rates) == set(theta)
    assert s_m.rates is None


def test_meta_sgd_gradient_includes_rates(theta, episodes):
    cfg = MetaConfig(Algorithm.META_SGD, inner_lr=0.05)
    _, g = meta_gradient(state_for(theta, cfg), ARCH, episodes, cfg)
    assert {RATE_PREFIX + k for k in theta} <= set(g)
    assert any(np.abs(g[RATE_PREFIX + k]).max() > 0 for k in theta)


# -- MTL-lite -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mtl_cfg():
    return MetaConfig(Algorithm.MTL_LITE, inner_lr=0.3, pretrain_steps=150, pretrain_batch=32, pretrain_lr=3e-3)


def test_pretrain_beats_chance(data, mtl_cfg):
    _, acc = pretrain_classifier(data, ARCH, mtl_cfg, use_mixup=False, seed=0)
    assert acc > 1 / 16 + 0.2


def test_mtl_freezes_features(data, episodes, mtl_cfg):
    params, frozen = mtl_pretrain(data, ARCH, mtl_cfg, use_mixup=True, seed=3)
    assert frozen.trainable == ("layer1.weight", "layer1.bias")
    assert params["layer1.weight"].shape == (16, 5)
    st = MetaState.initial(params, mtl_cfg, frozen)
    assert set(st.meta_parameters()) == set(frozen.trainable)
    before = {k: params[k].tobytes() for k in frozen.frozen}
    for _ in range(5):
        st, _ = meta_step(st, ARCH, episodes, mtl_cfg)
    for k in frozen.frozen:
        assert st.params[k].tobytes() == before[k]
    assert st.params["layer1.weight"].tobytes() != params["layer1.weight"].tobytes()


def test_pretrain_without_mixup_ignores_mix_config(data, mtl_cfg):
    a, _ = pretrain_classifier(data, ARCH, mtl_cfg, use_mixup=False, seed=4)
    b, _ = pretrain_classifier(data, ARCH, dataclasses.replace(mtl_cfg, metamix=MixConfig(alpha_check=0.3)), use_mixup=False, seed=4)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


# -- evaluation -------------------------------------------------------------------------------


def test_ci_balanced_binary_vector():
    acc = np.array([0.0, 1.0] * 300)
    s = math.sqrt(300 * 0.25 * 2 / 599)  # n-1 sample stddev of a balanced 0/1 vector
    assert ci95_halfwidth(acc) == pytest.approx(1.96 * s / math.sqrt(600), abs=1e-12)
    assert ci95_halfwidth(acc) == pytest.approx(0.0400, abs=1e-4)


def test_ci_degenerate_cases():
    assert ci95_halfwidth([0.4] * 50) == 0.0
    assert ci95_halfwidth([0.7]) == 0.0


def test_report_mean_matches_list():
    r = EvalReport.from_accuracies([0.1, 0.2, 0.6])
    assert r.mean_accuracy == pytest.approx(sum(r.per_episode_accuracy) / 3, abs=1e-12)
    assert r.num_episodes == 3


def test_untrained_accuracy_is_chance(data, theta):
    cfg = MetaConfig(inner_lr=0.01)
    rep = evaluate(state_for(theta, cfg), ARCH, TaskDistribution(data, "test", 5, 1, 16), 600, cfg, seed=0)
    assert 0.14 <= rep.mean_accuracy <= 0.26
    assert rep.num_episodes == 600


def test_evaluation_does_not_touch_state(data, theta):
    cfg = MetaConfig(inner_lr=0.5, metamix=MixConfig())
    st = state_for(theta, cfg)
    dist = TaskDistribution(data, "test", 5, 1, 16)
    a = evaluate(st, ARCH, dist, 20, cfg, seed=1)
    b = evaluate(st, ARCH, dist, 20, dataclasses.replace(cfg, metamix=None), seed=1)
    assert a.per_episode_accuracy == b.per_episode_accuracy  # never mixes


# -- training loop ---------------------------------------------------------------------------


def test_zero_iterations_returns_initial_state(data):
    cfg = MetaConfig(inner_lr=0.3)
    dist = TaskDistribution(data, "train", 5, 1, 4)
    val = TaskDistribution(data, "val", 4, 1, 4, label_dim=5)
    res = train(ARCH, cfg, dist, val, 0, 10, 10, seed=2)
    ref = init_params(ARCH, rngs.derived_seed(2, "init"))
    assert res.best_iteration == 0 and len(res.curve) == 1
    for k in ref:
        assert res.state.params[k].tobytes() == ref[k].tobytes()


def test_training_is_deterministic_and_selects_best(data):
    cfg = MetaConfig(inner_lr=0.3, metamix=MixConfig())
    dist = TaskDistribution(data, "train", 5, 1, 4)
    val = TaskDistribution(data, "val", 4, 1, 4, label_dim=5)
    a = train(ARCH, cfg, dist, val, 12, 5, 10, seed=4)
    b = train(ARCH, cfg, dist, val, 12, 5, 10, seed=4)
    assert a.curve == b.curve
    assert [p.iteration for p in a.curve] == [0, 5, 10, 12]
    accs = [p.val_accuracy for p in a.curve]
    assert a.best_iteration == a.curve[accs.index(max(accs))].iteration


def test_training_beats_chance(data):
    cfg = MetaConfig(inner_lr=0.5, meta_batch=4)
    dist = TaskDistribution(data, "train", 5, 1, 8)
    res = train(ARCH, cfg, dist, None, 150, 50, 0, seed=0)
    rep = evaluate(res.state, ARCH, TaskDistribution(data, "test", 5, 1, 8), 200, cfg, seed=9)
    assert rep.mean_accuracy >= 0.30


def test_nonfinite_training_keeps_partial_curve(data):
    cfg = MetaConfig(inner_lr=1e200, outer_lr=1.0)
    dist = TaskDistribution(data, "train", 5, 1, 4)
    val = TaskDistribution(data, "val", 4, 1, 4, label_dim=5)
    with np.errstate(all="ignore"), pytest.raises(NumericalError) as info:
        train(ARCH, cfg, dist, val, 5, 1, 4, seed=0)
    assert info.value.curve and info.value.curve[0].iteration == 0
