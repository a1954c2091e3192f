import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avground.grpo import (
    DEMO_ANSWERS,
    BanditEnv,
    GroupSample,
    GroupTooSmall,
    GrpoConfig,
    ToyPolicy,
    clipped_term,
    demo_env,
    finite_diff_check,
    group_advantages,
    grpo_objective,
    kl_penalty,
    objective_grad_logp,
    policy_gradient,
    random_instance,
    train_toy,
)


def test_advantage_examples():
    assert group_advantages([1, 1, 1]).tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(group_advantages([0, 2]), [-1, 1], atol=1e-6)
    sigma = math.sqrt(2 / 3)
    np.testing.assert_allclose(group_advantages([0, 1, 2]), [-1 / sigma, 0, 1 / sigma], atol=1e-6)
    assert np.round(group_advantages([0, 1, 2]), 4).tolist() == [-1.2247, 0.0, 1.2247]
    with pytest.raises(GroupTooSmall):
        group_advantages([3.0])


rewards = st.lists(st.floats(-100, 100), min_size=2, max_size=12)


@given(rewards)
def test_advantages_centered(r):
    assert abs(group_advantages(r).sum()) <= 1e-7 * max(1, len(r))


@given(rewards, st.floats(-50, 50))
def test_advantages_shift_invariant(r, c):
    r = np.round(r, 3)  # keep the shift exactly representable enough
    np.testing.assert_allclose(group_advantages(r + c), group_advantages(r), atol=1e-6)


quarter_rewards = st.lists(st.integers(-400, 400).map(lambda k: k / 4), min_size=2, max_size=12)


@given(quarter_rewards, st.sampled_from([0.25, 0.5, 2.0, 4.0]))
def test_advantages_scale_invariant_without_guard(r, s):
    a = group_advantages(r, 0.0) if np.ptp(r) > 0 else group_advantages(r)
    b = group_advantages(np.asarray(r) * s, 0.0) if np.ptp(r) > 0 else group_advantages(np.asarray(r) * s)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_clipped_term_examples():
    assert clipped_term(1.0, 0.7, 0.2) == 0.7
    assert clipped_term(2.0, 1.0, 0.2) == 1.2
    # min(0.5 * -1, 0.8 * -1): the clipped branch is the smaller one
    assert clipped_term(0.5, -1.0, 0.2) == pytest.approx(-0.8, abs=1e-15)


@given(st.floats(0.8, 1.2), st.floats(-10, 10))
def test_clipped_term_identity_inside_range(ratio, a):
    assert clipped_term(ratio, a, 0.2) == ratio * a


@given(st.floats(1e-3, 10), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_clipped_term_matches_piecewise(ratio, a, eps):
    if a >= 0:
        want = min(ratio, 1 + eps) * a
    else:
        want = max(ratio, 1 - eps) * a
    assert clipped_term(ratio, a, eps) == pytest.approx(want, abs=1e-12)


def test_kl_examples():
    assert kl_penalty(-1.3, -1.3) == 0.0
    assert kl_penalty(0.0, math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert round(kl_penalty(0.0, math.log(2)), 6) == 0.306853


def test_objective_examples():
    cfg = GrpoConfig(beta=0.04)
    same = GroupSample([1, 1, 1], [-1, -2, -3], [-1, -2, -3], [-1, -2, -3])
    assert grpo_objective(same, cfg) == 0.0
    on_policy = GroupSample([0, 1, 5], [-1, -2, -3], [-1, -2, -3], [-0.5, -2, -3])
    assert grpo_objective(on_policy, GrpoConfig(beta=0.0)) == pytest.approx(0.0, abs=1e-12)
    hand = GroupSample([0, 2], [0.0, 0.0], [math.log(1.5), math.log(0.8)], [0.0, 0.0])
    assert grpo_objective(hand, GrpoConfig(beta=0.0)) == pytest.approx(-0.35, abs=1e-6)


def test_objective_is_ppo_surrogate_with_external_advantages():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = int(rng.integers(2, 8))
        old, new = rng.normal(size=(2, g))
        adv = rng.normal(size=g)
        group = GroupSample(rng.normal(size=g), old, new, rng.normal(size=g))
        eps = 0.2
        want = 0.0
        for r, a in zip(np.exp(new - old), adv):
            want += min(r * a, min(max(r, 1 - eps), 1 + eps) * a)
        assert grpo_objective(group, GrpoConfig(beta=0.0), advantages=adv) == pytest.approx(want / g, abs=1e-12)


def test_group_validation():
    with pytest.raises(GroupTooSmall):
        GroupSample([1], [0], [0], [0])
    with pytest.raises(ValueError):
        GroupSample([1, 2], [0, np.inf], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        GroupSample([1, 2], [0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        GrpoConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        GrpoConfig(group_size=1)


def test_logp_gradient_against_central_differences():
    rng = np.random.default_rng(1)
    cfg = GrpoConfig(beta=0.3)
    for _ in range(20):
        old = rng.normal(size=6)
        group = GroupSample(rng.uniform(0, 4, 6), old, old + rng.normal(scale=0.05, size=6), rng.normal(size=6))
        grad = objective_grad_logp(group, cfg)
        h = 1e-6
        for i in range(6):
            up, down = group.logp_new.copy(), group.logp_new.copy()
            up[i] += h
            down[i] -= h
            num = (grpo_objective(GroupSample(group.rewards, old, up, group.logp_ref), cfg)
                   - grpo_objective(GroupSample(group.rewards, old, down, group.logp_ref), cfg)) / (2 * h)
            assert grad[i] == pytest.approx(num, abs=1e-6)


def test_finite_diff_on_random_instances():
    errors = [finite_diff_check(*random_instance(seed)) for seed in range(20)]
    assert max(errors) < 1e-4


def test_finite_diff_on_demo_policy():
    env = demo_env()
    policy = ToyPolicy(np.array([0.3, -0.2, 0.1, 0.0]))
    rng = np.random.default_rng(7)
    actions = policy.sample(rng, 6)
    logp = policy.log_probs()[actions]
    ref = ToyPolicy(np.zeros(4)).log_probs()[actions]
    group = GroupSample(env.rewards[actions], logp, logp, ref, actions)
    assert finite_diff_check(policy, group, GrpoConfig()) < 1e-4


def test_zero_advantage_zero_beta_gives_zero_gradient():
    policy = ToyPolicy(np.array([0.5, -1.0, 2.0]))
    actions = np.array([0, 1, 2, 2])
    logp = policy.log_probs()[actions]
    group = GroupSample([2.0, 2.0, 2.0, 2.0], logp - 0.1, logp, logp + 0.3, actions)
    assert group_advantages(group.rewards).tolist() == [0.0] * 4
    grad = policy_gradient(policy, group, GrpoConfig(beta=0.0))
    assert np.all(grad == 0.0)


def test_policy_probabilities_normalized():
    for seed in range(5):
        policy, _, _ = random_instance(seed)
        assert abs(policy.probs().sum() - 1.0) <= 1e-12


def test_demo_env_rewards():
    env = demo_env()
    assert len(DEMO_ANSWERS) == 4
    assert env.rewards[0] == 4.0
    assert np.all(env.rewards[1:] <= 1.0)


def test_training_converges_on_demo():
    env = demo_env()
    for seed in range(10):
        trace = train_toy(env, ToyPolicy(np.zeros(4)), GrpoConfig(), steps=500, seed=seed)
        assert int(np.argmax(trace.logits)) == 0
        assert trace.expected_rewards[-1] >= trace.expected_rewards[0]


def test_training_is_deterministic():
    env = demo_env()
    a = train_toy(env, ToyPolicy(np.zeros(4)), GrpoConfig(), steps=50, seed=3)
    b = train_toy(env, ToyPolicy(np.zeros(4)), GrpoConfig(), steps=50, seed=3)
    assert a.records == b.records
    np.testing.assert_array_equal(a.logits, b.logits)


def test_zero_learning_rate_keeps_logits():
    start = np.array([0.1, 0.2, -0.3, 0.0])
    trace = train_toy(demo_env(), ToyPolicy(start), GrpoConfig(lr=0.0), steps=30, seed=0)
    np.testing.assert_array_equal(trace.logits, start)


def test_huge_beta_stays_near_reference():
    env = demo_env()
    policy = ToyPolicy(np.zeros(4))
    trace = train_toy(env, policy, GrpoConfig(beta=1e3), steps=500, seed=0)
    tv = 0.5 * np.abs(policy.probs(trace.logits) - policy.probs()).sum()
    assert tv < 0.05


def test_trace_records():
    trace = train_toy(demo_env(), ToyPolicy(np.zeros(4)), GrpoConfig(), steps=5, seed=1)
    assert [r["step"] for r in trace.records] == list(range(5))
    assert set(trace.records[0]) == {"step", "mean_reward", "objective", "kl"}
    # first step is on-policy at the reference, so the KL term is zero
    assert trace.records[0]["kl"] == 0.0


def test_bandit_size_mismatch():
    with pytest.raises(ValueError):
        train_toy(BanditEnv(np.array([1.0, 0.0])), ToyPolicy(np.zeros(3)), GrpoConfig(), steps=1, seed=0)


@settings(max_examples=300)
@given(st.floats(-30, 30), st.floats(-30, 30))
def test_kl_nonnegative_and_closed_form(new, ref):
    v = kl_penalty(new, ref)
    d = ref - new
    assert v >= 0.0
    assert v == pytest.approx(math.exp(d) - d - 1, abs=1e-12, rel=1e-12)
    assert (v == 0.0) == (abs(d) < 1e-7) or v < 1e-14
