import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abrkit import policy, tinynet
from abrkit.errors import EmptyTrajectory, InvalidClipConfig
from abrkit.policy import Batch, ObsConfig, PpoConfig, RunningNorm
from abrkit.sim import PlayerView, SimConfig, rollout

from conftest import constant_trace, flat_manifest
from oracles import numeric_grad

UNIFORM6 = np.full(6, 1 / 6)
HALF = np.array([0.5, 0.5, 0, 0, 0, 0])


def test_entropy_endpoints():
    assert policy.policy_entropy(UNIFORM6) == pytest.approx(math.log(6), abs=1e-12)
    assert policy.policy_entropy(np.eye(6)[2]) == 0.0
    assert policy.policy_entropy(HALF) == pytest.approx(math.log(2), abs=1e-12)


def test_omega_examples():
    assert policy.omega([UNIFORM6] * 4) == pytest.approx(1.0)
    assert policy.omega([np.eye(6)[0]] * 4) == 0.0
    assert policy.omega([UNIFORM6, HALF]) == pytest.approx((1 + math.log(2) / math.log(6)) / 2, abs=1e-12)
    assert policy.omega([UNIFORM6, HALF]) == pytest.approx(0.6934, abs=1e-4)


def test_omega_empty():
    with pytest.raises(EmptyTrajectory):
        policy.omega([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6), min_size=1, max_size=20))
def test_omega_in_unit_interval(rows):
    p = np.array(rows) + 1e-9
    p /= p.sum(axis=1, keepdims=True)
    assert 0.0 <= policy.omega(p) <= 1.0


def test_lambda_update():
    assert policy.update_lambda(0.1, 0.1, 0.1, 1e-4) == 0.1
    assert policy.update_lambda(0.1, 1.7918, 0.1, 1e-4) == pytest.approx(0.1 + 1e-4 * (0.1 - 1.7918))
    assert policy.update_lambda(0.1, 1.7918, 0.1, 1e-4) == pytest.approx(0.09983, abs=1e-5)
    assert policy.update_lambda(0.1, 0.5, 0.1, 1e-4) < 0.1
    assert policy.update_lambda(0.1, 0.0, 0.1, 1e-4) > 0.1


def test_lambda_never_negative():
    assert policy.update_lambda(1e-6, 1.79, 0.1, 1.0) == 0.0


def test_blend_endpoints_and_midpoint():
    lin, dnn = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    assert np.array_equal(policy.blended_reward(lin, dnn, 1.0), lin)
    assert np.array_equal(policy.blended_reward(lin, dnn, 0.0), dnn)
    assert policy.blended_reward(1.0, -1.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        policy.blended_reward(lin, dnn, 1.5)


def test_running_norm_matches_direct_ema():
    x = np.random.default_rng(0).normal(3, 2, 500)
    norm = RunningNorm(momentum=0.99)
    norm.update(x[:200])
    norm.update(x[200:])
    m1 = m2 = 0.0
    for v in x:
        m1 = 0.99 * m1 + 0.01 * v
        m2 = 0.99 * m2 + 0.01 * v * v
    corr = 1 - 0.99 ** 500
    assert norm.mean == pytest.approx(m1 / corr, rel=1e-10)
    assert norm.std == pytest.approx(math.sqrt(m2 / corr - (m1 / corr) ** 2), rel=1e-8)


def test_running_norm_floor_and_empty():
    norm = RunningNorm()
    assert norm(np.array([2.0]))[0] == 2.0
    norm.update(np.full(10, 5.0))
    assert norm.std == norm.std_floor


def test_advantage_examples():
    assert policy.advantage([1.0], [0.0], [0.0], [False], 0.99)[0] == 1.0
    assert policy.advantage([0.0], [3.0], [3.0], [False], 1.0)[0] == 0.0
    assert policy.advantage([1.0], [2.0], [1.0], [False], 0.99)[0] == pytest.approx(-0.01, abs=1e-12)
    assert policy.advantage([1.0], [2.0], [5.0], [True], 0.99)[0] == -1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-5, 5))
def test_advantages_telescope(rewards, v0):
    # with gamma' = 1 the summed TD errors equal the return minus the first value
    n = len(rewards)
    values = np.concatenate([[v0], np.random.default_rng(n).normal(size=n)])
    adv = policy.advantage(rewards, values[:-1], values[1:], [False] * (n - 1) + [True], 1.0)
    assert adv.sum() == pytest.approx(sum(rewards) - v0, abs=1e-9)


def test_dual_clip_examples():
    assert policy.dual_clip_loss(10.0, -1.0) == -3.0
    assert policy.dual_clip_loss(1.5, 1.0) == pytest.approx(1.2)
    assert policy.dual_clip_loss(0.5, -1.0) == pytest.approx(-0.8)


@pytest.mark.parametrize("eps,c", [(0.0, 3.0), (1.0, 3.0), (0.2, 1.1)])
def test_invalid_clip_config(eps, c):
    with pytest.raises(InvalidClipConfig):
        policy.dual_clip_loss(1.0, 1.0, eps, c)


def test_dual_clip_identities_random():
    rng = np.random.default_rng(0)
    r = np.exp(rng.normal(0, 1.5, 10_000))
    a = rng.normal(0, 2, 10_000)
    got = policy.dual_clip_loss(r, a)
    ppo = np.minimum(r * a, np.clip(r, 0.8, 1.2) * a)
    pos = a >= 0
    assert np.array_equal(got[pos], ppo[pos])
    assert np.all(got[~pos] >= 3 * a[~pos])
    assert np.array_equal(got[~pos], np.maximum(ppo[~pos], 3 * a[~pos]))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 8), st.floats(-5, 5))
def test_dual_clip_ratio_gradient(r, a):
    value, grad = policy.dual_clip_terms(r, a)
    h = 1e-7
    # skip the kinks of the piecewise-linear objective
    kinks = [0.8, 1.2, 3.0]
    if any(abs(r - k) < 1e-5 for k in kinks):
        return
    num = (policy.dual_clip_loss(r + h, a) - policy.dual_clip_loss(r - h, a)) / (2 * h)
    assert float(grad) == pytest.approx(num, abs=1e-5)


def test_observation_dimension_and_start():
    m = flat_manifest(n_chunks=5, ladder=(0.3, 0.75, 1.2, 1.85, 2.85, 4.3))
    seen = []

    def pick(view):
        seen.append(policy.observe(view))
        return 0

    rollout(pick, m, constant_trace(2.0), SimConfig(per_chunk_rtt=0.0))
    obs = ObsConfig()
    assert seen[0].shape == (obs.dim(6),) == (31,)
    assert not seen[0][2:2 + 2 * obs.history].any()
    assert seen[0][-1] == 1.0


def test_observation_buffer_at_cap_is_one():
    from abrkit.sim import SimState
    m = flat_manifest(n_chunks=5)
    cfg = SimConfig(buffer_cap=30.0)
    o = policy.build_observation(m, cfg, SimState(30.0, 2, (0, 0.0), 0.0, 1), [])
    assert o[0] == 1.0


def test_observation_throughput_on_constant_channel():
    m = flat_manifest(n_chunks=12)
    histories = []

    def pick(view):
        histories.append(policy.history_arrays(view.history, 8)[0])
        return 2

    rollout(pick, m, constant_trace(2.0), SimConfig(per_chunk_rtt=0.0))
    assert np.allclose(histories[-1], 2.0, rtol=1e-9)


def test_softmax_actor_shift_invariance():
    z = np.random.default_rng(1).normal(size=6)
    assert np.allclose(tinynet.softmax(z), tinynet.softmax(z - 50.0), atol=1e-14)


def random_batch(n=32, obs_dim=5, n_actions=4, seed=0, adv_zero=False):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), n)
    actions = np.array([rng.choice(n_actions, p=p) for p in probs])
    return Batch(rng.normal(size=(n, obs_dim)), actions, probs[np.arange(n), actions],
                 rng.normal(size=n), rng.normal(size=(n, obs_dim)), rng.random(n) < 0.1)


def test_actor_gradient_matches_finite_differences():
    cfg = PpoConfig(hidden=(6,))
    actor, _ = policy.make_networks(5, 4, cfg, 0)
    b = random_batch()
    adv = np.random.default_rng(9).normal(size=len(b))
    lam = 0.3

    def loss():
        p = actor(b.obs)
        ratio = p[np.arange(len(b)), b.actions] / b.probs
        return -(policy.dual_clip_loss(ratio, adv).mean() + lam * policy.entropies(p).mean())

    grads, _, _, _ = policy.actor_grads(actor, b.obs, b.actions, b.probs, adv, lam, 0.2, 3.0)
    for (dw, db), w, bias in zip(grads, actor.weights, actor.biases):
        assert np.allclose(dw, numeric_grad(loss, w, 1e-6), atol=1e-6)
        assert np.allclose(db, numeric_grad(loss, bias, 1e-6), atol=1e-6)


def test_zero_advantage_and_lambda_leave_actor_unchanged():
    cfg = PpoConfig(hidden=(8,))
    actor, critic = policy.make_networks(5, 4, cfg, 0)
    b = random_batch()
    # rewards equal to the TD residual of a frozen critic give zero advantage
    v = critic(b.obs)[:, 0]
    v_next = np.where(b.done, 0.0, critic(b.next_obs)[:, 0])
    b.rewards = v - cfg.gamma_prime * v_next
    before = [p.copy() for p in actor.parameters()]
    policy.ppo_update(b, actor, critic, cfg, 0.0)
    for a, c in zip(before, actor.parameters()):
        assert np.allclose(a, c, atol=1e-12)


def test_ppo_update_is_deterministic():
    cfg = PpoConfig(hidden=(8,))
    results = []
    for _ in range(2):
        actor, critic = policy.make_networks(5, 4, cfg, 3)
        policy.ppo_update(random_batch(seed=4), actor, critic, cfg, 0.5)
        results.append([p.copy() for p in actor.parameters() + critic.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*results))


def test_two_action_bandit_improves():
    """Action 1 always pays 1, action 0 pays 0; its probability should climb."""
    cfg = PpoConfig(hidden=(8,), learning_rate=1e-3, gamma_prime=0.5)
    actor, critic = policy.make_networks(1, 2, cfg, 0)
    rng = np.random.default_rng(0)
    obs = np.ones((64, 1))
    p_good = [float(actor(obs[:1])[0, 1])]
    for _ in range(100):
        probs = actor(obs)
        acts = (rng.random(64) < probs[:, 1]).astype(int)
        b = Batch(obs, acts, probs[np.arange(64), acts], acts.astype(float), obs, np.ones(64, bool))
        policy.ppo_update(b, actor, critic, cfg, 0.0)
        p_good.append(float(actor(obs[:1])[0, 1]))
    assert p_good[-1] > 0.95
    assert p_good[-1] > p_good[50] > p_good[0]


def test_entropy_bonus_raises_entropy():
    cfg = PpoConfig(hidden=(8,), learning_rate=1e-2)
    actor, critic = policy.make_networks(3, 4, cfg, 0)
    for w in actor.weights:
        w *= 8
    b = random_batch(obs_dim=3)
    b.rewards = np.zeros(len(b))
    h0 = policy.entropies(actor(b.obs)).mean()
    for _ in range(20):
        policy.ppo_update(b, actor, critic, cfg, 5.0)
    assert policy.entropies(actor(b.obs)).mean() > h0


def test_batch_validation():
    b = random_batch()
    with pytest.raises(ValueError):
        Batch(b.obs, b.actions, np.zeros(len(b)), b.rewards, b.next_obs, b.done)
    with pytest.raises(ValueError):
        Batch(b.obs[:3], b.actions, b.probs, b.rewards, b.next_obs, b.done)


def test_actor_policy_greedy_and_sampling():
    cfg = PpoConfig(hidden=(8,))
    m = flat_manifest(n_chunks=6, ladder=(0.3, 0.75, 1.2, 1.85, 2.85, 4.3))
    actor, _ = policy.make_networks(ObsConfig().dim(6), 6, cfg, 0)
    greedy = policy.ActorPolicy(actor)
    rollout(greedy, m, constant_trace(3.0))
    assert len(greedy.trace) == 6
    assert all(a == int(np.argmax(p)) for _, a, p in greedy.trace)
    s1 = policy.ActorPolicy(actor, rng=np.random.default_rng(5))
    s2 = policy.ActorPolicy(actor, rng=np.random.default_rng(5))
    r1 = rollout(s1, m, constant_trace(3.0))
    r2 = rollout(s2, m, constant_trace(3.0))
    assert [o.action for o in r1.outcomes] == [o.action for o in r2.outcomes]


def test_initial_lambda_default():
    assert PpoConfig().initial_lambda(6) == pytest.approx(math.log(6))
    assert PpoConfig(lambda_init=0.2).initial_lambda(6) == 0.2
