import numpy as np
import pytest

from neondqn.dqn import (
    QNetwork,
    ReplayBuffer,
    TabularQ,
    compute_targets,
    epsilon_at,
    make_optimizer,
    q_forward,
    run_tabular_q_learning,
    select_action,
    soft_update,
    tabular_q_update,
    train_step,
    value_iteration,
)
from neondqn.env import TabularMDP

TINY = dict(channels=(2, 3, 3), input_shape=(90, 160))


def tiny_net(seed=0, **kw):
    return QNetwork(rng=np.random.default_rng(seed), **{**TINY, **kw})


def obs_batch(n, seed=0):
    return np.random.default_rng(seed).integers(-1, 2, size=(n, 90, 160)).astype(np.int8)


# --- Q-network -----------------------------------------------------------------


def test_zero_head_gives_zero_q():
    net = tiny_net(zero_head=True)
    q = q_forward(net, obs_batch(4), mode="eval").data
    np.testing.assert_array_equal(q, 0)


def test_eval_forward_is_deterministic():
    net = tiny_net()
    x = obs_batch(3)
    np.testing.assert_array_equal(net.forward(x, "eval").data, net.forward(x, "eval").data)


@pytest.mark.parametrize("n", [1, 5, 128])
def test_output_shape(n):
    assert tiny_net().forward(obs_batch(n), "eval").shape == (n, 3)


def test_default_architecture_feature_size():
    net = QNetwork()
    assert net.feature_size == 32 * 8 * 17
    assert net.forward(obs_batch(2), "eval").shape == (2, 3)


def test_wrong_input_shape_rejected():
    with pytest.raises(ValueError, match="expected a batch"):
        tiny_net().forward(np.zeros((2, 80, 160)))


def test_state_dict_round_trip():
    a, b = tiny_net(0), tiny_net(1)
    b.load_state_dict(a.state_dict())
    x = obs_batch(2)
    np.testing.assert_array_equal(a.forward(x).data, b.forward(x).data)


# --- action selection ------------------------------------------------------------


def test_greedy_action():
    rng = np.random.default_rng(0)
    assert select_action([1, 3, 2], 0.0, rng) == 1
    assert select_action([5, 5, 5], 0.0, rng) == 0


def test_uniform_exploration_frequencies():
    rng = np.random.default_rng(0)
    counts = np.bincount([select_action([0, 9, 0], 1.0, rng) for _ in range(3000)], minlength=3)
    assert np.all((counts / 3000 >= 0.28) & (counts / 3000 <= 0.39))


def test_greedy_invariant_to_constant_shift():
    r = np.random.default_rng(1)
    for _ in range(100):
        q = r.normal(size=3)
        c = r.normal() * 10
        assert select_action(q, 0, r) == select_action(q + c, 0, r)


def test_epsilon_schedule():
    assert epsilon_at(0) == pytest.approx(1.0)
    assert epsilon_at(10**7) == pytest.approx(0.05)
    assert epsilon_at(100) > epsilon_at(200)


# --- replay buffer ----------------------------------------------------------------


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(capacity=3, obs_shape=(2, 2))
    for i in range(5):
        buf.add(np.full((2, 2), i), i % 3, float(i), np.zeros((2, 2)), False)
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]


def test_replay_sampling_needs_data():
    buf = ReplayBuffer(capacity=10, obs_shape=(2, 2))
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))


def test_replay_sampling_is_uniform_with_replacement():
    buf = ReplayBuffer(capacity=4, obs_shape=(1, 1))
    for i in range(4):
        buf.add(np.zeros((1, 1)), 0, float(i), np.zeros((1, 1)), False)
    b = buf.sample(8000, np.random.default_rng(0))
    freq = np.bincount(b.rewards.astype(int), minlength=4) / 8000
    assert np.all(np.abs(freq - 0.25) < 0.03)


# --- targets and training -----------------------------------------------------------


def head_bias_net(bias):
    net = tiny_net(zero_head=True, dtype=np.float64)
    net.params["head.bias"].data[:] = bias
    return net


def test_targets_terminal_and_bootstrap():
    tgt = head_bias_net([0.5, 0.25, -1.0])
    nxt = obs_batch(2)
    y = compute_targets([0.0, 1.0], nxt, [True, False], tgt, gamma=0.99)
    assert y[0] == 0.0
    assert y[1] == pytest.approx(1.495, abs=1e-12)


def test_targets_myopic():
    tgt = head_bias_net([3.0, 2.0, 1.0])
    y = compute_targets([0.5, 1.0, 0.0], obs_batch(3), [False, False, True], tgt, gamma=0.0)
    np.testing.assert_array_equal(y, [0.5, 1.0, 0.0])


def test_targets_do_not_touch_target_grads():
    net, tgt = tiny_net(0), tiny_net(1)
    buf = ReplayBuffer(64)
    x = obs_batch(40, seed=3)
    for i in range(40):
        buf.add(x[i], i % 3, 1.0, x[(i + 1) % 40], False)
    train_step(net, tgt, buf, make_optimizer(net), np.random.default_rng(0), batch_size=8)
    assert all(t.grad is None for t in tgt.params.values())
    assert any(t.grad is not None for t in net.params.values())


def test_train_step_on_repeated_terminal_transition():
    net, tgt = tiny_net(0), tiny_net(0)
    opt = make_optimizer(net, lr=1e-4)
    buf = ReplayBuffer(16)
    s = obs_batch(1, seed=9)[0]
    for _ in range(16):
        buf.add(s, 2, 1.0, s, True)
    rng = np.random.default_rng(0)
    gaps, losses = [], []
    for _ in range(40):
        losses.append(train_step(net, tgt, buf, opt, rng, batch_size=8))
        q = net.forward(np.repeat(s[None], 8, axis=0), mode="train").data[0, 2]
        gaps.append(abs(1.0 - q))
    assert all(l >= 0 for l in losses)
    assert all(b <= a + 1e-7 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < gaps[0]


def test_only_taken_action_head_gets_gradient():
    net, tgt = tiny_net(0), tiny_net(1)
    buf = ReplayBuffer(16)
    x = obs_batch(16, seed=4)
    for i in range(16):
        buf.add(x[i], 1, 1.0, x[i], True)
    train_step(net, tgt, buf, make_optimizer(net), np.random.default_rng(0), batch_size=8)
    g = net.params["head.weight"].grad
    assert np.all(g[[0, 2]] == 0) and np.any(g[1] != 0)
    assert np.all(net.params["head.bias"].grad[[0, 2]] == 0)


def test_train_step_signals_small_buffer():
    net = tiny_net()
    buf = ReplayBuffer(16)
    assert train_step(net, net.copy(), buf, make_optimizer(net), np.random.default_rng(0), batch_size=4) is None


# --- soft update ------------------------------------------------------------------------


def test_soft_update_extremes_and_hand_value():
    a, b = tiny_net(0), tiny_net(1)
    before = {k: v.copy() for k, v in b.state_dict().items()}
    soft_update(a, b, tau=0.0)
    for k, v in b.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    soft_update(a, b, tau=1.0)
    for k, v in b.state_dict().items():
        np.testing.assert_array_equal(v, a.state_dict()[k])

    a, b = tiny_net(0, dtype=np.float64), tiny_net(0, dtype=np.float64)
    a.params["head.bias"].data[:] = 2.0
    b.params["head.bias"].data[:] = 0.0
    soft_update(a, b, tau=0.005)
    np.testing.assert_allclose(b.params["head.bias"].data, 0.01, rtol=1e-12)


def test_soft_update_contracts_including_running_stats():
    a, b = tiny_net(0, dtype=np.float64), tiny_net(1, dtype=np.float64)
    a.stats["bn1"].mean[:] = 3.0
    old = {k: v.copy() for k, v in b.state_dict().items()}
    soft_update(a, b, tau=0.1)
    src = a.state_dict()
    for k, v in b.state_dict().items():
        np.testing.assert_allclose(np.abs(v - src[k]), 0.9 * np.abs(old[k] - src[k]), rtol=1e-9, atol=1e-12)


# --- tabular oracle -------------------------------------------------------------------


def test_tabular_update_hand_value():
    t = TabularQ(4, alpha=0.1, gamma=0.99)
    delta = tabular_q_update(t, 0, 1, 1.0, 2, False)
    assert delta == 1.0
    assert t.q[0, 1] == pytest.approx(0.1)


def test_tabular_zero_error_no_change():
    t = TabularQ(2, alpha=0.5, gamma=0.5)
    t.q[1] = [2.0, 0.0, 0.0]
    t.q[0, 0] = 1.0 + 0.5 * 2.0
    tabular_q_update(t, 0, 0, 1.0, 1, False)
    assert t.q[0, 0] == 2.0


def test_tabular_terminal_ignores_next_state():
    t = TabularQ(2, alpha=1.0, gamma=0.9)
    t.q[1] = 100.0
    tabular_q_update(t, 0, 0, 0.5, 1, True)
    assert t.q[0, 0] == 0.5


def _mdp(next_state, reward, done, start=0):
    return TabularMDP(np.array(next_state), np.array(reward, float), np.array(done, bool), start)


def test_value_iteration_zero_reward():
    mdp = _mdp([[1, 0, 1], [0, 1, 1]], np.zeros((2, 3)), np.zeros((2, 3)))
    v, _ = value_iteration(mdp, gamma=0.9)
    np.testing.assert_array_equal(v, 0)


def test_value_iteration_self_loop_geometric_series():
    mdp = _mdp([[0, 0, 0]], [[1.0, 1.0, 1.0]], [[False] * 3])
    v, _ = value_iteration(mdp, gamma=0.99, tol=1e-10)
    assert v[0] == pytest.approx(100.0, abs=1e-7)


def test_value_iteration_residual_and_policy():
    r = np.random.default_rng(0)
    n = 12
    mdp = _mdp(r.integers(0, n, size=(n, 3)), r.normal(size=(n, 3)), r.random((n, 3)) < 0.2)
    v, pi = value_iteration(mdp, gamma=0.9, tol=1e-10)
    backup = mdp.reward + np.where(mdp.done, 0, 0.9 * v[mdp.next_state])
    assert np.max(np.abs(backup.max(axis=1) - v)) <= 1e-9
    np.testing.assert_array_equal(pi, backup.argmax(axis=1))


def test_tabular_q_learning_on_chain():
    # states 0..3 on a line, action 2 walks right, reaching 3 pays 1 and ends
    nxt = [[0, 0, 1], [0, 1, 2], [1, 2, 3], [3, 3, 3]]
    rew = [[0, 0, 0], [0, 0, 0], [0, 0, 1], [0, 0, 0]]
    done = [[0, 0, 0], [0, 0, 0], [0, 0, 1], [1, 1, 1]]
    mdp = _mdp(nxt, rew, done)
    table = run_tabular_q_learning(mdp, steps=3000, alpha=0.5, gamma=0.9, epsilon=0.5)
    v, pi = value_iteration(mdp, gamma=0.9)
    assert [table.greedy(s) for s in range(3)] == [2, 2, 2]
    np.testing.assert_array_equal(pi[:3], [2, 2, 2])
