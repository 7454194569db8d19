"""Q-network, replay memory and the DQN / tabular Q-learning updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optim import RMSprop
from .tensor import (
    RunningStats,
    Tensor,
    batchnorm2d,
    conv2d,
    flatten,
    gather,
    linear,
    relu,
    squared_td_loss,
)
from .vision import OBS_HEIGHT, OBS_WIDTH

N_ACTIONS = 3


def _conv_out(n, k, s):
    return (n - k) // s + 1


class QNetwork:
    """Three conv -> batch-norm -> ReLU blocks and a linear head.

    Convolutions are valid-padded and bias-free (batch norm supplies the
    shift). The head maps the flattened features to one Q-value per action.
    """

    def __init__(
        self,
        channels=(16, 32, 32),
        kernel=5,
        stride=2,
        input_shape=(OBS_HEIGHT, OBS_WIDTH),
        n_actions=N_ACTIONS,
        dtype=np.float32,
        rng=None,
        zero_head=False,
        bn_momentum=0.1,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = tuple(channels)
        self.kernel = kernel
        self.stride = stride
        self.input_shape = tuple(input_shape)
        self.n_actions = n_actions
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.stats = {}
        h, w = self.input_shape
        c_in = 1
        for i, c in enumerate(self.channels, start=1):
            fan_in = c_in * kernel * kernel
            wgt = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c, c_in, kernel, kernel))
            self.params[f"conv{i}.weight"] = Tensor(wgt.astype(self.dtype), requires_grad=True)
            self.params[f"bn{i}.gamma"] = Tensor(np.ones(c, self.dtype), requires_grad=True)
            self.params[f"bn{i}.beta"] = Tensor(np.zeros(c, self.dtype), requires_grad=True)
            self.stats[f"bn{i}"] = RunningStats(c, momentum=bn_momentum, dtype=self.dtype)
            h, w = _conv_out(h, kernel, stride), _conv_out(w, kernel, stride)
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_shape} too small for {len(self.channels)} conv layers")
            c_in = c
        self.feature_size = c_in * h * w
        bound = 1.0 / math.sqrt(self.feature_size)
        if zero_head:
            head_w = np.zeros((n_actions, self.feature_size))
            head_b = np.zeros(n_actions)
        else:
            head_w = rng.uniform(-bound, bound, size=(n_actions, self.feature_size))
            head_b = rng.uniform(-bound, bound, size=n_actions)
        self.params["head.weight"] = Tensor(head_w.astype(self.dtype), requires_grad=True)
        self.params["head.bias"] = Tensor(head_b.astype(self.dtype), requires_grad=True)

    def forward(self, x, mode="eval"):
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != self.input_shape:
            raise ValueError(
                f"expected a batch of 1x{self.input_shape[0]}x{self.input_shape[1]} inputs, got {x.shape}"
            )
        h = Tensor(x.astype(self.dtype, copy=False))
        for i in range(1, len(self.channels) + 1):
            h = conv2d(h, self.params[f"conv{i}.weight"], stride=self.stride)
            h = batchnorm2d(
                h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"], self.stats[f"bn{i}"], mode=mode
            )
            h = relu(h)
        return linear(flatten(h), self.params["head.weight"], self.params["head.bias"])

    __call__ = forward

    def state_dict(self):
        out = {k: t.data for k, t in self.params.items()}
        for k, s in self.stats.items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    def load_state_dict(self, arrays):
        own = self.state_dict()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)}")
        for k, dst in own.items():
            src = np.asarray(arrays[k])
            if src.shape != dst.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src

    def copy(self):
        other = QNetwork.__new__(QNetwork)
        other.channels, other.kernel, other.stride = self.channels, self.kernel, self.stride
        other.input_shape, other.n_actions, other.dtype = self.input_shape, self.n_actions, self.dtype
        other.feature_size = self.feature_size
        other.params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()}
        other.stats = {}
        for k, s in self.stats.items():
            rs = RunningStats(len(s.mean), momentum=s.momentum, dtype=self.dtype)
            rs.mean[...] = s.mean
            rs.var[...] = s.var
            other.stats[k] = rs
        return other


def q_forward(net, batch, mode="eval"):
    return net.forward(batch, mode=mode)


def select_action(qvalues, epsilon, rng):
    """Epsilon-greedy: uniform random with probability ``epsilon``, else argmax.

    ``np.argmax`` already returns the lowest index among ties.
    """
    q = np.asarray(qvalues)
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def epsilon_at(step, start=1.0, end=0.05, decay=2000.0):
    return end + (start - end) * math.exp(-step / decay)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first.

    Observation differences live in int8 arrays. ``np.zeros`` reserves
    pages lazily, so an unfilled buffer costs little memory.
    """

    def __init__(self, capacity=30000, obs_shape=(OBS_HEIGHT, OBS_WIDTH)):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.states = np.zeros((capacity, *self.obs_shape), dtype=np.int8)
        self.next_states = np.zeros((capacity, *self.obs_shape), dtype=np.int8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, terminal):
        i = self.cursor
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s_next
        self.terminals[i] = terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        """Uniform sampling with replacement."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(self.size, size=batch_size)
        return Batch(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.terminals[idx],
        )


def compute_targets(rewards, next_states, terminals, target_net, gamma=0.99):
    """``r + gamma * max_a' Q(s', a'; target)``, with the bootstrap dropped on terminal steps."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    y = rewards.copy()
    live = ~terminals
    if live.any() and gamma != 0:
        q_next = target_net.forward(np.asarray(next_states)[live], mode="eval").data
        y[live] += gamma * q_next.max(axis=1)
    return y


def train_step(net, target_net, buffer, optimizer, rng, batch_size=128, gamma=0.99):
    """One gradient step on the squared TD loss; returns the loss, or None if the buffer is too small."""
    if len(buffer) < batch_size:
        return None
    batch = buffer.sample(batch_size, rng)
    y = compute_targets(batch.rewards, batch.next_states, batch.terminals, target_net, gamma)
    optimizer.zero_grad()
    q = net.forward(batch.states, mode="train")
    loss = squared_td_loss(gather(q, batch.actions), y.astype(net.dtype))
    loss.backward()
    optimizer.step()
    return float(loss.data)


def soft_update(net, target_net, tau=0.005):
    """Blend ``target <- tau * online + (1 - tau) * target`` in place, running stats included."""
    src = net.state_dict()
    dst = target_net.state_dict()
    if src.keys() != dst.keys():
        raise ValueError("networks have different layouts")
    for k, d in dst.items():
        s = src[k]
        if s.shape != d.shape:
            raise ValueError(f"{k}: shape {s.shape} does not match {d.shape}")
        d *= 1.0 - tau
        d += tau * s
    return target_net


def make_optimizer(net, lr=1e-3, rho=0.99, eps=1e-8):
    return RMSprop(net.params.items(), lr=lr, rho=rho, eps=eps)


# --------------------------------------------------------------------------
# tabular oracle


TIE_TOLERANCE = 1e-6


class TabularQ:
    def __init__(self, n_states, n_actions=N_ACTIONS, alpha=0.5, gamma=0.99):
        self.q = np.zeros((n_states, n_actions))
        self.alpha = alpha
        self.gamma = gamma

    def greedy(self, s):
        return int(np.argmax(self.q[s]))


def tabular_q_update(table, s, a, r, s_next, terminal):
    """One Q-learning backup; returns the TD error."""
    bootstrap = 0.0 if terminal else table.gamma * table.q[s_next].max()
    delta = r + bootstrap - table.q[s, a]
    table.q[s, a] += table.alpha * delta
    return delta


def bellman_backup(mdp, v, gamma):
    """Action values ``r + gamma * V(s')`` for every state/action pair."""
    return mdp.reward + np.where(mdp.done, 0.0, gamma * v[mdp.next_state])


def value_iteration(mdp, gamma=0.99, tol=1e-10, max_iter=100_000):
    """Sup-norm value iteration; returns ``(values, greedy_policy)``."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        new = bellman_backup(mdp, v, gamma).max(axis=1)
        delta = np.max(np.abs(new - v))
        v = new
        if delta <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")
    policy = optimal_actions(bellman_backup(mdp, v, gamma)).argmax(axis=1)
    return v, policy


def optimal_actions(q, tol=TIE_TOLERANCE):
    """Boolean mask of actions within ``tol`` of the best value in each row.

    Moves that lead to the same place (LEFT in the leftmost lane, say) have
    equal values, so the optimal policy is a set of actions per state.
    """
    q = np.asarray(q, dtype=np.float64)
    return q >= q.max(axis=1, keepdims=True) - tol


def run_tabular_q_learning(
    mdp, steps=50_000, alpha=0.5, gamma=0.99, epsilon=0.5, rng=None, exploring_starts=True
):
    """Epsilon-greedy Q-learning on a tabular MDP.

    With ``exploring_starts`` each episode begins in a uniformly drawn state,
    so states the start state cannot reach still get visited.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    table = TabularQ(mdp.n_states, mdp.n_actions, alpha=alpha, gamma=gamma)

    def start():
        return int(rng.integers(mdp.n_states)) if exploring_starts else mdp.start

    s = start()
    for _ in range(steps):
        a = select_action(table.q[s], epsilon, rng)
        s2 = int(mdp.next_state[s, a])
        done = bool(mdp.done[s, a])
        tabular_q_update(table, s, a, float(mdp.reward[s, a]), s2, done)
        s = start() if done else s2
    return table
