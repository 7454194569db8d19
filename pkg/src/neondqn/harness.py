"""Training and evaluation loops wiring simulator, filter and agent together.

The loops see only frames. Rewards and episode ends come from the
game-over histogram test and from counting decision steps against the
fixed obstacle schedule; the simulator's ``StepInfo`` is dropped on the
floor.

metrics.csv columns
    episode, total_reward, steps, mean_loss, epsilon

timing.csv columns
    episode, wall_time

eval_noise.csv columns
    noise, episode, reward, moving_average
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .dqn import (
    QNetwork,
    ReplayBuffer,
    epsilon_at,
    make_optimizer,
    select_action,
    soft_update,
    train_step,
)
from .env import EnvConfig, NeonLaneEnv
from .pnm import write_ppm
from .vision import (
    GAME_OVER_DISTANCE,
    add_salt_pepper,
    bhattacharyya,
    diff_observation,
    gray_histogram,
    gray_level_histogram,
    preprocess,
    preprocess_gray,
    to_grayscale,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "total_reward", "steps", "mean_loss", "epsilon"]
EVAL_HEADER = ["noise", "episode", "reward", "moving_average"]
EVAL_NOISE_LEVELS = (0.0, 0.004, 0.01, 0.10, 0.25)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    episodes: int = 4000
    lr: float = 1e-3
    rho: float = 0.99
    rms_eps: float = 1e-8
    batch_size: int = 128
    buffer_size: int = 30000
    gamma: float = 0.99
    tau: float = 0.005
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 2000.0
    channels: tuple = (16, 32, 32)
    train_every: int = 1
    learning_starts: int = 0
    noise: float = 0.0
    frame_skip_prob: float = 0.0
    seed: int = 0
    checkpoint_every: int = 100
    out_dir: str = "runs/default"

    def validate(self):
        self.env.validate()
        if self.episodes < 0:
            raise ValueError(f"episodes must be >= 0, got {self.episodes}")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_size")
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"noise must lie in [0, 1], got {self.noise}")
        if self.train_every < 1:
            raise ValueError(f"train_every must be >= 1, got {self.train_every}")
        if len(self.channels) != 3:
            raise ValueError(f"the Q-network has three conv layers, got channels={self.channels}")
        return self


def full_profile(**overrides):
    """Full-scale run: 4000 episodes, minibatch 128, replay 30000, a train step every decision."""
    return dataclasses.replace(RunConfig(), **overrides).validate()


def desk_profile(**overrides):
    """A CPU-friendly run that finishes in minutes rather than hours."""
    base = RunConfig(
        episodes=600,
        batch_size=32,
        channels=(8, 16, 16),
        eps_decay=1500.0,
        train_every=4,
        learning_starts=256,
        out_dir="runs/desk",
    )
    return dataclasses.replace(base, **overrides).validate()


# --------------------------------------------------------------------------
# config files


def _coerce(value, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def apply_overrides(config, pairs):
    """Apply ``key -> string`` overrides; ``env.<field>`` reaches the simulator config."""
    env_kw, run_kw = {}, {}
    env_fields = {f.name: f for f in dataclasses.fields(EnvConfig)}
    run_fields = {f.name for f in dataclasses.fields(RunConfig)} - {"env"}
    for key, raw in pairs.items():
        if key.startswith("env."):
            name = key[4:]
            if name not in env_fields:
                raise KeyError(f"unknown env setting {key!r}")
            env_kw[name] = _coerce(raw, getattr(config.env, name))
        elif key in run_fields:
            run_kw[key] = _coerce(raw, getattr(config, key))
        else:
            raise KeyError(f"unknown setting {key!r}")
    env = dataclasses.replace(config.env, **env_kw)
    return dataclasses.replace(config, env=env, **run_kw).validate()


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path, base=None):
    with open(path) as fh:
        pairs = parse_config_text(fh.read())
    profile = pairs.pop("profile", "desk")
    if base is None:
        base = {"desk": desk_profile, "full": full_profile}[profile]()
    return apply_overrides(base, pairs)


def dump_config(config):
    lines = []
    for f in dataclasses.fields(config):
        if f.name == "env":
            continue
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    for f in dataclasses.fields(config.env):
        lines.append(f"env.{f.name} = {getattr(config.env, f.name)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# reward and observation plumbing


def pixel_reward(frame, steps_taken, game_over_ref, first_contact_step):
    """Reward and terminal flag for the frame seen after ``steps_taken`` decisions.

    Collision (histogram within 0.15 of the game-over screen) ends the
    episode with reward 0. Otherwise the car earns 1 once the first obstacle
    row, due on decision step ``first_contact_step``, is behind it.
    """
    return _reward_from_gray(to_grayscale(frame), steps_taken, game_over_ref, first_contact_step)


def _reward_from_gray(gray, steps_taken, game_over_ref, first_contact_step):
    ref = np.asarray(game_over_ref)
    ref_hist = ref if ref.ndim == 1 else gray_histogram(ref)
    if bhattacharyya(gray_level_histogram(gray), ref_hist) <= GAME_OVER_DISTANCE:
        return 0.0, True
    if steps_taken > first_contact_step:
        return 1.0, False
    return 0.0, False


def moving_average(series, window=25):
    """Trailing mean over the last ``min(window, i + 1)`` entries."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


class Observer:
    """Turns raw frames into network inputs, optionally corrupting them first."""

    def __init__(self, noise, rng, frame_skip_prob=0.0):
        self.noise = noise
        self.rng = rng
        self.frame_skip_prob = frame_skip_prob
        self.previous = None
        self._last_frame = None

    def _observe(self, frame, gray=None):
        if self.noise > 0:
            return preprocess(add_salt_pepper(frame, self.noise, self.rng))
        return preprocess_gray(to_grayscale(frame) if gray is None else gray)

    def first(self, frame, gray=None):
        self._last_frame = frame
        self.previous = self._observe(frame, gray)
        return diff_observation(self.previous, self.previous)

    def next(self, frame, terminal, gray=None):
        """``gray`` may carry the frame's grayscale image when the caller has it."""
        if terminal:
            # the game-over screen goes in as is, not differenced
            return self._observe(frame, gray).astype(np.int8)
        if self.frame_skip_prob > 0 and self.rng.random() < self.frame_skip_prob:
            frame, gray = self._last_frame, None
        self._last_frame = frame
        obs = self._observe(frame, gray)
        d = diff_observation(obs, self.previous)
        self.previous = obs
        return d


# --------------------------------------------------------------------------
# checkpoints


def save_agent(path, net, target=None, optimizer=None, global_step=0):
    arrays = {f"online.{k}": v for k, v in net.state_dict().items()}
    if target is not None:
        arrays.update({f"target.{k}": v for k, v in target.state_dict().items()})
    if optimizer is not None:
        st = optimizer.state
        arrays.update({f"optim.square_avg.{k}": v for k, v in st.square_avg.items()})
        arrays["optim.hyper"] = np.array([st.learning_rate, st.rho, st.eps])
    arrays["meta.channels"] = np.array(net.channels, dtype=np.float64)
    arrays["meta.kernel_stride"] = np.array([net.kernel, net.stride], dtype=np.float64)
    arrays["meta.global_step"] = np.array(global_step, dtype=np.float64)
    checkpoint.save(path, arrays)


def load_agent(path, dtype=np.float32):
    """Return ``(online, target, optimizer, global_step)`` from a checkpoint file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = checkpoint.load(path)
    channels = tuple(int(c) for c in arrays["meta.channels"])
    kernel, stride = (int(v) for v in arrays["meta.kernel_stride"])
    net = QNetwork(channels=channels, kernel=kernel, stride=stride, dtype=dtype)
    net.load_state_dict({k[len("online."):]: v for k, v in arrays.items() if k.startswith("online.")})
    target = None
    if any(k.startswith("target.") for k in arrays):
        target = QNetwork(channels=channels, kernel=kernel, stride=stride, dtype=dtype)
        target.load_state_dict({k[len("target."):]: v for k, v in arrays.items() if k.startswith("target.")})
    optimizer = None
    if "optim.hyper" in arrays:
        lr, rho, eps = arrays["optim.hyper"]
        optimizer = make_optimizer(net, lr=float(lr), rho=float(rho), eps=float(eps))
        prefix = "optim.square_avg."
        for k, v in arrays.items():
            if k.startswith(prefix):
                optimizer.state.square_avg[k[len(prefix):]] = v.astype(dtype)
    return net, target, optimizer, int(arrays["meta.global_step"])


# --------------------------------------------------------------------------
# loops


@dataclass
class EpisodeMetrics:
    episode: int
    total_reward: float
    steps: int
    mean_loss: float
    epsilon: float
    wall_time: float = 0.0

    def row(self):
        loss = "" if np.isnan(self.mean_loss) else repr(float(self.mean_loss))
        return [self.episode, int(self.total_reward), self.steps, loss, repr(float(self.epsilon))]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class Trainer:
    """Owns the learner state for one training run."""

    def __init__(self, config):
        self.config = config.validate()
        ss = np.random.SeedSequence(config.seed)
        init_seed, act_seed, sample_seed, noise_seed = ss.spawn(4)
        self.env = NeonLaneEnv(config.env)
        self.net = QNetwork(channels=config.channels, rng=np.random.default_rng(init_seed))
        self.target = self.net.copy()
        self.optimizer = make_optimizer(self.net, lr=config.lr, rho=config.rho, eps=config.rms_eps)
        self.buffer = ReplayBuffer(config.buffer_size)
        self.act_rng = np.random.default_rng(act_seed)
        self.sample_rng = np.random.default_rng(sample_seed)
        self.observer = Observer(config.noise, np.random.default_rng(noise_seed), config.frame_skip_prob)
        self.game_over_hist = gray_histogram(self.env.game_over_frame())
        self.global_step = 0

    def greedy_q(self, s):
        return self.net.forward(s[None], mode="eval").data[0]

    def run_episode(self, episode, epsilon_fn=None, learn=True):
        cfg = self.config
        env = self.env
        state, frame = env.reset()
        s = self.observer.first(frame)
        total, steps, losses = 0.0, 0, []
        eps = cfg.eps_start
        while True:
            eps = epsilon_fn(self.global_step) if epsilon_fn else epsilon_at(
                self.global_step, cfg.eps_start, cfg.eps_end, cfg.eps_decay
            )
            q = self.greedy_q(s) if eps < 1.0 else np.zeros(3)
            a = select_action(q, eps, self.act_rng)
            state, frame, _ = env.step(state, a)
            steps += 1
            self.global_step += 1
            gray = to_grayscale(frame)
            r, terminal = _reward_from_gray(gray, steps, self.game_over_hist, cfg.env.first_contact_step)
            s_next = self.observer.next(frame, terminal, gray)
            total += r
            if learn:
                self.buffer.add(s, a, r, s_next, terminal)
                if (
                    len(self.buffer) >= max(cfg.batch_size, cfg.learning_starts)
                    and self.global_step % cfg.train_every == 0
                ):
                    loss = train_step(
                        self.net, self.target, self.buffer, self.optimizer, self.sample_rng,
                        batch_size=cfg.batch_size, gamma=cfg.gamma,
                    )
                    soft_update(self.net, self.target, cfg.tau)
                    losses.append(loss)
            s = s_next
            if terminal or steps >= cfg.env.max_steps:
                break
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        return EpisodeMetrics(episode, total, steps, mean_loss, eps)

    def save(self, path):
        save_agent(path, self.net, self.target, self.optimizer, self.global_step)


def run_training(config, progress=None):
    """Train for ``config.episodes`` episodes and write metrics, timings and checkpoints.

    Returns the list of :class:`EpisodeMetrics`.
    """
    config.validate()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory not writable: {out}")
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(dump_config(config))
    trainer = Trainer(config)
    metrics = []
    metrics_path = os.path.join(out, "metrics.csv")
    with open(metrics_path, "w", newline="") as mf, open(os.path.join(out, "timing.csv"), "w", newline="") as tf:
        mw = csv.writer(mf, lineterminator="\n")
        tw = csv.writer(tf, lineterminator="\n")
        mw.writerow(METRICS_HEADER)
        tw.writerow(["episode", "wall_time"])
        for ep in range(config.episodes):
            t0 = time.perf_counter()
            m = trainer.run_episode(ep)
            m.wall_time = time.perf_counter() - t0
            metrics.append(m)
            mw.writerow(m.row())
            tw.writerow([ep, f"{m.wall_time:.4f}"])
            if (ep + 1) % config.checkpoint_every == 0:
                trainer.save(os.path.join(out, f"checkpoint_{ep + 1:05d}.bin"))
            if progress is not None:
                progress(m)
    if config.episodes > 0:
        trainer.save(os.path.join(out, "checkpoint_final.bin"))
    log.info("wrote %s", metrics_path)
    return metrics


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_eval(
    checkpoint_path,
    env_config=None,
    noise_levels=EVAL_NOISE_LEVELS,
    episodes=100,
    seed=0,
    out_path=None,
    window=25,
    dump_dir=None,
):
    """Greedy rollouts of a saved agent under salt & pepper noise.

    Returns ``{noise: [episode rewards]}`` and, if ``out_path`` is given,
    writes the per-episode rewards with their moving average. With
    ``dump_dir`` the clean frames of each level's first episode are saved
    as PPM files.
    """
    net, _, _, _ = load_agent(checkpoint_path)
    env_config = env_config or EnvConfig()
    env = NeonLaneEnv(env_config)
    go_hist = gray_histogram(env.game_over_frame())
    results = {}
    rows = []
    for li, p in enumerate(noise_levels):
        rng = np.random.default_rng([seed, li])
        rewards = []
        for ep in range(episodes):
            observer = Observer(p, rng)
            state, frame = env.reset()
            dump = _frame_dumper(dump_dir, f"noise{li}_") if ep == 0 else None
            if dump:
                dump(0, frame)
            s = observer.first(frame)
            total, steps = 0.0, 0
            while True:
                a = int(np.argmax(net.forward(s[None], mode="eval").data[0]))
                state, frame, _ = env.step(state, a)
                steps += 1
                if dump:
                    dump(steps, frame)
                gray = to_grayscale(frame)
                r, terminal = _reward_from_gray(gray, steps, go_hist, env_config.first_contact_step)
                total += r
                if terminal or steps >= env_config.max_steps:
                    break
                s = observer.next(frame, False, gray)
            rewards.append(total)
        results[p] = rewards
        ma = moving_average(rewards, window)
        rows.extend([repr(float(p)), ep, int(r), repr(float(m))] for ep, (r, m) in enumerate(zip(rewards, ma)))
    if out_path is not None:
        _write_csv(out_path, EVAL_HEADER, rows)
    return results


def _frame_dumper(dump_dir, prefix):
    if dump_dir is None:
        return None
    os.makedirs(dump_dir, exist_ok=True)

    def dump(step, frame):
        write_ppm(os.path.join(dump_dir, f"{prefix}step{step:04d}.ppm"), frame)

    return dump


def run_baseline(env_config=None, episodes=100, seed=0, dump_dir=None):
    """Episode rewards of a uniformly random driver, measured through the pixel loop.

    With ``dump_dir`` the frames of the first episode are saved as PPM files.
    """
    env_config = env_config or EnvConfig()
    env = NeonLaneEnv(env_config)
    go_hist = gray_histogram(env.game_over_frame())
    rng = np.random.default_rng(seed)
    rewards = []
    for ep in range(episodes):
        state, frame = env.reset()
        dump = _frame_dumper(dump_dir, "") if ep == 0 else None
        if dump:
            dump(0, frame)
        total, steps = 0.0, 0
        while True:
            state, frame, _ = env.step(state, int(rng.integers(3)))
            steps += 1
            if dump:
                dump(steps, frame)
            r, terminal = pixel_reward(frame, steps, go_hist, env_config.first_contact_step)
            total += r
            if terminal or steps >= env_config.max_steps:
                break
        rewards.append(total)
    return rewards
