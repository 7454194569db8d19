"""A seedable three-lane dodging game rendered as noisy neon frames.

The course is a fixed list of obstacle rows drawn once from the pattern
seed. Row ``r`` reaches the car on decision step ``(r + 1) * row_interval``;
on that step the car collides if its lane is blocked, otherwise the row
counts as passed. The camera follows the car, so obstacles are drawn at
their position relative to the car's lane.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np


class Action(enum.IntEnum):
    LEFT = 0
    NOMOVE = 1
    RIGHT = 2


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class EnvConfig:
    width: int = 640
    height: int = 360
    lanes: int = 3
    seed: int = 0
    row_interval: int = 3
    max_steps: int = 90
    double_block_prob: float = 0.7

    def validate(self):
        if self.lanes < 2:
            raise ValueError(f"need at least 2 lanes, got {self.lanes}")
        if self.row_interval < self.lanes - 1:
            raise ValueError(
                f"row_interval={self.row_interval} cannot guarantee a reachable free lane "
                f"with {self.lanes} lanes (need >= {self.lanes - 1})"
            )
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")
        if self.width < 267 or self.height < 345:
            # the observation crop must still cover 160x90 pixels
            raise ValueError(f"frame {self.width}x{self.height} too small for a 160x90 observation")
        if not 0 <= self.double_block_prob <= 1:
            raise ValueError(f"double_block_prob must lie in [0, 1], got {self.double_block_prob}")
        return self

    @property
    def n_rows(self):
        return self.max_steps // self.row_interval

    @property
    def first_contact_step(self):
        return self.row_interval


@dataclass(frozen=True)
class EnvState:
    lane: int
    step: int = 0
    cursor: int = 0
    obstacles_passed: int = 0
    terminal: bool = False
    truncated: bool = False

    @property
    def done(self):
        return self.terminal or self.truncated


@dataclass(frozen=True)
class StepInfo:
    """Ground truth for tests. The learning loop never reads it."""

    collided: bool
    obstacles_passed: int
    lane: int


def obstacle_pattern(config):
    """Boolean ``(n_rows, lanes)`` array, True where a lane is blocked.

    Each row blocks ``lanes - 1`` lanes with probability
    ``double_block_prob`` and a single lane otherwise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    rows = np.zeros((config.n_rows, config.lanes), dtype=bool)
    for r in range(config.n_rows):
        k = config.lanes - 1 if rng.random() < config.double_block_prob else 1
        rows[r, rng.choice(config.lanes, size=k, replace=False)] = True
    return rows


class NeonLaneEnv:
    """Pure-function style environment: states go in, states come out."""

    def __init__(self, config=None):
        self.config = (config or EnvConfig()).validate()
        self.pattern = obstacle_pattern(self.config)
        self.pattern.setflags(write=False)
        self._renderer = _Renderer(self.config)

    def reset(self):
        state = EnvState(lane=self.config.lanes // 2)
        return state, self.render(state)

    def step(self, state, action):
        if state.done:
            raise ValueError("cannot step a finished episode; call reset()")
        action = Action(action)
        cfg = self.config
        lane = min(max(state.lane + int(action) - 1, 0), cfg.lanes - 1)
        step = state.step + 1
        cursor, passed = state.cursor, state.obstacles_passed
        collided = False
        if cursor < cfg.n_rows and step == (cursor + 1) * cfg.row_interval:
            if self.pattern[cursor, lane]:
                collided = True
            else:
                passed += 1
                cursor += 1
        new = EnvState(
            lane=lane,
            step=step,
            cursor=cursor,
            obstacles_passed=passed,
            terminal=collided,
            truncated=not collided and step >= cfg.max_steps,
        )
        return new, self.render(new), StepInfo(collided, passed, lane)

    def render(self, state):
        if state.terminal:
            return self.game_over_frame()
        return self._renderer.frame(state.lane, state.step)

    def game_over_frame(self):
        return self._renderer.game_over()


def reset(config):
    env = NeonLaneEnv(config)
    return env.reset()


def game_over_frame(config):
    return NeonLaneEnv(config).game_over_frame()


@dataclass(frozen=True)
class TabularMDP:
    """Deterministic finite MDP stored as ``(states, actions)`` lookup arrays.

    ``done[s, a]`` marks transitions that end the episode; the value of
    their successor is not bootstrapped.
    """

    next_state: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    start: int

    @property
    def n_states(self):
        return self.next_state.shape[0]

    @property
    def n_actions(self):
        return self.next_state.shape[1]


def mdp_state_index(config, lane, step):
    return step * config.lanes + lane


def abstract_mdp(config):
    """The rendering-free twin of :class:`NeonLaneEnv`.

    States are ``(lane, step)`` for ``step`` in ``0..max_steps``; the layer at
    ``max_steps`` is absorbing. Rewards follow the pixel reward rule: 0 on
    collision, 1 for every surviving step after the first obstacle row.
    """
    config.validate()
    if config.n_rows > 50:
        raise ValueError(f"abstract_mdp is meant for small courses (<= 50 rows), got {config.n_rows}")
    pattern = obstacle_pattern(config)
    lanes, horizon = config.lanes, config.max_steps
    n = lanes * (horizon + 1)
    nxt = np.zeros((n, N_ACTIONS), dtype=np.int64)
    rew = np.zeros((n, N_ACTIONS))
    done = np.zeros((n, N_ACTIONS), dtype=bool)
    for step in range(horizon + 1):
        for lane in range(lanes):
            s = mdp_state_index(config, lane, step)
            if step == horizon:
                nxt[s] = s
                done[s] = True
                continue
            for a in Action:
                l2 = min(max(lane + int(a) - 1, 0), lanes - 1)
                s2 = step + 1
                nxt[s, a] = mdp_state_index(config, l2, s2)
                row, rem = divmod(s2, config.row_interval)
                if rem == 0 and row >= 1 and pattern[row - 1, l2]:
                    done[s, a] = True
                    continue
                rew[s, a] = 1.0 if s2 > config.first_contact_step else 0.0
                done[s, a] = s2 >= horizon
    start = mdp_state_index(config, lanes // 2, 0)
    return TabularMDP(nxt, rew, done, start)


def random_policy_return(config):
    """Exact expected undiscounted return of a uniformly random driver."""
    mdp = abstract_mdp(config)
    v = np.zeros(mdp.n_states)
    # transitions only go forward in time, so one backward sweep is exact
    for s in range(mdp.n_states - 1, -1, -1):
        v[s] = np.mean(mdp.reward[s] + np.where(mdp.done[s], 0.0, v[mdp.next_state[s]]))
    return float(v[mdp.start])


# --------------------------------------------------------------------------
# rendering

_HORIZON = 0.545
_CAR_LINE = 0.78
_LANE_WIDTH = 0.14


def _depth_scale(z):
    return 1.0 / (1.0 + z / 2.0)


class _Renderer:
    def __init__(self, config):
        self.cfg = config
        w, h = config.width, config.height
        self.w, self.h = w, h
        self.y_h = int(round(_HORIZON * h))
        self.y_c = int(round(_CAR_LINE * h))
        self.lane_w = _LANE_WIDTH * w
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        self.yy, self.xx = yy, xx
        ground = yy > self.y_h
        depth = np.where(ground, (self.y_c - self.y_h) / np.maximum(yy - self.y_h, 1.0), 0.0)
        self.ground = ground
        # z measured in decision steps along the road
        self.z = np.where(ground, 2.0 * (depth - 1.0), 0.0).astype(np.float32)
        star_rng = np.random.default_rng(12345)
        self.stars = star_rng.random((h, w)) > 0.996
        self.frame = lru_cache(maxsize=512)(self._frame)
        self._game_over = None

    def _frame(self, lane, step):
        cfg = self.cfg
        h, w = self.h, self.w
        t = float(step)
        lum = 0.8 + 0.2 * np.sin(0.9 * t)
        hue = 0.5 + 0.5 * np.sin(0.37 * t + 1.0)

        # sky: purple to orange gradient, cropped away by the filter
        v = np.clip(self.yy / max(self.y_h, 1), 0, 1)[..., None]
        top = np.array([60, 10, 30], np.float32)
        bottom = np.array([90 + 60 * hue, 40 + 50 * hue, 220], np.float32)
        img = (top * (1 - v) + bottom * v) * lum
        img[self.stars & ~self.ground] = 230
        sun_r = 0.12 * h
        sun = ((self.xx - w / 2) ** 2 + (self.yy - (self.y_h - 0.02 * h)) ** 2 < sun_r ** 2) & ~self.ground
        stripes = (self.yy.astype(np.int32) // 4) % 3 != 0
        img[sun & stripes] = np.array([60, 170, 255], np.float32) * lum

        # road surface with scrolling grid
        g = self.ground
        shade = np.clip(1.0 - (self.yy - self.y_h) / (h - self.y_h), 0, 1)
        road = np.stack([30 + 25 * shade, 10 + 8 * shade, 22 + 16 * hue * shade], -1) * (0.9 + 0.1 * lum)
        img[g] = road[g]
        cam = lane - (cfg.lanes - 1) / 2.0
        s = _depth_scale(self.z)
        xrel = (self.xx - w / 2) / (self.lane_w * s) + cam  # lane units, 0 at road centre
        grid_v = np.abs(xrel * 2 - np.round(xrel * 2)) < 0.03 / s
        grid_h = np.abs(((self.z + 0.37 * t) % 1.0) - 0.5) < 0.04 / s * 0.2
        img[g & (grid_v | grid_h)] = np.array([58, 22, 50], np.float32) * (0.9 + 0.1 * lum)

        half = cfg.lanes / 2.0
        edge = g & (np.abs(np.abs(xrel) - half) < 0.05)
        img[edge] = np.array([255, 240, 120], np.float32)
        divider = g & (np.abs(np.abs(xrel) - half + 1) < 0.03) & (((self.z + 0.5 * t) % 1.0) < 0.55)
        if cfg.lanes > 2:
            img[divider] = np.array([200, 200, 90], np.float32)

        # obstacles, far rows first so nearer ones overdraw
        pattern = _pattern_cache(cfg)
        for r in range(min(cfg.n_rows, step // cfg.row_interval + 3) - 1, -1, -1):
            z = (r + 1) * cfg.row_interval - step
            if z < 0 or z > 2 * cfg.row_interval:
                continue
            sc = _depth_scale(z)
            y_bot = self.y_h + (self.y_c - self.y_h) * sc
            height = 0.16 * h * sc
            for ol in np.flatnonzero(pattern[r]):
                xc = w / 2 + (ol - (cfg.lanes - 1) / 2.0 - cam) * self.lane_w * sc
                half_w = 0.42 * self.lane_w * sc
                box = (
                    (np.abs(self.xx - xc) < half_w)
                    & (self.yy <= y_bot)
                    & (self.yy > y_bot - height)
                )
                glow = 0.85 + 0.15 * (self.yy - (y_bot - height)) / max(height, 1.0)
                col = np.array([80 + 100 * hue, 255, 255], np.float32)
                img[box] = col * glow[box][:, None]

        # the car always sits at the bottom centre
        cw, ch = 0.09 * w, 0.045 * h
        body = (np.abs(self.xx - w / 2) < cw / 2) & (self.yy > self.y_c - ch) & (self.yy <= self.y_c)
        cab = (np.abs(self.xx - w / 2) < cw / 4) & (self.yy > self.y_c - 1.6 * ch) & (self.yy <= self.y_c - ch)
        img[body] = np.array([230, 60, 255], np.float32)
        img[cab] = np.array([255, 200, 150], np.float32)
        out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.setflags(write=False)
        return out

    def game_over(self):
        if self._game_over is None:
            h, w = self.h, self.w
            img = np.empty((h, w, 3), np.uint8)
            img[:] = (30, 10, 200)
            # blocky banner across the middle
            band = (self.yy > 0.4 * h) & (self.yy < 0.6 * h) & (np.abs(self.xx - w / 2) < 0.35 * w)
            letters = band & ((self.xx.astype(np.int32) // max(w // 40, 1)) % 2 == 0)
            img[band] = (20, 0, 90)
            img[letters] = (160, 220, 255)
            img.setflags(write=False)
            self._game_over = img
        return self._game_over


@lru_cache(maxsize=64)
def _pattern_cache(config):
    p = obstacle_pattern(config)
    p.setflags(write=False)
    return p


def with_seed(config, seed):
    return replace(config, seed=seed)
