import os

import numpy as np
import pytest

from neondqn import pnm
from neondqn.dqn import value_iteration
from neondqn.env import (
    Action,
    EnvConfig,
    EnvState,
    NeonLaneEnv,
    abstract_mdp,
    game_over_frame,
    mdp_state_index,
    obstacle_pattern,
    random_policy_return,
    reset,
)
from neondqn.harness import pixel_reward
from neondqn.vision import bhattacharyya, gray_histogram, preprocess

SMALL = EnvConfig(max_steps=30)


@pytest.fixture(scope="module")
def env():
    return NeonLaneEnv(SMALL)


def safe_script(config):
    """Optimal action sequence read off the undiscounted value-iteration policy."""
    mdp = abstract_mdp(config)
    _, policy = value_iteration(mdp, gamma=1.0)
    lane, actions = config.lanes // 2, []
    for step in range(config.max_steps):
        a = int(policy[mdp_state_index(config, lane, step)])
        actions.append(a)
        lane = min(max(lane + a - 1, 0), config.lanes - 1)
    return actions


def test_reset_is_deterministic():
    s1, f1 = reset(SMALL)
    s2, f2 = reset(SMALL)
    assert s1 == s2
    assert f1.tobytes() == f2.tobytes()
    assert s1.lane == 1 and s1.step == 0 and s1.obstacles_passed == 0 and not s1.terminal


def test_seeds_give_different_patterns():
    pats = {obstacle_pattern(EnvConfig(seed=s)).tobytes() for s in range(20)}
    assert len(pats) == 20


def test_every_row_leaves_a_free_lane():
    for seed in range(50):
        p = obstacle_pattern(EnvConfig(seed=seed))
        assert np.all(p.sum(axis=1) <= 2)
        assert np.all(p.sum(axis=1) >= 1)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        NeonLaneEnv(EnvConfig(lanes=1))
    with pytest.raises(ValueError):
        NeonLaneEnv(EnvConfig(row_interval=1))
    with pytest.raises(ValueError):
        NeonLaneEnv(EnvConfig(width=480, height=270))


def test_left_at_lane_zero_stays(env):
    s, _ = env.reset()
    s, _, info = env.step(s, Action.LEFT)
    s, _, info = env.step(s, Action.LEFT)
    assert s.lane == 0 and info.lane == 0
    assert not info.collided


def test_scripted_safe_run_survives_the_cap(env):
    s, _ = env.reset()
    for a in safe_script(SMALL):
        s, frame, info = env.step(s, a)
        assert not info.collided
    assert s.truncated and not s.terminal
    assert s.obstacles_passed == SMALL.n_rows


def test_entering_blocked_lane_ends_episode(env):
    blocked = int(np.flatnonzero(env.pattern[0])[0])
    s, _ = env.reset()
    moves = blocked - s.lane
    script = [Action.RIGHT if moves > 0 else Action.LEFT] * abs(moves)
    script += [Action.NOMOVE] * (SMALL.row_interval - len(script))
    for a in script:
        s, frame, info = env.step(s, a)
    assert s.terminal and info.collided
    assert frame.tobytes() == env.game_over_frame().tobytes()
    with pytest.raises(ValueError):
        env.step(s, Action.NOMOVE)


def test_collision_flag_iff_game_over_frame(env):
    r = np.random.default_rng(3)
    go = env.game_over_frame().tobytes()
    for _ in range(30):
        s, _ = env.reset()
        while not s.done:
            s, frame, info = env.step(s, int(r.integers(3)))
            assert info.collided == (frame.tobytes() == go) == s.terminal


def test_obstacles_passed_is_monotone(env):
    r = np.random.default_rng(4)
    s, _ = env.reset()
    last = 0
    while not s.done:
        s, _, info = env.step(s, int(r.integers(3)))
        assert info.obstacles_passed >= last
        last = info.obstacles_passed


def test_game_over_frame_is_constant():
    assert game_over_frame(SMALL).tobytes() == game_over_frame(SMALL).tobytes()


def test_game_over_frame_far_from_play_frames(env):
    go = gray_histogram(env.game_over_frame())
    assert bhattacharyya(go, go) == 0
    r = np.random.default_rng(5)
    for _ in range(40):
        s = EnvState(lane=int(r.integers(3)), step=int(r.integers(SMALL.max_steps)))
        assert bhattacharyya(gray_histogram(env.render(s)), go) > 0.5


def test_render_pure_and_animated(env):
    s = EnvState(lane=0, step=4)
    assert env.render(s).tobytes() == env.render(EnvState(lane=0, step=4)).tobytes()
    frames = [env.render(EnvState(lane=1, step=k)).tobytes() for k in range(10)]
    assert all(a != b for a, b in zip(frames, frames[1:]))


def test_obstacles_survive_the_filter():
    # same state, two courses whose first row differs
    a = NeonLaneEnv(EnvConfig(seed=0))
    b = next(
        NeonLaneEnv(EnvConfig(seed=s))
        for s in range(1, 100)
        if not np.array_equal(obstacle_pattern(EnvConfig(seed=s))[0], a.pattern[0])
    )
    for step in (1, 2):
        oa = preprocess(a.render(EnvState(lane=1, step=step)))
        ob = preprocess(b.render(EnvState(lane=1, step=step)))
        assert np.mean(oa != ob) >= 0.01


def test_full_determinism_of_frame_sequence():
    r = np.random.default_rng(8)
    actions = r.integers(0, 3, size=40)

    def roll():
        e = NeonLaneEnv(EnvConfig(seed=11))
        s, f = e.reset()
        out = [f.tobytes()]
        for a in actions:
            if s.done:
                break
            s, f, _ = e.step(s, int(a))
            out.append(f.tobytes())
        return out

    assert roll() == roll()


# --- abstract MDP ------------------------------------------------------------------


def test_abstract_mdp_state_count():
    mdp = abstract_mdp(SMALL)
    assert mdp.n_states == SMALL.lanes * (SMALL.max_steps + 1)


def test_abstract_mdp_rejects_long_courses():
    with pytest.raises(ValueError):
        abstract_mdp(EnvConfig(max_steps=300))


@pytest.mark.parametrize("seed", range(6))
def test_co_simulation_with_pixel_env(seed):
    cfg = EnvConfig(max_steps=30, seed=seed)
    env = NeonLaneEnv(cfg)
    mdp = abstract_mdp(cfg)
    go = gray_histogram(env.game_over_frame())
    r = np.random.default_rng(100 + seed)
    for _ in range(5):
        s, _ = env.reset()
        m = mdp.start
        steps = 0
        while True:
            a = int(r.integers(3))
            s, frame, info = env.step(s, a)
            steps += 1
            reward, terminal = pixel_reward(frame, steps, go, cfg.first_contact_step)
            assert reward == mdp.reward[m, a]
            assert (terminal or s.truncated) == mdp.done[m, a]
            m = int(mdp.next_state[m, a])
            if s.done:
                break
            assert m == mdp_state_index(cfg, s.lane, s.step)


def test_optimal_return_is_steps_after_first_obstacle():
    for seed in range(5):
        cfg = EnvConfig(max_steps=45, seed=seed)
        mdp = abstract_mdp(cfg)
        v, _ = value_iteration(mdp, gamma=1.0)
        assert v[mdp.start] == cfg.max_steps - cfg.first_contact_step


def test_random_policy_return_matches_monte_carlo():
    cfg = EnvConfig(max_steps=30, seed=2)
    mdp = abstract_mdp(cfg)
    exact = random_policy_return(cfg)
    r = np.random.default_rng(0)
    totals = []
    for _ in range(20000):
        s, total = mdp.start, 0.0
        while True:
            a = int(r.integers(3))
            total += mdp.reward[s, a]
            if mdp.done[s, a]:
                break
            s = int(mdp.next_state[s, a])
        totals.append(total)
    se = np.std(totals) / np.sqrt(len(totals))
    assert abs(np.mean(totals) - exact) < 4 * se


def test_render_matches_committed_golden_frame():
    path = os.path.join(os.path.dirname(__file__), "data", "golden_frame.ppm")
    frame = NeonLaneEnv(EnvConfig()).render(EnvState(lane=1, step=2))
    assert frame.tobytes() == pnm.read_ppm(path).tobytes()
