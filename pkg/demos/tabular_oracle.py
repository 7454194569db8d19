"""
The lane game without pixels
============================

The simulator has an exact tabular twin: one state per (lane, decision
step). On it we can compute the best possible score, the expected score
of a random driver and check that plain Q-learning finds the optimal
policy. These numbers are the yardsticks for the pixel-based agent.
"""

import numpy as np

from neondqn.dqn import bellman_backup, optimal_actions, run_tabular_q_learning, value_iteration
from neondqn.env import EnvConfig, abstract_mdp, mdp_state_index, obstacle_pattern, random_policy_return

cfg = EnvConfig(seed=0)
print("first obstacle rows (1 = blocked):")
print(obstacle_pattern(cfg)[:6])

mdp = abstract_mdp(cfg)
print(f"{mdp.n_states} states, 3 actions")

v1, _ = value_iteration(mdp, gamma=1.0)
print("best undiscounted score:", v1[mdp.start])
print("random driver expects:  ", round(random_policy_return(cfg), 4))

gamma = 0.99
v, policy = value_iteration(mdp, gamma=gamma, tol=1e-12)
q_star = bellman_backup(mdp, v, gamma)
table = run_tabular_q_learning(mdp, steps=50_000, gamma=gamma, rng=np.random.default_rng(0))

ok = optimal_actions(q_star)[np.arange(mdp.n_states), table.q.argmax(axis=1)]
print(f"Q-learning greedy action is optimal in {ok.sum()}/{mdp.n_states} states")

# the optimal route, lane by lane
lane, route = cfg.lanes // 2, []
for step in range(cfg.max_steps):
    route.append(lane)
    lane = min(max(lane + int(policy[mdp_state_index(cfg, lane, step)]) - 1, 0), cfg.lanes - 1)
print("optimal lanes:", "".join(map(str, route)))
