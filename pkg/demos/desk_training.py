"""
Training a driver from pixels on a laptop
=========================================

Runs the desk profile (600 episodes, a few tens of minutes on one core),
prints the learning curve as a moving average and then replays the final
agent under increasing salt & pepper noise.

    python demos/desk_training.py [episodes] [out_dir]

Pass a small episode count (say 50) for a quick look.
"""

import os
import sys

import numpy as np

from neondqn.env import random_policy_return
from neondqn.harness import desk_profile, moving_average, run_eval, run_training

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = sys.argv[2] if len(sys.argv) > 2 else "runs/desk_demo"
cfg = desk_profile(episodes=episodes, out_dir=out)
baseline = random_policy_return(cfg.env)
print(f"random driver scores {baseline:.3f} on average; a perfect one {cfg.env.max_steps - cfg.env.first_contact_step}")

rewards = []


def report(m):
    rewards.append(m.total_reward)
    if (m.episode + 1) % 25 == 0:
        ma = moving_average(rewards)[-1]
        bar = "#" * int(ma)
        print(f"{m.episode + 1:4d}  eps {m.epsilon:.2f}  MA25 {ma:6.2f}  {bar}", flush=True)


run_training(cfg, progress=report)
print(f"final MA25 is {moving_average(rewards)[-1] / baseline:.1f}x the random driver")

# greedy replays of the final agent with corrupted observations
levels = (0.0, 0.004, 0.01, 0.10, 0.25)
results = run_eval(
    os.path.join(out, "checkpoint_final.bin"), cfg.env, noise_levels=levels, episodes=20,
    out_path=os.path.join(out, "eval_noise.csv"),
)
for p in levels:
    print(f"noise {p:6.1%}: mean reward {np.mean(results[p]):6.2f}")
