"""
From game frame to network input
================================

Renders one frame of the lane game, pushes it through every stage of the
observation filter and writes each stage as a PGM/PPM you can open in any
image viewer. Run from the repository root:

    python demos/filter_walkthrough.py [out_dir]
"""

import os
import sys

import numpy as np

from neondqn import pnm
from neondqn.env import EnvConfig, EnvState, NeonLaneEnv
from neondqn.vision import (
    bhattacharyya,
    crop,
    crop_bounds,
    diff_observation,
    gray_histogram,
    preprocess,
    resize_area,
    to_grayscale,
    triangle_threshold,
)

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out, exist_ok=True)

env = NeonLaneEnv(EnvConfig(seed=0))
frame = env.render(EnvState(lane=1, step=2))
pnm.write_ppm(os.path.join(out, "0_frame.ppm"), frame)
print("frame", frame.shape, "(B, G, R)")

# the filter keeps the road just ahead of the car
gray = to_grayscale(frame)
print("crop window rows/cols:", crop_bounds(*gray.shape))
road = crop(gray)
pnm.write_pgm(os.path.join(out, "1_gray.pgm"), gray)
pnm.write_pgm(os.path.join(out, "2_crop.pgm"), road)

t, binary = triangle_threshold(road)
print(f"triangle threshold {t}: {binary.mean():.1%} of the crop is lit")
pnm.write_pgm(os.path.join(out, "3_binary.pgm"), binary)

obs = resize_area(binary, binary=True)
assert np.array_equal(obs, preprocess(frame))
pnm.write_pgm(os.path.join(out, "4_observation.pgm"), obs)
print("observation", obs.shape, "values", np.unique(obs))

# the network sees what changed since the previous decision
prev = preprocess(env.render(EnvState(lane=1, step=1)))
d = diff_observation(obs, prev)
print(f"difference image: {np.sum(d == 1)} pixels on, {np.sum(d == -1)} off")
pnm.write_pgm(os.path.join(out, "5_difference.pgm"), (d + 1) * 127)

# collisions are spotted by comparing gray histograms with the crash screen
go = env.game_over_frame()
pnm.write_ppm(os.path.join(out, "6_game_over.ppm"), go)
print("histogram distance, play frame vs crash screen:",
      round(bhattacharyya(gray_histogram(frame), gray_histogram(go)), 3))
print("wrote", out)
