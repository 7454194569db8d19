"""Command line front end, ``python -m neondqn <command>``.

Settings come from a ``key = value`` text file (``--config``); the
``--seed``, ``--episodes``, ``--noise`` and ``--out`` flags override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .env import random_policy_return
from .harness import (
    EVAL_NOISE_LEVELS,
    desk_profile,
    load_config,
    moving_average,
    full_profile,
    run_baseline,
    run_eval,
    run_training,
)
from .pnm import read_pgm, read_ppm, write_pgm
from .vision import crop, preprocess, to_grayscale, triangle_threshold


def _with_flags(config, args):
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        kw["episodes"] = args.episodes
    if args.command == "train" and args.noise is not None:
        kw["noise"] = args.noise
    if getattr(args, "out", None) is not None:
        kw["out_dir"] = args.out
    return dataclasses.replace(config, **kw).validate()


def _config(args):
    if args.config:
        config = load_config(args.config, base=None if args.profile is None else _profile(args.profile))
    else:
        config = _profile(args.profile or "desk")
    return _with_flags(config, args)


def _profile(name):
    return {"desk": desk_profile, "full": full_profile}[name]()


def cmd_train(args):
    config = _config(args)

    def progress(m):
        if (m.episode + 1) % 25 == 0:
            print(f"episode {m.episode + 1}: reward {m.total_reward:g} epsilon {m.epsilon:.3f}", flush=True)

    metrics = run_training(config, progress=None if args.quiet else progress)
    rewards = [m.total_reward for m in metrics]
    if rewards:
        print(f"final MA25 {moving_average(rewards)[-1]:.3f} over {len(rewards)} episodes")
    print(f"outputs in {config.out_dir}")
    return 0


def cmd_eval(args):
    config = _config(args)
    levels = EVAL_NOISE_LEVELS if args.noise is None else tuple(args.noise)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "eval_noise.csv")
    results = run_eval(
        args.checkpoint,
        config.env,
        noise_levels=levels,
        episodes=args.episodes if args.episodes is not None else 100,
        seed=config.seed,
        out_path=out_path,
        dump_dir=args.dump_frames,
    )
    for p, rewards in results.items():
        print(f"noise {p:g}: mean reward {np.mean(rewards):.3f}")
    print(f"wrote {out_path}")
    return 0


def _read_image(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return read_ppm(path)
    if magic == b"P5":
        gray = read_pgm(path)
        return np.repeat(gray[..., None], 3, axis=2)
    raise ValueError(f"{path}: only binary PPM (P6) and PGM (P5) input is supported")


def cmd_preprocess(args):
    frame = _read_image(args.input)
    if args.stage == "observation":
        image = preprocess(frame)
    elif args.stage == "gray":
        image = to_grayscale(frame)
    elif args.stage == "crop":
        image = crop(to_grayscale(frame))
    else:
        _, image = triangle_threshold(crop(to_grayscale(frame)))
    write_pgm(args.output, image)
    print(f"wrote {args.output} ({image.shape[1]}x{image.shape[0]})")
    return 0


def cmd_baseline(args):
    config = _config(args)
    episodes = args.episodes if args.episodes is not None else 100
    rewards = run_baseline(config.env, episodes=episodes, seed=config.seed, dump_dir=args.dump_frames)
    exact = random_policy_return(config.env)
    print(f"random driver: mean reward {np.mean(rewards):.3f} over {episodes} episodes")
    print(f"exact expectation: {exact:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="neondqn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, noise_help):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--profile", choices=("desk", "full"), help="base profile (default desk)")
        p.add_argument("--seed", type=int)
        p.add_argument("--episodes", type=int)
        if noise_help:
            p.add_argument("--noise", **noise_help)

    p = sub.add_parser("train", help="train an agent")
    common(p, {"type": float, "help": "salt & pepper fraction during training"})
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy rollouts of a checkpoint under noise")
    p.add_argument("checkpoint")
    common(p, {"type": float, "nargs": "+", "help": "noise levels (default 0 0.004 0.01 0.1 0.25)"})
    p.add_argument("--out", help="directory for eval_noise.csv (default: next to the checkpoint)")
    p.add_argument("--dump-frames", metavar="DIR", help="save the first episode's frames as PPM")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preprocess", help="run the observation filter on one PPM/PGM image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--stage", choices=("gray", "crop", "binary", "observation"), default="observation")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("baseline", help="uniformly random driver")
    common(p, None)
    p.add_argument("--dump-frames", metavar="DIR", help="save the first episode's frames as PPM")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"neondqn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
