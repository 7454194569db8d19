"""Binary PGM (P5) and PPM (P6) reading and writing.

PPM stores R, G, B; frames in this package are B, G, R, so the channel
axis is flipped on the way in and out.
"""

from __future__ import annotations

import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _encode(magic, image, maxval):
    h, w = image.shape[:2]
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def _decode(blob, expected):
    m = _HEADER.match(blob)
    if m is None or m.group(1) != expected:
        raise ValueError(f"not a {expected.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 256:
        raise ValueError(f"only 8-bit maxval supported, got {maxval}")
    channels = 3 if expected == b"P6" else 1
    body = blob[m.end():]
    need = w * h * channels
    if len(body) < need:
        raise ValueError(f"truncated image body: need {need} bytes, have {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8, count=need)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy(), maxval


def pgm_bytes(image, maxval=None):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    if maxval is None:
        maxval = 1 if image.max(initial=0) <= 1 else 255
    return _encode("P5", image, maxval)


def write_pgm(path, image, maxval=None):
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(image, maxval))


def read_pgm(path):
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P5")[0]


def ppm_bytes(frame):
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) frame, got shape {frame.shape}")
    return _encode("P6", frame[..., ::-1], 255)


def write_ppm(path, frame):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(frame))


def read_ppm(path):
    with open(path, "rb") as fh:
        rgb, _ = _decode(fh.read(), b"P6")
    return np.ascontiguousarray(rgb[..., ::-1])
