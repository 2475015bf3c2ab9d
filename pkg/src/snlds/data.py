"""Synthetic datasets with ground-truth regimes.

Each trajectory draws from its own random stream seeded by ``(seed, index)``,
so datasets are reproducible and trajectories can be generated in any order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from snlds.errors import ConfigurationError, UsageError

GENERATOR_VERSION = 1

BALL_UP, BALL_DOWN = 0, 1
STRAIGHT, LEFT, RIGHT = 0, 1, 2


@dataclass
class Trajectory:
    x: np.ndarray
    s_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ConfigurationError(f"observations must be (T, D), got {self.x.shape}")
        if self.s_true is not None:
            self.s_true = np.asarray(self.s_true, dtype=np.int64)
            if self.s_true.shape != (self.x.shape[0],):
                raise ConfigurationError("labels must have one entry per step")


def substream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# -- bouncing ball -------------------------------------------------------------

def bouncing_ball_path(start: float, velocity: float, T: int, wall: float = 10.0):
    """Noiseless positions and direction labels of a ball between walls at 0 and ``wall``.

    The label at step t > 0 is the sign of the finite difference x_t - x_{t-1},
    i.e. the direction of the motion that produced position t, which is the
    motion a regime at step t governs.  Step 0 takes the initial direction and
    a zero difference keeps the previous label.  An overshoot past a wall is
    mirrored back inside within the same step.
    """
    pos = np.empty(T)
    labels = np.empty(T, dtype=np.int64)
    p, v = float(start), float(velocity)
    # a ball resting on a wall and heading out of the box bounces at once
    if (p >= wall and v > 0) or (p <= 0.0 and v < 0):
        v = -v
    label = BALL_UP if v >= 0 else BALL_DOWN
    for t in range(T):
        if t:
            p += v
            if p > wall:
                p, v = 2 * wall - p, -v
            elif p < 0.0:
                p, v = -p, -v
            if p != pos[t - 1]:
                label = BALL_UP if p > pos[t - 1] else BALL_DOWN
        pos[t] = p
        labels[t] = label
    return pos, labels


def gen_bouncing_ball(seed: int, T: int = 100, n: int = 1, noise_std: float = 0.1,
                      wall: float = 10.0, max_speed: float = 0.5) -> list[Trajectory]:
    if T < 2:
        raise UsageError("bouncing-ball trajectories need T >= 2")
    out = []
    for i in range(n):
        rng = substream(seed, i)
        start = rng.uniform(0.0, wall)
        velocity = rng.uniform(-max_speed, max_speed)
        pos, labels = bouncing_ball_path(start, velocity, T, wall)
        x = pos + noise_std * rng.standard_normal(T)
        meta = {"generator": "bouncing_ball", "seed": seed, "index": i, "start": start,
                "velocity": velocity, "noise_std": noise_std, "wall": wall}
        out.append(Trajectory(x[:, None], labels, meta))
    return out


# -- Dubins paths --------------------------------------------------------------

def dubins_path(regimes: Sequence[int], speed: float, turn_rate: float,
                theta0: float = 0.0, start=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Dubins motion with unit steps along a given regime sequence.

    Each step follows the exact solution of x' = V cos(theta), y' = V sin(theta),
    theta' = u over one time unit, with u = 0, +turn_rate or -turn_rate.
    Returns positions (T, 2) and headings (T,).
    """
    T = len(regimes)
    pos = np.empty((T, 2))
    heading = np.empty(T)
    x, y = map(float, start)
    theta = float(theta0)
    for t, regime in enumerate(regimes):
        pos[t] = x, y
        heading[t] = theta
        u = {STRAIGHT: 0.0, LEFT: turn_rate, RIGHT: -turn_rate}[int(regime)]
        if u == 0.0:
            x += speed * np.cos(theta)
            y += speed * np.sin(theta)
        else:
            x += speed / u * (np.sin(theta + u) - np.sin(theta))
            y -= speed / u * (np.cos(theta + u) - np.cos(theta))
        theta += u
    return pos, heading


def dubins_regimes(rng: np.random.Generator, T: int, mean_duration: float = 25.0) -> np.ndarray:
    """Regime labels with Poisson durations; a new segment never repeats the previous regime."""
    labels = np.empty(T, dtype=np.int64)
    t = 0
    current = int(rng.integers(3))
    while t < T:
        duration = max(1, int(rng.poisson(mean_duration)))
        labels[t:t + duration] = current
        t += duration
        current = int((current + 1 + rng.integers(2)) % 3)
    return labels


def gen_dubins(seed: int, T: int = 100, n: int = 1, noise_std: float = 0.05,
               speed_range=(0.1, 0.5), turn_freq_range=(0.1, 0.15),
               mean_duration: float = 25.0) -> list[Trajectory]:
    if T < 2:
        raise UsageError("Dubins trajectories need T >= 2")
    out = []
    for i in range(n):
        rng = substream(seed, i)
        speed = rng.uniform(*speed_range)
        turn_rate = 2 * np.pi * rng.uniform(*turn_freq_range)
        theta0 = rng.uniform(0.0, 2 * np.pi)
        labels = dubins_regimes(rng, T, mean_duration)
        pos, _ = dubins_path(labels, speed, turn_rate, theta0)
        x = pos + noise_std * rng.standard_normal(pos.shape)
        meta = {"generator": "dubins", "seed": seed, "index": i, "speed": speed,
                "turn_rate": turn_rate, "theta0": theta0, "noise_std": noise_std}
        out.append(Trajectory(x, labels, meta))
    return out


GENERATORS = {"bouncing_ball": gen_bouncing_ball, "dubins": gen_dubins}


def generate(name: str, seed: int, T: int, n: int, **params) -> list[Trajectory]:
    if name not in GENERATORS:
        raise ConfigurationError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[name](seed, T=T, n=n, **params)


def stack(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray | None]:
    """(N, T, D) observations and (N, T) labels, if every trajectory has labels."""
    if not trajectories:
        raise UsageError("cannot stack an empty dataset")
    x = np.stack([t.x for t in trajectories])
    if all(t.s_true is not None for t in trajectories):
        return x, np.stack([t.s_true for t in trajectories])
    return x, None


@dataclass(frozen=True)
class Standardizer:
    """Affine map x -> (x - shift) / scale fitted on training observations.

    The shift is per dimension and the scale is one number pooled over all
    dimensions, so planar trajectories keep their shape.
    """

    shift: np.ndarray
    scale: float

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        if flat.shape[0] == 0:
            raise UsageError("cannot fit a standardizer on no observations")
        shift = flat.mean(axis=0)
        scale = float(np.sqrt(np.mean((flat - shift) ** 2)))
        return cls(shift, scale if scale > 0 else 1.0)

    @classmethod
    def identity(cls, D: int) -> "Standardizer":
        return cls(np.zeros(D), 1.0)

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"shift": [float(v) for v in self.shift], "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["shift"], dtype=np.float64), float(d["scale"]))


# -- dataset files -------------------------------------------------------------
#
#   magic   8 bytes  b"SNLDSDAT"
#   version u32
#   count   u32
#   record * count:
#       length      u64   bytes in the rest of this record
#       T, D        u32, u32
#       has_labels  u8
#       x           f64 * T * D, row-major
#       labels      u8 * T (only when has_labels)
#
# All fields little-endian.

DATA_MAGIC = b"SNLDSDAT"
DATA_VERSION = 1


def encode_dataset(trajectories: Sequence[Trajectory]) -> bytes:
    parts = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(trajectories))]
    for traj in trajectories:
        T, D = traj.x.shape
        body = [struct.pack("<IIB", T, D, traj.s_true is not None),
                np.ascontiguousarray(traj.x, dtype="<f8").tobytes()]
        if traj.s_true is not None:
            if traj.s_true.min(initial=0) < 0 or traj.s_true.max(initial=0) > 255:
                raise ConfigurationError("labels must fit in an unsigned byte")
            body.append(traj.s_true.astype(np.uint8).tobytes())
        body = b"".join(body)
        parts.append(struct.pack("<Q", len(body)))
        parts.append(body)
    return b"".join(parts)


def decode_dataset(blob: bytes) -> list[Trajectory]:
    if blob[:8] != DATA_MAGIC:
        raise ConfigurationError("not a dataset file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != DATA_VERSION:
        raise ConfigurationError(f"unsupported dataset version {version}")
    pos = 16
    out = []
    for _ in range(count):
        (length,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        end = pos + length
        T, D, has_labels = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        x = np.frombuffer(blob, dtype="<f8", count=T * D, offset=pos).reshape(T, D)
        pos += 8 * T * D
        labels = None
        if has_labels:
            labels = np.frombuffer(blob, dtype=np.uint8, count=T, offset=pos).astype(np.int64)
            pos += T
        if pos != end:
            raise ConfigurationError("dataset record length does not match its contents")
        out.append(Trajectory(x.astype(np.float64), labels))
    if pos != len(blob):
        raise ConfigurationError("trailing bytes after last dataset record")
    return out


def save_dataset(path, trajectories: Sequence[Trajectory]) -> None:
    Path(path).write_bytes(encode_dataset(trajectories))


def load_dataset(path) -> list[Trajectory]:
    return decode_dataset(Path(path).read_bytes())


def export_csv(path, trajectories: Sequence[Trajectory]) -> None:
    """One row per (trajectory, step): index, t, x_0..x_{D-1}, label."""
    D = trajectories[0].x.shape[1] if trajectories else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "t", *[f"x{d}" for d in range(D)], "label"])
        for i, traj in enumerate(trajectories):
            for t, row in enumerate(traj.x):
                label = "" if traj.s_true is None else int(traj.s_true[t])
                writer.writerow([i, t, *[repr(float(v)) for v in row], label])
