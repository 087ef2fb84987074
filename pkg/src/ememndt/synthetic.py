"""Deterministic synthetic driving scenarios over an 8-class kinematic taxonomy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import AgentState, BehaviorTaxonomy, Dataset, Frame, Instance

SYNTHETIC_TAXONOMY = BehaviorTaxonomy((
    ("stopping", "speed control: braking to a full stop"),
    ("lane-keeping", "speed control: holding a constant speed in lane"),
    ("accelerating-straight", "speed control: accelerating straight ahead"),
    ("decelerating-straight", "speed control: decelerating straight ahead"),
    ("turn-left", "steering control: turning left at a junction"),
    ("turn-right", "steering control: turning right at a junction"),
    ("lane-change-left", "steering control: changing into the left lane"),
    ("lane-change-right", "steering control: changing into the right lane"),
))

NEIGHBOR_CLASSES = ("car", "car", "van", "truck", "bus", "motorcycle", "cyclist", "pedestrian")
LANE_WIDTH_M = 3.5


@dataclass(frozen=True)
class SyntheticConfig:
    T: int = 15
    ttb_frames: int = 10
    frame_rate_hz: float = 10.0
    n_per_class: int = 100
    class_counts: dict[str, int] = field(default_factory=dict)
    sigma_pos: float = 0.05
    neighbor_range: tuple[int, int] = (1, 4)

    def __post_init__(self):
        if self.T < 1 or self.ttb_frames < 1:
            raise ValueError("T and ttb_frames must be >= 1")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        if self.n_per_class < 1 and not self.class_counts:
            raise ValueError("n_per_class must be positive")
        for label, n in self.class_counts.items():
            if label not in SYNTHETIC_TAXONOMY.names:
                raise ValueError(f"unknown synthetic class {label!r}")
            if n < 1:
                raise ValueError(f"class {label!r}: count must be positive, got {n}")
        if self.sigma_pos < 0:
            raise ValueError("sigma_pos must be >= 0")
        lo, hi = self.neighbor_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid neighbor_range {self.neighbor_range}")

    def counts(self) -> dict[str, int]:
        if self.class_counts:
            return {lab: self.class_counts[lab] for lab in SYNTHETIC_TAXONOMY.names
                    if lab in self.class_counts}
        return {lab: self.n_per_class for lab in SYNTHETIC_TAXONOMY.names}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "neighbor_range" in d:
            d["neighbor_range"] = tuple(d["neighbor_range"])
        return cls(**d)


def _wrap(angle: np.ndarray) -> np.ndarray:
    out = (angle + math.pi) % (2 * math.pi) - math.pi
    return np.where(out >= math.pi, out - 2 * math.pi, out)


def _integrate(speed: np.ndarray, yaw: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    # positions at frame k accumulate the displacement of frames 0..k-1
    dx = np.concatenate([[0.0], np.cumsum(speed[:-1] * np.cos(yaw[:-1]) * dt)])
    dy = np.concatenate([[0.0], np.cumsum(speed[:-1] * np.sin(yaw[:-1]) * dt)])
    return dx, dy


def target_track(label: str, n_frames: int, dt: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free (x, y, yaw) of the target over ``n_frames`` frames starting at the origin."""
    t = np.arange(n_frames) * dt
    horizon = n_frames * dt
    yaw = np.zeros(n_frames)
    if label == "stopping":
        v0 = rng.uniform(4.0, 7.0)
        decel = v0 / (horizon * rng.uniform(0.6, 0.9))
        speed = np.maximum(v0 - decel * t, 0.0)
    elif label == "lane-keeping":
        speed = np.full(n_frames, rng.uniform(8.0, 11.0))
    elif label == "accelerating-straight":
        speed = rng.uniform(2.0, 5.0) + rng.uniform(3.0, 4.5) * t
    elif label == "decelerating-straight":
        speed = rng.uniform(12.0, 15.0) - rng.uniform(1.5, 2.5) * t
    elif label in ("turn-left", "turn-right"):
        speed = np.full(n_frames, rng.uniform(4.0, 8.0))
        rate = rng.uniform(0.35, 0.6) * (1.0 if label == "turn-left" else -1.0)
        yaw = rate * t
    elif label in ("lane-change-left", "lane-change-right"):
        v0 = rng.uniform(9.0, 14.0)
        duration = rng.uniform(2.0, 3.0)
        side = 1.0 if label == "lane-change-left" else -1.0
        phase = np.clip(t / duration, 0.0, 1.0)
        lateral_rate = side * LANE_WIDTH_M * math.pi / (2 * duration) * np.sin(math.pi * phase)
        yaw = np.arctan2(lateral_rate, v0)
        speed = np.full(n_frames, v0) / np.cos(yaw)
    else:
        raise ValueError(f"unknown synthetic class {label!r}")
    x, y = _integrate(speed, yaw, dt)
    return x, y, yaw


def _make_instance(idx: int, label: str, cfg: SyntheticConfig, seed: int,
                   rng: np.random.Generator) -> Instance:
    dt = 1.0 / cfg.frame_rate_hz
    total = cfg.T + cfg.ttb_frames
    x, y, yaw = target_track(label, total, dt, rng)

    n_nb = int(rng.integers(cfg.neighbor_range[0], cfg.neighbor_range[1] + 1))
    neighbors = []
    for k in range(n_nb):
        cls = NEIGHBOR_CLASSES[int(rng.integers(len(NEIGHBOR_CLASSES)))]
        heading = rng.choice([0.0, math.pi / 2, -math.pi / 2, math.pi - 1e-3]) + rng.normal(0, 0.05)
        speed = rng.uniform(0.5, 2.0) if cls == "pedestrian" else rng.uniform(0.0, 12.0)
        x0, y0 = rng.uniform(-30, 30), rng.uniform(-12, 12)
        # some agents enter or leave the scene during the observation
        first, last = 0, cfg.T - 1
        if rng.random() < 0.3:
            first = int(rng.integers(0, cfg.T))
        if rng.random() < 0.3:
            last = int(rng.integers(first, cfg.T))
        neighbors.append((k + 1, cls, x0, y0, heading, speed, first, last))

    frames = []
    for f in range(cfg.T):
        noise = rng.normal(0.0, cfg.sigma_pos, size=3) if cfg.sigma_pos > 0 else np.zeros(3)
        agents = [AgentState(0, "car", float(x[f] + noise[0]), float(y[f] + noise[1]),
                             float(noise[2]), float(_wrap(yaw[f])))]
        for uid, cls, x0, y0, heading, speed, first, last in neighbors:
            if not first <= f <= last:
                continue
            noise = rng.normal(0.0, cfg.sigma_pos, size=3) if cfg.sigma_pos > 0 else np.zeros(3)
            agents.append(AgentState(
                uid, cls,
                float(x0 + speed * f * dt * math.cos(heading) + noise[0]),
                float(y0 + speed * f * dt * math.sin(heading) + noise[1]),
                float(noise[2]),
                float(_wrap(heading)),
            ))
        frames.append(Frame(f, tuple(agents), 0))
    return Instance(f"syn-{seed}-{idx:05d}", tuple(frames), label, cfg.ttb_frames, cfg.frame_rate_hz)


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """Generate a shuffled dataset; a pure function of ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    labels = [lab for lab, n in config.counts().items() for _ in range(n)]
    order = rng.permutation(len(labels))
    instances = tuple(_make_instance(i, labels[j], config, seed, rng) for i, j in enumerate(order))
    return Dataset(instances, SYNTHETIC_TAXONOMY)
