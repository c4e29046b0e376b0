"""Deterministic 2-D point-mass environment used to exercise rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BOUND = 10.0
IMAGE_SIZE = 64


@dataclass
class ToyEnv:
    goal: tuple[float, float]
    start: tuple[float, float] = (0.0, 0.0)
    max_step: float = 0.1
    success_radius: float = 0.05
    position: tuple[float, float] = field(init=False)

    def __post_init__(self) -> None:
        self.reset()

    @classmethod
    def seeded(cls, goal: tuple[float, float], seed: int, **kwargs) -> ToyEnv:
        """Start drawn uniformly from [-1, 1]^2."""
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1.0, 1.0, size=2).tolist()
        return cls(goal=goal, start=(x, y), **kwargs)

    def reset(self) -> tuple[float, float]:
        self.position = (_clip(self.start[0]), _clip(self.start[1]))
        return self.position

    def distance(self) -> float:
        return math.hypot(self.position[0] - self.goal[0], self.position[1] - self.goal[1])

    @property
    def success(self) -> bool:
        return self.distance() <= self.success_radius

    def step(self, action) -> tuple[float, float]:
        """Move by the action's first two components, scaled down to ``max_step`` if longer."""
        dx, dy = float(action[0]), float(action[1])
        norm = math.hypot(dx, dy)
        if norm > self.max_step:
            scale = self.max_step / norm
            dx, dy = dx * scale, dy * scale
        self.position = (_clip(self.position[0] + dx), _clip(self.position[1] + dy))
        return self.position

    def render(self) -> bytes:
        """64x64 greyscale PGM: goal drawn at 128, the point at 255."""
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        for (x, y), value in ((self.goal, 128), (self.position, 255)):
            col, row = _pixel(x), _pixel(-y)
            img[max(row - 1, 0):row + 2, max(col - 1, 0):col + 2] = value
        return f"P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n".encode("ascii") + img.tobytes()


def _clip(v: float) -> float:
    return min(max(v, -BOUND), BOUND)


def _pixel(v: float) -> int:
    return int(round((v + BOUND) / (2 * BOUND) * (IMAGE_SIZE - 1)))
