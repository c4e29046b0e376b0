"""Action discretization and the 16-slot hybrid-arm layout.

Each action dimension is quantized independently into 256 equal-width bins
between per-dimension bounds; tokens decode to bin centers. Hybrid tokens
put the left arm in slots 0-7 and the right arm in slots 8-15; a 7-DoF
arm leaves the last slot of its half as zero padding.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dexkit import canonical
from dexkit.errors import DexkitError

BINS = 256
HYBRID_SLOTS = 16
HALF = HYBRID_SLOTS // 2
DEFAULT_QUANTILE = 0.01


class CodecError(DexkitError):
    code = "CodecError"


class EmptyStream(CodecError):
    code = "EmptyStream"


class RaggedDimensions(CodecError):
    code = "RaggedDimensions"


class DimensionMismatch(CodecError):
    code = "DimensionMismatch"


class TokenOutOfRange(CodecError):
    code = "TokenOutOfRange"


class ArmMismatch(CodecError):
    code = "ArmMismatch"


class BadDof(CodecError):
    code = "BadDof"


class MaskMismatch(CodecError):
    code = "MaskMismatch"


@dataclass(frozen=True)
class BoundsPolicy:
    """``MinMax`` when ``quantile`` is None, else symmetric quantile clipping."""

    quantile: float | None = DEFAULT_QUANTILE

    def __post_init__(self) -> None:
        if self.quantile is not None and not 0 < self.quantile < 0.5:
            raise ValueError(f"quantile must lie in (0, 0.5), got {self.quantile}")

    @classmethod
    def minmax(cls) -> BoundsPolicy:
        return cls(None)

    @classmethod
    def parse(cls, text: str) -> BoundsPolicy:
        if text == "minmax":
            return cls.minmax()
        kind, _, q = text.partition(":")
        if kind != "quantile":
            raise ValueError(f"unknown bounds policy {text!r}")
        return cls(float(q) if q else DEFAULT_QUANTILE)

    def __str__(self) -> str:
        return "minmax" if self.quantile is None else f"quantile:{self.quantile!r}"


@dataclass(frozen=True)
class ActionSpace:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    policy: str = "minmax"
    bins: int = BINS

    def __post_init__(self) -> None:
        if self.bins != BINS:
            raise ValueError(f"bins is fixed at {BINS}, got {self.bins}")
        if len(self.lo) != len(self.hi):
            raise RaggedDimensions(f"lo has {len(self.lo)} dims, hi has {len(self.hi)}")
        for d, (a, b) in enumerate(zip(self.lo, self.hi)):
            if not (np.isfinite(a) and np.isfinite(b)) or a > b:
                raise ValueError(f"dimension {d}: invalid bounds [{a}, {b}]")

    @property
    def dims(self) -> int:
        return len(self.lo)

    def to_json(self) -> dict:
        return {"dims": self.dims, "lo": list(self.lo), "hi": list(self.hi), "bins": self.bins, "policy": self.policy}

    @classmethod
    def from_json(cls, obj: dict) -> ActionSpace:
        space = cls(
            lo=tuple(float(v) for v in obj["lo"]),
            hi=tuple(float(v) for v in obj["hi"]),
            policy=obj.get("policy", "minmax"),
            bins=obj.get("bins", BINS),
        )
        if obj.get("dims", space.dims) != space.dims:
            raise RaggedDimensions(f"dims={obj['dims']} but bounds have {space.dims}")
        return space

    def save(self, path: str | Path) -> None:
        Path(path).write_text(canonical.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ActionSpace:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_space(actions: Iterable[Sequence[float]], policy: BoundsPolicy | None = None) -> ActionSpace:
    """Fit per-dimension bounds to a stream of action vectors."""
    policy = policy if policy is not None else BoundsPolicy()
    rows = [list(a) for a in actions]
    if not rows:
        raise EmptyStream("cannot fit bounds to an empty action stream")
    n = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != n:
            raise RaggedDimensions(f"action {i} has {len(r)} dims, expected {n}")
    data = np.asarray(rows, dtype=np.float64)
    if policy.quantile is None:
        lo, hi = data.min(axis=0), data.max(axis=0)
    else:
        lo = np.quantile(data, policy.quantile, axis=0)
        hi = np.quantile(data, 1.0 - policy.quantile, axis=0)
    return ActionSpace(tuple(lo.tolist()), tuple(hi.tolist()), policy=str(policy))


def _as_vector(x: Sequence[float], space: ActionSpace) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (space.dims,):
        raise DimensionMismatch(f"expected {space.dims} dims, got shape {arr.shape}")
    return arr


def quantize_action(x: Sequence[float], space: ActionSpace) -> list[int]:
    arr = _as_vector(x, space)
    if not np.all(np.isfinite(arr)):
        raise DimensionMismatch("action contains non-finite values")
    lo = np.asarray(space.lo)
    hi = np.asarray(space.hi)
    width = hi - lo
    degenerate = width == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.floor((arr - lo) / np.where(degenerate, 1.0, width) * BINS)
    tokens = np.clip(scaled, 0, BINS - 1)
    tokens[degenerate] = 0
    return [int(t) for t in tokens]


def dequantize_tokens(tokens: Sequence[int], space: ActionSpace) -> list[float]:
    if len(tokens) != space.dims:
        raise DimensionMismatch(f"expected {space.dims} tokens, got {len(tokens)}")
    out = []
    for d, t in enumerate(tokens):
        if isinstance(t, bool) or int(t) != t or not 0 <= t < BINS:
            raise TokenOutOfRange(f"token {t!r} at dim {d} outside [0, {BINS})")
        lo, hi = space.lo[d], space.hi[d]
        out.append(lo if lo == hi else _bin_center(lo, hi, int(t)))
    return out


def _bin_center(lo: float, hi: float, t: int) -> float:
    width = hi - lo
    center = lo + (t + 0.5) * width / BINS
    half = width / (2 * BINS)
    # Rounding can leave an outer center a few ulps more than half a bin
    # from the bound it must reach; step it back toward that bound.
    if t == 0:
        while center - lo > half:
            center = math.nextafter(center, -math.inf)
    elif t == BINS - 1:
        while hi - center > half:
            center = math.nextafter(center, math.inf)
    return center


def quantize_chunk(steps: Sequence[Sequence[float]], space: ActionSpace) -> list[list[int]]:
    return [quantize_action(row, space) for row in steps]


def dequantize_chunk(tokens: Sequence[Sequence[int]], space: ActionSpace) -> list[list[float]]:
    return [dequantize_tokens(row, space) for row in tokens]


class Arms(enum.Enum):
    LEFT_ONLY = "left"
    RIGHT_ONLY = "right"
    DUAL = "dual"


@dataclass(frozen=True)
class Embodiment:
    arms: Arms
    dof_per_arm: int = 7

    def __post_init__(self) -> None:
        if self.dof_per_arm not in (7, 8):
            raise BadDof(f"dof_per_arm must be 7 or 8, got {self.dof_per_arm}")

    @property
    def has_left(self) -> bool:
        return self.arms in (Arms.LEFT_ONLY, Arms.DUAL)

    @property
    def has_right(self) -> bool:
        return self.arms in (Arms.RIGHT_ONLY, Arms.DUAL)


@dataclass(frozen=True)
class HybridTokens:
    values: tuple[float, ...]
    mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.values) != HYBRID_SLOTS or len(self.mask) != HYBRID_SLOTS:
            raise ValueError(f"hybrid tokens need exactly {HYBRID_SLOTS} values and mask bits")
        if any(v != 0.0 for v, m in zip(self.values, self.mask) if not m):
            raise ValueError("unmasked slots must hold 0.0")


def loss_mask_for(emb: Embodiment) -> tuple[bool, ...]:
    """Which of the 16 slots are supervised for this embodiment."""
    arm = [True] * emb.dof_per_arm + [False] * (HALF - emb.dof_per_arm)
    off = [False] * HALF
    return tuple((arm if emb.has_left else off) + (arm if emb.has_right else off))


def pack_hybrid(left: Sequence[float] | None, right: Sequence[float] | None, emb: Embodiment) -> HybridTokens:
    if (left is not None) != emb.has_left or (right is not None) != emb.has_right:
        raise ArmMismatch(f"{emb.arms.value} embodiment got left={left is not None}, right={right is not None}")
    values = [0.0] * HYBRID_SLOTS
    mask = [False] * HYBRID_SLOTS
    for base, vec in ((0, left), (HALF, right)):
        if vec is None:
            continue
        if len(vec) != emb.dof_per_arm:
            raise BadDof(f"arm vector has {len(vec)} values, embodiment expects {emb.dof_per_arm}")
        for i, v in enumerate(vec):
            values[base + i] = float(v)
            mask[base + i] = True
    return HybridTokens(tuple(values), tuple(mask))


def unpack_hybrid(t: HybridTokens, emb: Embodiment) -> tuple[list[float] | None, list[float] | None]:
    if t.mask != loss_mask_for(emb):
        raise MaskMismatch(f"mask does not match a {emb.arms.value} arm with {emb.dof_per_arm} DoF")
    dof = emb.dof_per_arm
    left = list(t.values[:dof]) if emb.has_left else None
    right = list(t.values[HALF:HALF + dof]) if emb.has_right else None
    return left, right
