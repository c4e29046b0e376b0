"""Built-in policy backends.

A backend exposes ``name``, ``dof`` and ``act(prompt, state, images_meta,
chunk_size)`` returning a ``chunk_size x dof`` list of rows. Backends must
be stateless (or lock internally): the gateway calls them from many
threads at once.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from dexkit.codec import ActionSpace, dequantize_chunk
from dexkit.errors import DexkitError

_REACH = re.compile(r"^\s*reach\s+(\S+)\s+(\S+)\s*$", re.IGNORECASE)


class BackendError(DexkitError):
    """The backend could not produce actions for an otherwise valid request."""

    code = "BACKEND_FAULT"


class PolicyBackend(Protocol):
    name: str
    dof: int

    def act(
        self, prompt: str, state: Sequence[float], images_meta: Mapping[str, Mapping[str, Any]], chunk_size: int
    ) -> list[list[float]]: ...


class ZeroBackend:
    name = "zero"

    def __init__(self, dof: int = 7) -> None:
        if dof < 1:
            raise ValueError("dof must be positive")
        self.dof = dof

    def act(self, prompt, state, images_meta, chunk_size):
        return [[0.0] * self.dof for _ in range(chunk_size)]


class PControlBackend:
    """Proportional controller toward the point named in a ``reach X Y`` prompt.

    Every row of the chunk repeats ``k * (goal - state[:2])``; the action is
    held for the whole chunk rather than extrapolated.
    """

    name = "pcontrol"

    def __init__(self, k: float = 1.0, dof: int = 2) -> None:
        if dof < 2:
            raise ValueError("pcontrol needs dof >= 2")
        self.k = float(k)
        self.dof = dof

    @staticmethod
    def parse_goal(prompt: str) -> tuple[float, float]:
        m = _REACH.match(prompt)
        if m is None:
            raise BackendError(f"pcontrol expects a 'reach X Y' prompt, got {prompt!r}")
        try:
            return float(m.group(1)), float(m.group(2))
        except ValueError:
            raise BackendError(f"pcontrol could not read coordinates in {prompt!r}") from None

    def act(self, prompt, state, images_meta, chunk_size):
        gx, gy = self.parse_goal(prompt)
        if len(state) < 2:
            raise BackendError("pcontrol needs a state with at least 2 values (x, y)")
        row = [self.k * (gx - state[0]), self.k * (gy - state[1])] + [0.0] * (self.dof - 2)
        return [list(row) for _ in range(chunk_size)]


class ReplayBackend:
    """Serves a recorded token chunk, decoded through its action space.

    The file holds ``{"action_space": {...}, "tokens": [[...], ...]}``.
    Requests get the first ``chunk_size`` rows, padded with the last row.
    """

    name = "replay"

    def __init__(self, path: str | Path | None = None, *, space: ActionSpace | None = None,
                 tokens: Sequence[Sequence[int]] | None = None, dof: int | None = None) -> None:
        if path is not None:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            space = ActionSpace.from_json(doc["action_space"])
            tokens = doc["tokens"]
        if space is None or not tokens:
            raise ValueError("replay backend needs a recorded file or a space plus tokens")
        self.rows = dequantize_chunk(tokens, space)
        self.dof = space.dims
        if dof is not None and dof != self.dof:
            raise ValueError(f"replay file has {self.dof} dims, --dof asked for {dof}")

    def act(self, prompt, state, images_meta, chunk_size):
        rows = self.rows[:chunk_size]
        rows += [self.rows[-1]] * (chunk_size - len(rows))
        return [list(r) for r in rows]


BUILTINS = {"zero": ZeroBackend, "pcontrol": PControlBackend, "replay": ReplayBackend}


def register_builtins(registry) -> None:
    for name, cls in BUILTINS.items():
        registry.register("policy_backend", name, cls)


def create_backend(registry, name: str, **kwargs: Any) -> PolicyBackend:
    ctor = registry.lookup("policy_backend", name)
    return ctor(**{k: v for k, v in kwargs.items() if v is not None})
