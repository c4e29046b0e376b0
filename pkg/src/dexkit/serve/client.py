"""DexClient: talks to the gateway and drives closed-loop rollouts."""

from __future__ import annotations

import base64
import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from dexkit import canonical
from dexkit.errors import DexkitError, ExternalError
from dexkit.serve.env import ToyEnv

PGM_MEDIA_TYPE = "image/x-portable-graymap"


class ServerUnreachable(ExternalError):
    code = "ServerUnreachable"


class GatewayError(ExternalError):
    def __init__(self, status: int, body: Mapping[str, Any]) -> None:
        err = body.get("error", {}) if isinstance(body, Mapping) else {}
        self.status = status
        self.code = err.get("code", "HTTP_ERROR")
        self.body = body
        super().__init__(f"gateway returned {status} {self.code}: {err.get('message', '')}")


class NonFiniteAction(DexkitError):
    code = "NonFiniteAction"


class DexClient:
    def __init__(self, url: str, timeout: float = 10.0) -> None:
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, body: Any = None) -> dict[str, Any]:
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(self.url + path, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read())
            except ValueError:
                payload = {}
            raise GatewayError(exc.code, payload) from None
        except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
            raise ServerUnreachable(f"cannot reach {self.url}: {exc}") from exc

    def health(self) -> dict[str, Any]:
        return self._call("GET", "/v1/health")

    def act(
        self,
        prompt: str,
        state: Sequence[float] = (),
        images: Mapping[str, tuple[str, bytes]] | None = None,
        chunk_size: int = 8,
        request_id: str | None = None,
    ) -> dict[str, Any]:
        """``images`` maps view name to ``(media_type, raw_bytes)``."""
        body: dict[str, Any] = {
            "prompt": prompt,
            "state": list(state),
            "chunk_size": chunk_size,
            "images": {
                view: {"media_type": mt, "data": base64.b64encode(raw).decode("ascii")}
                for view, (mt, raw) in (images or {}).items()
            },
        }
        if request_id is not None:
            body["request_id"] = request_id
        return self._call("POST", "/v1/act", body)


@dataclass
class RolloutResult:
    success: bool
    steps_taken: int
    trajectory: list[dict[str, Any]] = field(default_factory=list)
    final_position: tuple[float, float] = (0.0, 0.0)

    def to_json(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "steps_taken": self.steps_taken,
            "final_position": list(self.final_position),
            "trajectory": self.trajectory,
        }


def run_rollout(
    server_url: str | DexClient,
    env: ToyEnv,
    max_steps: int,
    chunk_size: int = 8,
    *,
    prompt: str | None = None,
    record: str | Path | None = None,
) -> RolloutResult:
    """Observe, request a chunk, execute it in order; stop on success or after ``max_steps``.

    Success is checked after every environment step, so a chunk may be cut
    short. Each trajectory entry holds the state before the action.
    """
    client = server_url if isinstance(server_url, DexClient) else DexClient(server_url)
    prompt = prompt if prompt is not None else f"reach {env.goal[0]!r} {env.goal[1]!r}"
    env.reset()
    trajectory: list[dict[str, Any]] = []
    steps = 0
    while not env.success and steps < max_steps:
        resp = client.act(
            prompt,
            state=list(env.position),
            images={"images_1": (PGM_MEDIA_TYPE, env.render())},
            chunk_size=chunk_size,
        )
        actions = resp.get("actions")
        if not isinstance(actions, list) or not actions:
            raise ExternalError(f"gateway response has no actions: {resp!r}")
        for row in actions:
            if len(row) < 2:
                raise ExternalError(f"action has {len(row)} dims; the toy env needs at least 2")
            if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in row):
                raise NonFiniteAction(f"non-finite action {row!r} at step {steps}")
            trajectory.append({"t": steps, "state": list(env.position), "action": list(row)})
            env.step(row)
            steps += 1
            if env.success or steps >= max_steps:
                break

    if record is not None:
        Path(record).write_text("".join(canonical.dumps(s) + "\n" for s in trajectory), encoding="utf-8")
    return RolloutResult(env.success, steps, trajectory, env.position)
