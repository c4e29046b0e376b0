"""Entry dispatch for resolved experiments: ``train`` or ``infer``.

``train`` runs the trainer stub named in ``trainer.name`` over the dataset
reader named in ``data.reader``; the built-in ``stats`` trainer walks the
data once and reports frame/action statistics. ``infer`` starts the gateway
with the backend named in ``inference.backend``.
"""

from __future__ import annotations

import logging
import signal
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from dexkit.codec import ActionSpace, quantize_chunk
from dexkit.dexdata import DatasetLayout, EpisodeFrame, EpisodeMeta, iter_frames, scan_dataset
from dexkit.errors import EXIT_OK, UsageError
from dexkit.expconfig import ResolvedConfig
from dexkit.registry import FactoryRegistry, default_registry

log = logging.getLogger(__name__)

TASKS = ("train", "infer")


class UnknownTask(UsageError):
    code = "UnknownTask"


class MissingSetting(UsageError):
    code = "MissingSetting"


@dataclass
class TaskResult:
    status: int
    report: dict[str, Any] | None = None
    server: Any = None


class DexdataReader:
    """Yields ``(meta, frames)`` for each episode of a Dexdata dataset."""

    def __init__(self, dataset: str | Path) -> None:
        self.layout = DatasetLayout(Path(dataset))

    def episodes(self) -> Iterator[tuple[EpisodeMeta, list[EpisodeFrame]]]:
        for meta in scan_dataset(self.layout):
            frames = [f for _, f in iter_frames(self.layout.resolve(meta.jsonl_path))]
            yield meta, frames

    def action_space(self) -> ActionSpace | None:
        path = self.layout.action_space_path
        return ActionSpace.load(path) if path.exists() else None


class StatsTrainer:
    """One pass over the data; no model, just counts and action statistics."""

    def __init__(self, reader: DexdataReader, **options: Any) -> None:
        self.reader = reader
        self.options = options

    def run(self) -> dict[str, Any]:
        episodes = 0
        frames = 0
        state_dims: set[int] = set()
        actions: list[list[float]] = []
        for meta, ep_frames in self.reader.episodes():
            episodes += 1
            frames += len(ep_frames)
            state_dims.add(meta.state_dim)
            actions.extend(f.action for f in ep_frames if f.action is not None)
        report: dict[str, Any] = {
            "num_episodes": episodes,
            "num_frames": frames,
            "state_dims": sorted(state_dims),
            "num_actions": len(actions),
        }
        if actions:
            arr = np.asarray(actions, dtype=np.float64)
            report["action_min"] = arr.min(axis=0).tolist()
            report["action_max"] = arr.max(axis=0).tolist()
            report["action_mean"] = arr.mean(axis=0).tolist()
            space = self.reader.action_space()
            if space is not None and space.dims == arr.shape[1]:
                tokens = np.asarray(quantize_chunk(actions, space))
                report["distinct_tokens_per_dim"] = [int(len(np.unique(tokens[:, d]))) for d in range(space.dims)]
        return report


def register_builtins(registry: FactoryRegistry) -> None:
    registry.register("dataset_reader", "dexdata", DexdataReader)
    registry.register("trainer_stub", "stats", StatsTrainer)


def _train(config: ResolvedConfig, registry: FactoryRegistry) -> TaskResult:
    dataset = config.get("data.dataset")
    if dataset is None:
        raise MissingSetting("train needs data.dataset (path to a Dexdata root)")
    reader_cls = registry.lookup("dataset_reader", config.get("data.reader", "dexdata"))
    trainer_cls = registry.lookup("trainer_stub", config.get("trainer.name", "stats"))
    options = {k: v for k, v in config.section("trainer").items() if k != "name"}
    report = trainer_cls(reader_cls(dataset), **options).run()
    log.info("train stub finished: %s", report)
    return TaskResult(EXIT_OK, report)


def _infer(config: ResolvedConfig, registry: FactoryRegistry, block: bool) -> TaskResult:
    from dexkit.serve.backends import create_backend
    from dexkit.serve.gateway import serve

    inference = config.section("inference")
    name = inference.get("backend")
    if name is None:
        raise MissingSetting("infer needs inference.backend")
    kwargs = dict(inference.get("backend_args", {}))
    if "dof" in inference:
        kwargs["dof"] = inference["dof"]
    backend = create_backend(registry, name, **kwargs)
    server = serve(backend, inference.get("host", "127.0.0.1"), int(inference.get("port", 8000)))
    log.info("serving %s on %s", name, server.url)
    if not block:
        return TaskResult(EXIT_OK, {"url": server.url, "backend": name}, server)
    wait_for_signal()
    server.shutdown()
    return TaskResult(EXIT_OK, {"url": server.url, "backend": name})


def wait_for_signal() -> None:
    """Block the main thread until SIGINT or SIGTERM."""
    stop = threading.Event()
    previous = {sig: signal.signal(sig, lambda *_: stop.set()) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        while not stop.wait(0.5):
            pass
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


def dispatch_task(
    config: ResolvedConfig, task: str, registry: FactoryRegistry | None = None, *, block: bool = True
) -> TaskResult:
    """Run ``task`` for ``config``. With ``block=False`` an ``infer`` returns the running server."""
    registry = registry if registry is not None else default_registry()
    if task == "train":
        return _train(config, registry)
    if task == "infer":
        return _infer(config, registry, block)
    raise UnknownTask(f"unknown task {task!r}; expected one of {list(TASKS)}")
