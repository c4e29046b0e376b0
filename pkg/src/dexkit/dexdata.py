"""Dexdata on-disk format: jsonl episodes, a video directory and an index cache.

Layout under a dataset root::

    video/<episode>_images_<k>.mp4
    jsonl/<episode>.jsonl        one frame per line
    jsonl/index_cache.json       generated metadata for every episode

A frame line looks like::

    {"images_1": {"type": "video", "url": "video/ep_images_1.mp4", "frame_idx": 21},
     "state": [0.1, 0.2], "prompt": "open the door", "is_robot": true}

Unknown top-level keys survive parsing in ``EpisodeFrame.extras`` so that
files written by newer tools round-trip unchanged.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Iterator, Mapping

from dexkit import canonical
from dexkit.errors import DexkitError, ExternalError

VIDEO_DIR = "video"
JSONL_DIR = "jsonl"
INDEX_FILE = "index_cache.json"
ACTION_SPACE_FILE = "action_space.json"

_VIEW_RE = re.compile(r"^images_([1-9][0-9]*)$")
_CORE_KEYS = ("state", "prompt", "is_robot")
ACTION_KEY = "action"


class FrameError(DexkitError):
    """A single frame line is not a valid Dexdata frame."""

    code = "BadFrame"

    def __init__(self, message: str, *, field: str | None = None) -> None:
        super().__init__(message)
        self.field = field


class MalformedJson(FrameError):
    code = "MalformedJson"


class MissingField(FrameError):
    code = "MissingField"


class BadImageRef(FrameError):
    code = "BadImageRef"


class BadField(FrameError):
    code = "BadField"


class NonContiguousViews(FrameError):
    code = "NonContiguousViews"


class DatasetIoError(ExternalError):
    code = "Io"


class DatasetInvalid(DexkitError):
    """Raised by scans when one or more episodes fail validation."""

    code = "DatasetInvalid"

    def __init__(self, reports: list[ValidationReport]) -> None:
        self.reports = reports
        n = sum(len(r.errors) for r in reports)
        super().__init__(f"{len(reports)} invalid episode(s), {n} violation(s)")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class ImageRef:
    url: str
    frame_idx: int
    kind: str = "video"
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind != "video":
            raise BadImageRef(f"image type must be 'video', got {self.kind!r}")
        if not isinstance(self.frame_idx, int) or isinstance(self.frame_idx, bool) or self.frame_idx < 0:
            raise BadImageRef(f"frame_idx must be a non-negative integer, got {self.frame_idx!r}")
        if not isinstance(self.url, str) or not self.url:
            raise BadImageRef("url must be a non-empty string")

    def to_json(self) -> dict[str, Any]:
        out = dict(self.extras)
        out.update({"type": self.kind, "url": self.url, "frame_idx": self.frame_idx})
        return out

    @classmethod
    def from_json(cls, obj: Any, *, view: str = "image") -> ImageRef:
        if not isinstance(obj, dict):
            raise BadImageRef(f"{view} must be an object", field=view)
        for key in ("type", "url", "frame_idx"):
            if key not in obj:
                raise BadImageRef(f"{view} is missing {key!r}", field=view)
        extras = {k: v for k, v in obj.items() if k not in ("type", "url", "frame_idx")}
        try:
            return cls(url=obj["url"], frame_idx=obj["frame_idx"], kind=obj["type"], extras=extras)
        except BadImageRef as exc:
            raise BadImageRef(f"{view}: {exc}", field=view) from None


@dataclass(frozen=True, eq=False)
class EpisodeFrame:
    """One timestep of an episode.

    Equality and hashing go through the canonical serialization, so two
    frames compare equal exactly when they serialize to the same bytes
    (``1`` and ``1.0`` in ``state`` are different frames).
    """

    views: Mapping[str, ImageRef]
    state: tuple[int | float, ...]
    prompt: str
    is_robot: bool
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_views(list(self.views))
        if not all(_is_number(v) for v in self.state):
            raise BadField("state must be a list of numbers", field="state")
        if not isinstance(self.prompt, str):
            raise BadField("prompt must be a string", field="prompt")
        if not isinstance(self.is_robot, bool):
            raise BadField("is_robot must be a boolean", field="is_robot")
        clash = [k for k in self.extras if k in _CORE_KEYS or _VIEW_RE.match(k)]
        if clash:
            raise BadField(f"extras shadow reserved keys: {clash}")

    @property
    def state_dim(self) -> int:
        return len(self.state)

    @property
    def action(self) -> Any:
        return self.extras.get(ACTION_KEY)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(self.extras)
        for name, ref in self.views.items():
            out[name] = ref.to_json()
        out["state"] = list(self.state)
        out["prompt"] = self.prompt
        out["is_robot"] = self.is_robot
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EpisodeFrame):
            return NotImplemented
        return serialize_frame_line(self) == serialize_frame_line(other)

    def __hash__(self) -> int:
        return hash(serialize_frame_line(self))


def _view_number(name: str) -> int:
    m = _VIEW_RE.match(name)
    if m is None:
        raise NonContiguousViews(f"bad view name {name!r}", field=name)
    return int(m.group(1))


def _check_views(names: list[str]) -> None:
    if not names:
        raise MissingField("frame has no images_<n> views", field="images_1")
    numbers = sorted(_view_number(n) for n in names)
    if numbers != list(range(1, len(numbers) + 1)):
        raise NonContiguousViews(
            f"views must be images_1..images_{len(numbers)}, got {sorted(names)}"
        )


def parse_frame_line(line: str) -> EpisodeFrame:
    try:
        obj = canonical.loads(line)
    except ValueError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedJson("frame line must be a JSON object")

    views: dict[str, ImageRef] = {}
    extras: dict[str, Any] = {}
    for key, value in obj.items():
        if _VIEW_RE.match(key):
            views[key] = ImageRef.from_json(value, view=key)
        elif key not in _CORE_KEYS:
            extras[key] = value
    if not views:
        raise MissingField("frame has no images_<n> views", field="images_1")
    for key in _CORE_KEYS:
        if key not in obj:
            raise MissingField(f"missing {key!r}", field=key)

    state = obj["state"]
    if not isinstance(state, list) or not all(_is_number(v) for v in state):
        raise BadField("state must be a list of numbers", field="state")
    ordered = {name: views[name] for name in sorted(views, key=_view_number)}
    return EpisodeFrame(
        views=ordered,
        state=tuple(state),
        prompt=obj["prompt"],
        is_robot=obj["is_robot"],
        extras=extras,
    )


def serialize_frame_line(frame: EpisodeFrame) -> str:
    """One canonical JSON line, without the trailing newline."""
    return canonical.dumps(frame.to_json())


@dataclass(frozen=True)
class DatasetLayout:
    root: Path

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))

    @property
    def video_dir(self) -> Path:
        return self.root / VIDEO_DIR

    @property
    def jsonl_dir(self) -> Path:
        return self.root / JSONL_DIR

    @property
    def index_path(self) -> Path:
        return self.jsonl_dir / INDEX_FILE

    @property
    def action_space_path(self) -> Path:
        return self.jsonl_dir / ACTION_SPACE_FILE

    def relative(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def resolve(self, rel: str) -> Path:
        return self.root / PurePosixPath(rel)

    def jsonl_files(self) -> list[Path]:
        if not self.root.is_dir():
            raise DatasetIoError(f"dataset root {self.root} does not exist")
        if not self.jsonl_dir.is_dir():
            return []
        files = [p for p in self.jsonl_dir.iterdir() if p.suffix == ".jsonl" and p.is_file()]
        return sorted(files, key=lambda p: p.name.encode("utf-8"))


@dataclass(frozen=True)
class EpisodeMeta:
    jsonl_path: str
    video_paths: tuple[str, ...]
    num_frames: int
    state_dim: int
    prompt: str
    action_dim: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "jsonl_path": self.jsonl_path,
            "video_paths": list(self.video_paths),
            "num_frames": self.num_frames,
            "state_dim": self.state_dim,
            "prompt": self.prompt,
            "action_dim": self.action_dim,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> EpisodeMeta:
        return cls(
            jsonl_path=obj["jsonl_path"],
            video_paths=tuple(obj["video_paths"]),
            num_frames=obj["num_frames"],
            state_dim=obj["state_dim"],
            prompt=obj["prompt"],
            action_dim=obj.get("action_dim"),
        )


@dataclass(frozen=True)
class Violation:
    line: int | None  # 1-based; None for whole-file problems
    code: str
    message: str
    severity: str = "error"

    def to_json(self) -> dict[str, Any]:
        return {"line": self.line, "code": self.code, "message": self.message, "severity": self.severity}


@dataclass
class ValidationReport:
    jsonl_path: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def errors(self) -> list[Violation]:
        return [v for v in self.violations if v.severity == "error"]

    @property
    def warnings(self) -> list[Violation]:
        return [v for v in self.violations if v.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def add(self, line: int | None, code: str, message: str, severity: str = "error") -> None:
        self.violations.append(Violation(line, code, message, severity))

    def to_json(self) -> dict[str, Any]:
        return {"jsonl_path": self.jsonl_path, "violations": [v.to_json() for v in self.violations]}


@dataclass
class EpisodeInspection:
    """Everything learned from one pass over an episode file."""

    meta: EpisodeMeta | None
    report: ValidationReport
    max_frame_idx: dict[str, int] = field(default_factory=dict)


def _read_lines(path: Path) -> list[bytes]:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    if not data:
        return []
    lines = data.split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    return [ln[:-1] if ln.endswith(b"\r") else ln for ln in lines]


def iter_frames(path: Path) -> Iterator[tuple[int, EpisodeFrame]]:
    """Yield ``(line_number, frame)``; raises on the first bad line."""
    for lineno, raw in enumerate(_read_lines(Path(path)), start=1):
        try:
            yield lineno, parse_frame_line(raw.decode("utf-8"))
        except UnicodeDecodeError:
            raise MalformedJson(f"line {lineno}: not valid UTF-8") from None
        except FrameError as exc:
            raise type(exc)(f"line {lineno}: {exc}", field=exc.field) from None


def inspect_episode(jsonl_path: Path, layout: DatasetLayout) -> EpisodeInspection:
    jsonl_path = Path(jsonl_path)
    try:
        rel = layout.relative(jsonl_path)
    except ValueError:
        rel = jsonl_path.as_posix()
    report = ValidationReport(rel)
    lines = _read_lines(jsonl_path)
    if not lines:
        report.add(None, "EmptyEpisode", "episode file has no frames")
        return EpisodeInspection(None, report)

    first: EpisodeFrame | None = None
    urls: dict[str, str] = {}
    max_idx: dict[str, int] = {}
    action_dim: int | None = None
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            report.add(lineno, "EmptyLine", "blank line inside episode")
            continue
        try:
            frame = parse_frame_line(raw.decode("utf-8"))
        except UnicodeDecodeError:
            report.add(lineno, "MalformedJson", "line is not valid UTF-8")
            continue
        except FrameError as exc:
            report.add(lineno, exc.code, str(exc))
            continue

        if first is None:
            first = frame
            for name, ref in frame.views.items():
                urls[name] = ref.url
                p = PurePosixPath(ref.url)
                if p.is_absolute():
                    report.add(lineno, "AbsolutePath", f"{name} url {ref.url!r} is absolute", "warning")
                if p.suffix != ".mp4":
                    report.add(lineno, "NotMp4", f"{name} url {ref.url!r} lacks .mp4 extension", "warning")
        else:
            if frame.state_dim != first.state_dim:
                report.add(
                    lineno,
                    "InconsistentStateDim",
                    f"state has length {frame.state_dim}, expected {first.state_dim}",
                )
            if frame.prompt != first.prompt:
                report.add(lineno, "InconsistentPrompt", "prompt differs from line 1")
            if list(frame.views) != list(urls):
                report.add(lineno, "InconsistentViews", f"views {list(frame.views)} differ from {list(urls)}")
            for name, ref in frame.views.items():
                if name in urls and ref.url != urls[name]:
                    report.add(lineno, "InconsistentVideo", f"{name} url changes to {ref.url!r}")
        for name, ref in frame.views.items():
            max_idx[ref.url] = max(max_idx.get(ref.url, -1), ref.frame_idx)

        action = frame.action
        if action is not None:
            if not isinstance(action, list) or not all(_is_number(v) for v in action):
                report.add(lineno, "BadField", "action must be a list of numbers")
            elif action_dim is None:
                action_dim = len(action)
            elif len(action) != action_dim:
                report.add(lineno, "InconsistentActionDim", f"action has length {len(action)}, expected {action_dim}")

    if first is None or not report.ok:
        return EpisodeInspection(None, report, max_idx)
    meta = EpisodeMeta(
        jsonl_path=rel,
        video_paths=tuple(urls.values()),
        num_frames=len(lines),
        state_dim=first.state_dim,
        prompt=first.prompt,
        action_dim=action_dim,
    )
    return EpisodeInspection(meta, report, max_idx)


def validate_episode(jsonl_path: Path, layout: DatasetLayout) -> EpisodeMeta | ValidationReport:
    """Return the episode's metadata, or a report listing every violation."""
    result = inspect_episode(jsonl_path, layout)
    return result.meta if result.meta is not None else result.report


def inspect_dataset(layout: DatasetLayout) -> list[EpisodeInspection]:
    return [inspect_episode(p, layout) for p in layout.jsonl_files()]


def scan_dataset(layout: DatasetLayout) -> list[EpisodeMeta]:
    results = inspect_dataset(layout)
    bad = [r.report for r in results if r.meta is None]
    if bad:
        raise DatasetInvalid(bad)
    return [r.meta for r in results if r.meta is not None]
