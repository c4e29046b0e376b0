"""Convert raw recordings into Dexdata, build the index cache, account storage.

A raw episode bundle is a directory::

    <episode>/
        images_1/000000.png ...   one directory of numbered frames per view
        images_2/...
        states.json               [[s0...], [s1...], ...]
        actions.json              optional, same length as states
        prompt.txt
        episode.json              optional, {"is_robot": true}

Video encoding is delegated to an external command; this module only
writes jsonl, runs the encoder and checks the result with the mp4 indexer.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from PIL import Image

from dexkit import canonical
from dexkit.codec import ActionSpace, BoundsPolicy, fit_space
from dexkit.dexdata import (
    ACTION_KEY,
    DatasetInvalid,
    DatasetLayout,
    EpisodeFrame,
    EpisodeMeta,
    ImageRef,
    inspect_dataset,
    iter_frames,
    serialize_frame_line,
    validate_episode,
)
from dexkit.errors import DexkitError, ExternalError
from dexkit.mp4index import Mp4Error, probe_video

log = logging.getLogger(__name__)

INDEX_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}
_VIEW_DIR = re.compile(r"^images_([1-9][0-9]*)$")


class BundleError(DexkitError):
    code = "BadBundle"


class EncoderFailed(ExternalError):
    code = "EncoderFailed"

    def __init__(self, message: str, stderr: str = "") -> None:
        super().__init__(f"{message}: {stderr.strip()}" if stderr.strip() else message)
        self.stderr = stderr


class FrameCountMismatch(DexkitError):
    code = "FrameCountMismatch"


class StaleVideo(DexkitError):
    code = "StaleVideo"


class FrameIdxOutOfRange(DexkitError):
    code = "FrameIdxOutOfRange"


class MetadataMismatch(DexkitError):
    code = "MetadataMismatch"

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DecodeMismatch(DexkitError):
    code = "DecodeMismatch"


def _natural_key(path: Path) -> tuple:
    return tuple(int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", path.name))


@dataclass(frozen=True)
class RawEpisodeBundle:
    name: str
    views: dict[str, tuple[Path, ...]]
    states: tuple[tuple[Any, ...], ...]
    prompt: str
    is_robot: bool = True
    actions: tuple[tuple[Any, ...], ...] | None = None

    @property
    def num_frames(self) -> int:
        return len(self.states)

    @classmethod
    def load(cls, directory: str | Path) -> RawEpisodeBundle:
        root = Path(directory)
        if not root.is_dir():
            raise BundleError(f"{root} is not a directory")
        view_dirs = sorted(
            (p for p in root.iterdir() if p.is_dir() and _VIEW_DIR.match(p.name)),
            key=lambda p: int(_VIEW_DIR.match(p.name).group(1)),
        )
        views = {
            d.name: tuple(sorted((f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key))
            for d in view_dirs
        }
        try:
            states = json.loads((root / "states.json").read_text(encoding="utf-8"))
            prompt = (root / "prompt.txt").read_text(encoding="utf-8").rstrip("\n")
            actions_path = root / "actions.json"
            actions = json.loads(actions_path.read_text(encoding="utf-8")) if actions_path.exists() else None
            meta_path = root / "episode.json"
            extra = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        except (OSError, ValueError) as exc:
            raise BundleError(f"{root}: {exc}") from exc
        bundle = cls(
            name=root.name,
            views=views,
            states=tuple(tuple(s) for s in states),
            prompt=prompt,
            is_robot=bool(extra.get("is_robot", True)),
            actions=None if actions is None else tuple(tuple(a) for a in actions),
        )
        bundle.check()
        return bundle

    def check(self) -> None:
        if not self.views:
            raise BundleError(f"{self.name}: no images_<n> view directories")
        numbers = [int(_VIEW_DIR.match(v).group(1)) for v in self.views]
        if sorted(numbers) != list(range(1, len(numbers) + 1)):
            raise BundleError(f"{self.name}: view directories must be images_1..images_K")
        if not self.states:
            raise BundleError(f"{self.name}: no states")
        for view, frames in self.views.items():
            if len(frames) != len(self.states):
                raise BundleError(f"{self.name}: {view} has {len(frames)} frames but {len(self.states)} states")
        if self.actions is not None and len(self.actions) != len(self.states):
            raise BundleError(f"{self.name}: {len(self.actions)} actions for {len(self.states)} states")

    def video_url(self, view: str) -> str:
        return f"video/{self.name}_{view}.mp4"

    def frames(self) -> list[EpisodeFrame]:
        out = []
        for i, state in enumerate(self.states):
            extras = {ACTION_KEY: list(self.actions[i])} if self.actions is not None else {}
            out.append(
                EpisodeFrame(
                    views={v: ImageRef(url=self.video_url(v), frame_idx=i) for v in self.views},
                    state=tuple(state),
                    prompt=self.prompt,
                    is_robot=self.is_robot,
                    extras=extras,
                )
            )
        return out


@dataclass(frozen=True)
class EncoderCommand:
    """Command template with ``{input_list}``, ``{fps}`` and ``{output}`` placeholders.

    ``{input_list}`` is a text file naming one image per line, in frame order.
    The template is split shell-style but run without a shell.
    """

    template: str
    timeout: float | None = 600.0

    def argv(self, input_list: Path, fps: int, output: Path) -> list[str]:
        return [tok.format(input_list=input_list, fps=fps, output=output) for tok in shlex.split(self.template)]

    def run(self, input_list: Path, fps: int, output: Path) -> None:
        argv = self.argv(input_list, fps, output)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EncoderFailed(f"encoder could not run: {exc}") from exc
        if proc.returncode != 0:
            raise EncoderFailed(f"encoder exited with status {proc.returncode}", proc.stderr)
        if not output.exists():
            raise EncoderFailed("encoder exited 0 but wrote no output", proc.stderr)


@dataclass(frozen=True)
class DecoderCommand:
    """Command template with ``{input}`` and ``{output_dir}``; writes one image per frame."""

    template: str
    timeout: float | None = 600.0

    def run(self, input_path: Path, output_dir: Path) -> list[Path]:
        argv = [tok.format(input=input_path, output_dir=output_dir) for tok in shlex.split(self.template)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ExternalError(f"decoder could not run: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalError(f"decoder exited with status {proc.returncode}: {proc.stderr.strip()}")
        return sorted((p for p in output_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def episode_jsonl_bytes(bundle: RawEpisodeBundle) -> bytes:
    return "".join(serialize_frame_line(f) + "\n" for f in bundle.frames()).encode("utf-8")


def convert_episode(
    bundle: RawEpisodeBundle, layout: DatasetLayout, encoder: EncoderCommand, fps: int = 30
) -> EpisodeMeta:
    bundle.check()
    layout.video_dir.mkdir(parents=True, exist_ok=True)
    layout.jsonl_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix="dexkit-") as tmp:
        for view, frames in bundle.views.items():
            listing = Path(tmp) / f"{view}.txt"
            listing.write_text("".join(f"{p.resolve()}\n" for p in frames), encoding="utf-8")
            target = layout.resolve(bundle.video_url(view))
            staged = target.with_name(f".{target.name}.partial.mp4")
            try:
                encoder.run(listing, fps, staged)
                try:
                    count = probe_video(staged).frame_count
                except Mp4Error as exc:
                    raise EncoderFailed(f"encoder output for {view} is not a readable mp4: {exc}") from exc
                if count != bundle.num_frames:
                    raise FrameCountMismatch(
                        f"{bundle.name}/{view}: encoder wrote {count} frames, source has {bundle.num_frames}"
                    )
                os.replace(staged, target)
            finally:
                staged.unlink(missing_ok=True)

    jsonl_path = layout.jsonl_dir / f"{bundle.name}.jsonl"
    _write_atomic(jsonl_path, episode_jsonl_bytes(bundle))
    result = validate_episode(jsonl_path, layout)
    if not isinstance(result, EpisodeMeta):
        raise DatasetInvalid([result])
    log.info("converted %s: %d frames, %d views", bundle.name, result.num_frames, len(bundle.views))
    return result


def find_bundles(source_root: str | Path) -> list[Path]:
    root = Path(source_root)
    if not root.is_dir():
        raise ExternalError(f"source directory {root} does not exist")
    return sorted((p for p in root.iterdir() if p.is_dir() and (p / "states.json").exists()), key=lambda p: p.name)


def convert_dataset(
    source_root: str | Path,
    layout: DatasetLayout,
    encoder: EncoderCommand,
    fps: int = 30,
    *,
    workers: int = 1,
    policy: BoundsPolicy | None = None,
) -> list[EpisodeMeta]:
    """Convert every bundle under ``source_root``; fits ``action_space.json`` when actions exist."""
    bundles = [RawEpisodeBundle.load(p) for p in find_bundles(source_root)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            metas = list(pool.map(lambda b: convert_episode(b, layout, encoder, fps), bundles))
    else:
        metas = [convert_episode(b, layout, encoder, fps) for b in bundles]
    actions = [a for b in bundles if b.actions is not None for a in b.actions]
    if actions:
        fit_space(actions, policy).save(layout.action_space_path)
    return metas


@dataclass(frozen=True)
class IndexEntry:
    meta: EpisodeMeta
    video_frame_counts: dict[str, int]

    def to_json(self) -> dict[str, Any]:
        out = self.meta.to_json()
        out["video_frame_counts"] = dict(self.video_frame_counts)
        return out


@dataclass(frozen=True)
class IndexCache:
    version: int
    created_unix: int
    episodes: tuple[IndexEntry, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "created_unix": self.created_unix,
            "episodes": [e.to_json() for e in self.episodes],
        }

    def dumps(self) -> str:
        return canonical.dumps(self.to_json()) + "\n"

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> IndexCache:
        episodes = tuple(
            IndexEntry(EpisodeMeta.from_json(e), dict(e.get("video_frame_counts", {}))) for e in obj["episodes"]
        )
        return cls(version=obj["version"], created_unix=obj["created_unix"], episodes=episodes)

    @classmethod
    def load(cls, path: str | Path) -> IndexCache:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index_cache(layout: DatasetLayout, epoch: int | None = None) -> IndexCache:
    """Scan, cross-check every frame_idx against its video, and write the cache."""
    inspections = inspect_dataset(layout)
    bad = [r.report for r in inspections if r.meta is None]
    if bad:
        raise DatasetInvalid(bad)

    counts: dict[str, int] = {}
    stale: list[str] = []
    out_of_range: list[str] = []
    entries = []
    for ins in inspections:
        assert ins.meta is not None
        frame_counts = {}
        for url, max_idx in ins.max_frame_idx.items():
            if url not in counts:
                path = layout.resolve(url)
                if not path.is_file():
                    stale.append(f"{ins.meta.jsonl_path} references missing {url}")
                    continue
                counts[url] = probe_video(path).frame_count
            frame_counts[url] = counts[url]
            if max_idx >= counts[url]:
                out_of_range.append(f"{ins.meta.jsonl_path}: frame_idx {max_idx} >= {counts[url]} frames in {url}")
        entries.append(IndexEntry(ins.meta, frame_counts))
    if stale:
        raise StaleVideo("; ".join(stale))
    if out_of_range:
        raise FrameIdxOutOfRange("; ".join(out_of_range))

    cache = IndexCache(
        version=INDEX_VERSION,
        created_unix=int(time.time()) if epoch is None else int(epoch),
        episodes=tuple(entries),
    )
    _write_atomic(layout.index_path, cache.dumps().encode("utf-8"))
    return cache


def _tree_bytes(root: Path) -> int:
    total = 0
    for dirpath, _, files in os.walk(root):
        for name in files:
            st = os.lstat(os.path.join(dirpath, name))
            if not os.path.islink(os.path.join(dirpath, name)):
                total += st.st_size
    return total


@dataclass
class EpisodeStorage:
    name: str
    source_bytes: int | None
    dexdata_bytes: int | None

    @property
    def ratio(self) -> float | None:
        if not self.source_bytes or not self.dexdata_bytes:
            return None
        return self.source_bytes / self.dexdata_bytes


@dataclass
class StorageReport:
    source_root: str
    dexdata_root: str
    episodes: list[EpisodeStorage] = field(default_factory=list)
    source_bytes: int = 0
    dexdata_bytes: int = 0

    @property
    def ratio(self) -> float | None:
        if self.dexdata_bytes == 0:
            return None
        return self.source_bytes / self.dexdata_bytes

    def to_json(self) -> dict[str, Any]:
        return {
            "source_root": self.source_root,
            "dexdata_root": self.dexdata_root,
            "source_bytes": self.source_bytes,
            "dexdata_bytes": self.dexdata_bytes,
            "ratio": self.ratio,
            "episodes": [
                {"name": e.name, "source_bytes": e.source_bytes, "dexdata_bytes": e.dexdata_bytes, "ratio": e.ratio}
                for e in self.episodes
            ],
        }

    def to_table(self) -> str:
        def fmt(v: int | float | None) -> str:
            if v is None:
                return "-"
            return f"{v:.3f}" if isinstance(v, float) else str(v)

        rows = [("episode", "source_bytes", "dexdata_bytes", "ratio")]
        rows += [(e.name, fmt(e.source_bytes), fmt(e.dexdata_bytes), fmt(e.ratio)) for e in self.episodes]
        rows.append(("TOTAL", fmt(self.source_bytes), fmt(self.dexdata_bytes), fmt(self.ratio)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join(
            "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows
        )


def storage_report(source_root: str | Path, layout: DatasetLayout) -> StorageReport:
    """Byte-exact comparison of a raw source tree and its Dexdata conversion.

    Totals cover every regular file in each tree (index cache included);
    per-episode rows pair a bundle directory with its jsonl plus videos.
    """
    source_root = Path(source_root)
    for root in (source_root, layout.root):
        if not root.is_dir():
            raise ExternalError(f"{root} does not exist")
    report = StorageReport(
        source_root=str(source_root),
        dexdata_root=str(layout.root),
        source_bytes=_tree_bytes(source_root),
        dexdata_bytes=_tree_bytes(layout.root),
    )
    dex: dict[str, int] = {}
    for path in layout.jsonl_files():
        size = path.stat().st_size
        result = validate_episode(path, layout)
        if isinstance(result, EpisodeMeta):
            for url in result.video_paths:
                video = layout.resolve(url)
                if video.is_file():
                    size += video.stat().st_size
        dex[path.stem] = size
    src = {p.name: _tree_bytes(p) for p in source_root.iterdir() if p.is_dir()}
    for name in sorted(set(dex) | set(src)):
        report.episodes.append(EpisodeStorage(name, src.get(name), dex.get(name)))
    return report


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size


def verify_roundtrip(
    bundle: RawEpisodeBundle, layout: DatasetLayout, decoder: DecoderCommand | None = None
) -> dict[str, Any]:
    """Check a converted episode against its source bundle.

    Metadata must match exactly. Pixels are never compared; with a decoder
    configured, decoded frame counts and per-frame dimensions must match.
    """
    jsonl_path = layout.jsonl_dir / f"{bundle.name}.jsonl"
    expected = bundle.frames()
    n_lines = 0
    for lineno, frame in iter_frames(jsonl_path):
        n_lines = lineno
        if lineno > len(expected):
            raise MetadataMismatch(f"extra frame beyond the source's {len(expected)}", lineno)
        want = expected[lineno - 1]
        for name, got_v, want_v in (
            ("state", list(frame.state), list(want.state)),
            ("prompt", frame.prompt, want.prompt),
            ("is_robot", frame.is_robot, want.is_robot),
            ("action", frame.extras.get(ACTION_KEY), want.extras.get(ACTION_KEY)),
            ("views", {k: v.to_json() for k, v in frame.views.items()}, {k: v.to_json() for k, v in want.views.items()}),
        ):
            if canonical.dumps(got_v) != canonical.dumps(want_v):
                raise MetadataMismatch(f"{name} is {got_v!r}, source has {want_v!r}", lineno)
    if n_lines != len(expected):
        raise MetadataMismatch(f"jsonl has {n_lines} frames, source has {len(expected)}")

    report: dict[str, Any] = {
        "episode": bundle.name,
        "frames": len(expected),
        "views": len(bundle.views),
        "metadata": "ok",
        "pixels": "skipped",
    }
    if decoder is None:
        return report
    for view, sources in bundle.views.items():
        with tempfile.TemporaryDirectory(prefix="dexkit-decode-") as tmp:
            decoded = decoder.run(layout.resolve(bundle.video_url(view)), Path(tmp))
            if len(decoded) != len(sources):
                raise DecodeMismatch(f"{view}: decoded {len(decoded)} frames, source has {len(sources)}")
            for i, (d, s) in enumerate(zip(decoded, sources)):
                if _image_size(d) != _image_size(s):
                    raise DecodeMismatch(f"{view} frame {i}: decoded {_image_size(d)}, source {_image_size(s)}")
    report["pixels"] = "dimensions ok"
    return report


def load_action_space(layout: DatasetLayout) -> ActionSpace | None:
    path = layout.action_space_path
    return ActionSpace.load(path) if path.exists() else None
