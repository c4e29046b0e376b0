"""ISO BMFF (mp4) box walker and sample-table indexer.

Maps a decode-order frame index to the byte range of its encoded sample
without touching the codec. Only the first ``vide`` track is indexed and
edit lists are ignored, so ``frame_idx`` means "n-th sample written".

Every read is bounded by the declared file length; malformed input raises
a subclass of :class:`Mp4Error`, never an unstructured exception.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, NamedTuple

from dexkit.errors import DexkitError

CONTAINERS = frozenset({b"moov", b"trak", b"mdia", b"minf", b"stbl"})
MAX_DEPTH = 8
MAX_U63 = (1 << 63) - 1


class Mp4Error(DexkitError):
    code = "Mp4Error"

    def __init__(self, message: str, *, offset: int | None = None) -> None:
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class TruncatedBox(Mp4Error):
    code = "TruncatedBox"


class NoMoov(Mp4Error):
    code = "NoMoov"


class NoVideoTrack(Mp4Error):
    code = "NoVideoTrack"


class LargesizeOverflow(Mp4Error):
    code = "LargesizeOverflow"


class UnsupportedFragmented(Mp4Error):
    code = "UnsupportedFragmented"


class MalformedTable(Mp4Error):
    code = "MalformedTable"


class InconsistentTables(Mp4Error):
    code = "InconsistentTables"


class FrameOutOfRange(Mp4Error):
    code = "FrameOutOfRange"


@dataclass(frozen=True)
class BoxHeader:
    size: int
    box_type: bytes
    offset: int
    header_len: int

    @property
    def payload_offset(self) -> int:
        return self.offset + self.header_len

    @property
    def payload_size(self) -> int:
        return self.size - self.header_len

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass
class Box:
    header: BoxHeader
    children: list[Box] = field(default_factory=list)

    @property
    def type(self) -> str:
        return self.header.box_type.decode("latin-1")

    def find(self, box_type: bytes) -> Box | None:
        for child in self.children:
            if child.header.box_type == box_type:
                return child
        return None

    def find_all(self, box_type: bytes) -> list[Box]:
        return [c for c in self.children if c.header.box_type == box_type]


@dataclass
class BoxTree:
    boxes: list[Box]
    file_size: int
    moov: Box
    video_trak: Box
    handler: bytes = b"vide"


class _Reader:
    """Bounded random-access reads over a seekable byte source."""

    def __init__(self, source: BinaryIO) -> None:
        self.source = source
        source.seek(0, os.SEEK_END)
        self.size = source.tell()

    def read(self, offset: int, n: int) -> bytes:
        if offset < 0 or n < 0 or offset + n > self.size:
            raise TruncatedBox(f"read of {n} bytes past end of file ({self.size} bytes)", offset=offset)
        self.source.seek(offset)
        data = self.source.read(n)
        if len(data) != n:
            raise TruncatedBox("short read", offset=offset)
        return data


def _read_header(reader: _Reader, offset: int, limit: int) -> BoxHeader:
    if offset + 8 > limit:
        raise TruncatedBox("box header runs past its container", offset=offset)
    size, box_type = struct.unpack(">I4s", reader.read(offset, 8))
    header_len = 8
    if size == 1:
        if offset + 16 > limit:
            raise TruncatedBox("largesize field runs past its container", offset=offset)
        (size,) = struct.unpack(">Q", reader.read(offset + 8, 8))
        header_len = 16
        if size > MAX_U63:
            raise LargesizeOverflow(f"largesize {size} exceeds 2^63-1", offset=offset)
    elif size == 0:
        size = limit - offset
    if size < header_len:
        raise TruncatedBox(f"declared size {size} smaller than header ({header_len})", offset=offset)
    if offset + size > limit:
        raise TruncatedBox(f"box {box_type!r} of size {size} overruns its container", offset=offset)
    return BoxHeader(size=size, box_type=box_type, offset=offset, header_len=header_len)


def _walk(reader: _Reader, start: int, limit: int, depth: int) -> list[Box]:
    boxes = []
    offset = start
    while offset < limit:
        header = _read_header(reader, offset, limit)
        box = Box(header)
        if header.box_type in CONTAINERS and depth < MAX_DEPTH:
            box.children = _walk(reader, header.payload_offset, header.end, depth + 1)
        boxes.append(box)
        offset = header.end
    return boxes


def _full_box_payload(reader: _Reader, box: Box, min_len: int) -> tuple[int, bytes]:
    h = box.header
    if h.payload_size < 4 + min_len:
        raise MalformedTable(f"{box.type} payload too short", offset=h.offset)
    data = reader.read(h.payload_offset, h.payload_size)
    return data[0], data[4:]


def _handler_type(reader: _Reader, trak: Box) -> bytes | None:
    mdia = trak.find(b"mdia")
    hdlr = mdia.find(b"hdlr") if mdia else None
    if hdlr is None:
        return None
    _, body = _full_box_payload(reader, hdlr, 8)
    return body[4:8]


def _parse(reader: _Reader) -> BoxTree:
    if reader.size < 8:
        raise TruncatedBox(f"file of {reader.size} bytes cannot hold a box header", offset=0)
    boxes = _walk(reader, 0, reader.size, 0)
    if any(b.header.box_type == b"moof" for b in boxes):
        raise UnsupportedFragmented("fragmented mp4 (moof) is not supported")
    moov = next((b for b in boxes if b.header.box_type == b"moov"), None)
    if moov is None:
        raise NoMoov("no moov box found")
    if moov.find(b"mvex") is not None:
        raise UnsupportedFragmented("fragmented mp4 (mvex) is not supported")
    for trak in moov.find_all(b"trak"):
        if _handler_type(reader, trak) == b"vide":
            return BoxTree(boxes=boxes, file_size=reader.size, moov=moov, video_trak=trak)
    raise NoVideoTrack("no track with handler 'vide'")


def parse_boxes(source: BinaryIO) -> BoxTree:
    """Walk the box hierarchy and locate the first video track."""
    return _parse(_Reader(source))


@dataclass(frozen=True)
class SampleTables:
    sample_sizes: tuple[int, ...]
    chunk_offsets: tuple[int, ...]
    sample_to_chunk: tuple[tuple[int, int], ...]  # (first_chunk 1-based, samples_per_chunk)
    time_deltas: tuple[tuple[int, int], ...]  # (count, delta)
    timescale: int


def _entries(body: bytes, fmt: str, count_at: int, start: int, box: str, offset: int) -> list[tuple]:
    (count,) = struct.unpack_from(">I", body, count_at)
    width = struct.calcsize(fmt)
    if start + count * width > len(body):
        raise MalformedTable(f"{box} declares {count} entries but holds {(len(body) - start) // width}", offset=offset)
    return list(struct.iter_unpack(fmt, body[start:start + count * width]))


def read_sample_tables(source: BinaryIO, tree: BoxTree | None = None) -> SampleTables:
    reader = _Reader(source)
    if tree is None:
        tree = _parse(reader)
    mdia = tree.video_trak.find(b"mdia")
    mdhd = mdia.find(b"mdhd") if mdia else None
    minf = mdia.find(b"minf") if mdia else None
    stbl = minf.find(b"stbl") if minf else None
    if mdhd is None or stbl is None:
        raise MalformedTable("video track lacks mdhd or stbl")

    version, body = _full_box_payload(reader, mdhd, 12)
    if version == 1:
        if len(body) < 20:
            raise MalformedTable("mdhd v1 too short", offset=mdhd.header.offset)
        (timescale,) = struct.unpack_from(">I", body, 16)
    else:
        (timescale,) = struct.unpack_from(">I", body, 8)
    if timescale == 0:
        raise MalformedTable("mdhd timescale is zero", offset=mdhd.header.offset)

    def need(kind: bytes) -> Box:
        box = stbl.find(kind)
        if box is None:
            raise MalformedTable(f"stbl has no {kind.decode()} box", offset=stbl.header.offset)
        return box

    stsz = stbl.find(b"stsz")
    if stsz is None:
        if stbl.find(b"stz2") is not None:
            raise MalformedTable("compact sample sizes (stz2) are not supported", offset=stbl.header.offset)
        need(b"stsz")
    _, body = _full_box_payload(reader, stsz, 8)
    uniform, count = struct.unpack_from(">II", body, 0)
    if uniform:
        if uniform * count > reader.size:
            raise MalformedTable(f"{count} samples of {uniform} bytes exceed the file", offset=stsz.header.offset)
        sizes = (uniform,) * count
    else:
        sizes = tuple(s for (s,) in _entries(body, ">I", 4, 8, "stsz", stsz.header.offset))

    co = stbl.find(b"stco")
    fmt = ">I"
    if co is None:
        co = need(b"co64")
        fmt = ">Q"
    _, body = _full_box_payload(reader, co, 4)
    offsets = tuple(o for (o,) in _entries(body, fmt, 0, 4, co.type, co.header.offset))

    stsc = need(b"stsc")
    _, body = _full_box_payload(reader, stsc, 4)
    runs = tuple((first, per) for first, per, _ in _entries(body, ">III", 0, 4, "stsc", stsc.header.offset))

    stts = need(b"stts")
    _, body = _full_box_payload(reader, stts, 4)
    deltas = tuple(_entries(body, ">II", 0, 4, "stts", stts.header.offset))

    return SampleTables(sizes, offsets, runs, deltas, timescale)


class FrameEntry(NamedTuple):
    byte_offset: int
    byte_len: int
    pts_ticks: int


@dataclass(frozen=True)
class FrameTable:
    entries: tuple[FrameEntry, ...]
    timescale: int
    duration_ticks: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def build_frame_table(tables: SampleTables) -> FrameTable:
    n = len(tables.sample_sizes)
    n_chunks = len(tables.chunk_offsets)
    runs = tables.sample_to_chunk
    if n == 0:
        raise InconsistentTables("track has no samples")
    if not runs:
        raise InconsistentTables("empty sample-to-chunk table")
    if runs[0][0] != 1:
        raise InconsistentTables(f"first sample-to-chunk run starts at chunk {runs[0][0]}, expected 1")
    for (a, _), (b, _) in zip(runs, runs[1:]):
        if b <= a:
            raise InconsistentTables("sample-to-chunk first_chunk values not strictly increasing")
    if runs[-1][0] > n_chunks:
        raise InconsistentTables(f"sample-to-chunk references chunk {runs[-1][0]} of {n_chunks}")
    stts_total = sum(count for count, _ in tables.time_deltas)
    if stts_total != n:
        raise InconsistentTables(f"stts covers {stts_total} samples, stsz has {n}")

    # Samples per chunk, expanded run by run.
    per_chunk = [0] * n_chunks
    for i, (first, per) in enumerate(runs):
        last = runs[i + 1][0] - 1 if i + 1 < len(runs) else n_chunks
        per_chunk[first - 1:last] = [per] * (last - first + 1)
    if sum(per_chunk) != n:
        raise InconsistentTables(f"chunks hold {sum(per_chunk)} samples, stsz has {n}")

    pts = []
    t = 0
    for count, delta in tables.time_deltas:
        for _ in range(count):
            pts.append(t)
            t += delta

    entries = []
    s = 0
    for base, count in zip(tables.chunk_offsets, per_chunk):
        offset = base
        for _ in range(count):
            size = tables.sample_sizes[s]
            entries.append(FrameEntry(offset, size, pts[s]))
            offset += size
            s += 1
    return FrameTable(tuple(entries), tables.timescale, t)


def locate_frame(table: FrameTable, frame_idx: int) -> tuple[int, int, float]:
    """Return ``(byte_offset, byte_len, pts_seconds)`` for one frame."""
    if not 0 <= frame_idx < len(table.entries):
        raise FrameOutOfRange(f"frame_idx {frame_idx} outside [0, {len(table.entries)})")
    e = table.entries[frame_idx]
    return e.byte_offset, e.byte_len, e.pts_ticks / table.timescale


def check_bounds(table: FrameTable, file_size: int) -> None:
    for i, e in enumerate(table.entries):
        if e.byte_offset + e.byte_len > file_size:
            raise TruncatedBox(f"sample {i} ends at {e.byte_offset + e.byte_len}, file has {file_size} bytes")


@dataclass(frozen=True)
class VideoInfo:
    frame_count: int
    duration_seconds: float
    timescale: int

    def to_json(self) -> dict:
        return {"frame_count": self.frame_count, "duration_seconds": self.duration_seconds, "timescale": self.timescale}


def index_source(source: BinaryIO) -> FrameTable:
    reader = _Reader(source)
    tree = _parse(reader)
    table = build_frame_table(read_sample_tables(source, tree))
    check_bounds(table, reader.size)
    return table


def index_video(path: str | os.PathLike) -> FrameTable:
    with open(path, "rb") as f:
        return index_source(f)


def index_bytes(data: bytes) -> FrameTable:
    return index_source(io.BytesIO(data))


def probe_video(path: str | os.PathLike) -> VideoInfo:
    table = index_video(Path(path))
    return VideoInfo(
        frame_count=len(table),
        duration_seconds=table.duration_ticks / table.timescale,
        timescale=table.timescale,
    )


def read_frame(path: str | os.PathLike, table: FrameTable, frame_idx: int) -> bytes:
    offset, length, _ = locate_frame(table, frame_idx)
    with open(path, "rb") as f:
        f.seek(offset)
        return f.read(length)
