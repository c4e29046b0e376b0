"""Minimal ISO BMFF writer for building fixtures.

Written independently of ``dexkit.mp4index``: it lays samples into an mdat
chunk by chunk and emits the matching stsz/stsc/stco/stts tables.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field


def box(kind: bytes, payload: bytes, *, largesize: bool = False) -> bytes:
    if largesize:
        return struct.pack(">I4sQ", 1, kind, len(payload) + 16) + payload
    return struct.pack(">I4s", len(payload) + 8, kind) + payload


def full_box(kind: bytes, version: int, payload: bytes, flags: int = 0) -> bytes:
    return box(kind, struct.pack(">I", (version << 24) | flags) + payload)


@dataclass
class TrackSpec:
    samples: list[bytes]
    samples_per_chunk: list[int]
    handler: bytes = b"vide"
    timescale: int = 30
    deltas: list[int] | None = None  # per-sample; default all 1
    chunk_gap: int = 0  # filler bytes between chunks
    force_per_entry_sizes: bool = False
    width: int = 64
    height: int = 64
    mdhd_version: int = 0

    def __post_init__(self) -> None:
        assert sum(self.samples_per_chunk) == len(self.samples)


@dataclass
class Mp4Spec:
    tracks: list[TrackSpec]
    co64: bool = False
    largesize_mdat: bool = False
    moov_first: bool = False
    extra_top: list[bytes] = field(default_factory=list)


def _stsc_runs(per_chunk: list[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for i, n in enumerate(per_chunk, start=1):
        if not runs or runs[-1][1] != n:
            runs.append((i, n))
    return runs


def _stts_runs(deltas: list[int]) -> list[tuple[int, int]]:
    runs: list[list[int]] = []
    for d in deltas:
        if runs and runs[-1][1] == d:
            runs[-1][0] += 1
        else:
            runs.append([1, d])
    return [(c, d) for c, d in runs]


def _trak(t: TrackSpec, offsets: list[int], co64: bool, track_id: int) -> bytes:
    deltas = t.deltas or [1] * len(t.samples)
    sizes = [len(s) for s in t.samples]
    if t.handler == b"vide":
        entry = box(
            b"dxzl",
            bytes(6) + struct.pack(">H", 1) + bytes(16)
            + struct.pack(">HHIIIH", t.width, t.height, 0x480000, 0x480000, 0, 1)
            + bytes(32) + struct.pack(">Hh", 24, -1),
        )
    else:
        entry = box(b"mp4a", bytes(6) + struct.pack(">H", 1) + bytes(20))
    stsd = full_box(b"stsd", 0, struct.pack(">I", 1) + entry)
    stts_runs = _stts_runs(deltas)
    stts = full_box(b"stts", 0, struct.pack(">I", len(stts_runs)) + b"".join(struct.pack(">II", c, d) for c, d in stts_runs))
    runs = _stsc_runs(t.samples_per_chunk)
    stsc = full_box(b"stsc", 0, struct.pack(">I", len(runs)) + b"".join(struct.pack(">III", f, n, 1) for f, n in runs))
    if len(set(sizes)) == 1 and not t.force_per_entry_sizes:
        stsz = full_box(b"stsz", 0, struct.pack(">II", sizes[0], len(sizes)))
    else:
        stsz = full_box(b"stsz", 0, struct.pack(">II", 0, len(sizes)) + b"".join(struct.pack(">I", s) for s in sizes))
    if co64:
        co = full_box(b"co64", 0, struct.pack(">I", len(offsets)) + b"".join(struct.pack(">Q", o) for o in offsets))
    else:
        co = full_box(b"stco", 0, struct.pack(">I", len(offsets)) + b"".join(struct.pack(">I", o) for o in offsets))
    stbl = box(b"stbl", stsd + stts + stsc + stsz + co)
    media_header = b"vmhd" if t.handler == b"vide" else b"smhd"
    minf = box(b"minf", full_box(media_header, 0, bytes(8 if t.handler == b"vide" else 4), flags=1) + stbl)
    duration = sum(deltas)
    if t.mdhd_version == 1:
        mdhd = full_box(b"mdhd", 1, struct.pack(">QQIQ", 0, 0, t.timescale, duration) + bytes(4))
    else:
        mdhd = full_box(b"mdhd", 0, struct.pack(">IIII", 0, 0, t.timescale, duration) + bytes(4))
    hdlr = full_box(b"hdlr", 0, bytes(4) + t.handler + bytes(12) + b"fixture\x00")
    mdia = box(b"mdia", mdhd + hdlr + minf)
    tkhd = full_box(b"tkhd", 0, struct.pack(">IIII", 0, 0, track_id, 0) + bytes(64), flags=3)
    return box(b"trak", tkhd + mdia)


def _moov(spec: Mp4Spec, offsets: list[list[int]]) -> bytes:
    mvhd = full_box(b"mvhd", 0, struct.pack(">IIII", 0, 0, 1000, 0) + bytes(80))
    traks = b"".join(_trak(t, o, spec.co64, i + 1) for i, (t, o) in enumerate(zip(spec.tracks, offsets)))
    return box(b"moov", mvhd + traks)


def build_mp4(spec: Mp4Spec) -> bytes:
    """Serialize ``spec``; returns the file bytes."""
    ftyp = box(b"ftyp", b"isom" + struct.pack(">I", 512) + b"isomiso2mp41")
    mdat_header_len = 16 if spec.largesize_mdat else 8

    # mdat body: every track's chunks in turn.
    body = bytearray()
    rel_offsets: list[list[int]] = []
    for t in spec.tracks:
        track_offsets = []
        s = 0
        for n in t.samples_per_chunk:
            body += b"\xee" * t.chunk_gap
            track_offsets.append(len(body))
            for _ in range(n):
                body += t.samples[s]
                s += 1
        rel_offsets.append(track_offsets)

    extra = b"".join(spec.extra_top)
    if spec.moov_first:
        # moov size is independent of offset values (fixed-width fields).
        moov_len = len(_moov(spec, rel_offsets))
        base = len(ftyp) + len(extra) + moov_len + mdat_header_len
    else:
        base = len(ftyp) + len(extra) + mdat_header_len
    offsets = [[base + o for o in track] for track in rel_offsets]
    mdat = box(b"mdat", bytes(body), largesize=spec.largesize_mdat)
    moov = _moov(spec, offsets)
    if spec.moov_first:
        return ftyp + extra + moov + mdat
    return ftyp + extra + mdat + moov


def simple_video(samples: list[bytes], samples_per_chunk: list[int] | None = None, **kwargs) -> bytes:
    per_chunk = samples_per_chunk or [len(samples)]
    return build_mp4(Mp4Spec(tracks=[TrackSpec(samples=samples, samples_per_chunk=per_chunk, **kwargs)]))
