import json

import pytest

from dexkit.codec import ActionSpace
from dexkit.dexdata import DatasetLayout, DatasetInvalid, scan_dataset
from dexkit.errors import EXIT_IO
from dexkit.ingest import (
    BundleError,
    DecodeMismatch,
    DecoderCommand,
    EncoderCommand,
    EncoderFailed,
    FrameCountMismatch,
    FrameIdxOutOfRange,
    IndexCache,
    MetadataMismatch,
    RawEpisodeBundle,
    StaleVideo,
    build_index_cache,
    convert_dataset,
    convert_episode,
    storage_report,
    verify_roundtrip,
)
from dexkit.mp4index import probe_video
from conftest import make_bundle
from helpers.oracles import recursive_byte_sum


@pytest.fixture
def source(tmp_path):
    src = tmp_path / "raw"
    make_bundle(src, "episode1", 5, 2, seed=1)
    make_bundle(src, "episode2", 3, 2, seed=2, states=[[float(i), 0.5] for i in range(3)])
    return src


def test_bundle_load(source):
    b = RawEpisodeBundle.load(source / "episode1")
    assert b.name == "episode1"
    assert list(b.views) == ["images_1", "images_2"]
    assert b.num_frames == 5
    assert b.prompt == "open the door"
    assert b.video_url("images_2") == "video/episode1_images_2.mp4"


def test_bundle_errors(tmp_path):
    d = make_bundle(tmp_path, "ep", 3, 1)
    (d / "states.json").write_text("[[0.0]]")
    with pytest.raises(BundleError):
        RawEpisodeBundle.load(d)
    with pytest.raises(BundleError):
        RawEpisodeBundle.load(tmp_path / "missing")


def test_convert_dataset_layout(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    metas = convert_dataset(source, layout, EncoderCommand(stub_encoder), fps=30)
    assert [m.jsonl_path for m in metas] == ["jsonl/episode1.jsonl", "jsonl/episode2.jsonl"]
    assert sorted(p.name for p in layout.video_dir.iterdir()) == [
        "episode1_images_1.mp4", "episode1_images_2.mp4", "episode2_images_1.mp4", "episode2_images_2.mp4",
    ]
    assert probe_video(layout.video_dir / "episode1_images_1.mp4").frame_count == 5
    assert scan_dataset(layout) == metas
    lines = (layout.jsonl_dir / "episode2.jsonl").read_text().splitlines()
    assert json.loads(lines[2])["state"] == [2.0, 0.5]
    assert json.loads(lines[2])["images_1"] == {"type": "video", "url": "video/episode2_images_1.mp4", "frame_idx": 2}
    assert not layout.action_space_path.exists()


def test_convert_with_actions_fits_space(tmp_path, stub_encoder):
    src = tmp_path / "raw"
    make_bundle(src, "ep", 4, 1, actions=[[0.0, 1.0], [0.5, 2.0], [1.0, 3.0], [0.25, 2.5]])
    layout = DatasetLayout(tmp_path / "dex")
    from dexkit.codec import BoundsPolicy

    metas = convert_dataset(src, layout, EncoderCommand(stub_encoder), policy=BoundsPolicy.minmax())
    assert metas[0].action_dim == 2
    space = ActionSpace.load(layout.action_space_path)
    assert (space.lo, space.hi) == ((0.0, 1.0), (1.0, 3.0))


def test_frame_count_mismatch_leaves_no_video(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    bundle = RawEpisodeBundle.load(source / "episode1")
    with pytest.raises(FrameCountMismatch):
        convert_episode(bundle, layout, EncoderCommand(stub_encoder + " --drop 1"))
    assert list(layout.video_dir.iterdir()) == []
    assert not (layout.jsonl_dir / "episode1.jsonl").exists()


def test_encoder_failure_is_external(source, tmp_path, stub_encoder):
    bundle = RawEpisodeBundle.load(source / "episode1")
    with pytest.raises(EncoderFailed) as info:
        convert_episode(bundle, DatasetLayout(tmp_path / "dex"), EncoderCommand(stub_encoder + " --fail"))
    assert "forced failure" in info.value.stderr
    assert info.value.exit_code == EXIT_IO
    with pytest.raises(EncoderFailed):
        convert_episode(bundle, DatasetLayout(tmp_path / "dex"), EncoderCommand("/nonexistent/encoder {output}"))


def test_index_cache_deterministic(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    first = build_index_cache(layout, epoch=0)
    raw = layout.index_path.read_bytes()
    second = build_index_cache(layout, epoch=0)
    assert layout.index_path.read_bytes() == raw
    assert first == second
    loaded = IndexCache.load(layout.index_path)
    assert loaded == first
    assert loaded.created_unix == 0
    assert [e.video_frame_counts for e in loaded.episodes] == [
        {"video/episode1_images_1.mp4": 5, "video/episode1_images_2.mp4": 5},
        {"video/episode2_images_1.mp4": 3, "video/episode2_images_2.mp4": 3},
    ]


def test_index_detects_missing_video(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    (layout.video_dir / "episode2_images_1.mp4").unlink()
    with pytest.raises(StaleVideo):
        build_index_cache(layout)


def test_index_detects_frame_idx_past_video(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    path = layout.jsonl_dir / "episode2.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[-1])
    obj["images_1"]["frame_idx"] = 3
    path.write_text("\n".join(lines[:-1] + [json.dumps(obj)]) + "\n")
    with pytest.raises(FrameIdxOutOfRange):
        build_index_cache(layout)


def test_index_rejects_invalid_episode(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    (layout.jsonl_dir / "broken.jsonl").write_text("{}\n")
    with pytest.raises(DatasetInvalid):
        build_index_cache(layout)


def test_storage_report_matches_byte_sum(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    build_index_cache(layout, epoch=0)
    report = storage_report(source, layout)
    assert report.source_bytes == recursive_byte_sum(source)
    assert report.dexdata_bytes == recursive_byte_sum(layout.root)
    assert [e.name for e in report.episodes] == ["episode1", "episode2"]
    ep1 = report.episodes[0]
    assert ep1.source_bytes == recursive_byte_sum(source / "episode1")
    assert ep1.dexdata_bytes == (layout.jsonl_dir / "episode1.jsonl").stat().st_size + sum(
        (layout.video_dir / f"episode1_images_{v}.mp4").stat().st_size for v in (1, 2)
    )
    doc = report.to_json()
    assert doc["ratio"] == report.source_bytes / report.dexdata_bytes
    assert "TOTAL" in report.to_table()


def test_storage_report_empty_dexdata(tmp_path):
    (tmp_path / "raw").mkdir()
    (tmp_path / "dex").mkdir()
    report = storage_report(tmp_path / "raw", DatasetLayout(tmp_path / "dex"))
    assert report.ratio is None
    assert report.episodes == []


def test_low_motion_ratio_above_one(tmp_path, stub_encoder):
    src = tmp_path / "raw"
    make_bundle(src, "still", 200, 1, size=(64, 64), low_motion=True, seed=4)
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(src, layout, EncoderCommand(stub_encoder))
    assert storage_report(src, layout).ratio > 1


def test_verify_roundtrip(source, tmp_path, stub_encoder, stub_decoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    bundle = RawEpisodeBundle.load(source / "episode1")
    report = verify_roundtrip(bundle, layout)
    assert report == {"episode": "episode1", "frames": 5, "views": 2, "metadata": "ok", "pixels": "skipped"}
    assert verify_roundtrip(bundle, layout, DecoderCommand(stub_decoder))["pixels"] == "dimensions ok"


def test_verify_detects_tampered_metadata(source, tmp_path, stub_encoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    path = layout.jsonl_dir / "episode1.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[3])
    obj["state"] = [9.0, 9.0]
    lines[3] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MetadataMismatch) as info:
        verify_roundtrip(RawEpisodeBundle.load(source / "episode1"), layout)
    assert info.value.line == 4


def test_verify_detects_wrong_dimensions(source, tmp_path, stub_encoder, stub_decoder):
    layout = DatasetLayout(tmp_path / "dex")
    convert_dataset(source, layout, EncoderCommand(stub_encoder))
    other = make_bundle(tmp_path / "other", "episode1", 5, 2, size=(8, 8))
    with pytest.raises(DecodeMismatch):
        verify_roundtrip(RawEpisodeBundle.load(other), layout, DecoderCommand(stub_decoder))
