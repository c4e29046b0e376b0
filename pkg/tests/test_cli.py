import json
import os
import signal
import socket
import subprocess
import sys

import pytest

from dexkit import canonical
from dexkit.cli import main
from dexkit.errors import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION
from dexkit.expconfig import ConfigNode, resolve_file
from dexkit.ingest import IndexCache
from conftest import STUB_ENCODER, make_bundle
from helpers.mp4writer import simple_video

LINE = '{{"images_1":{{"type":"video","url":"video/{ep}.mp4","frame_idx":{i}}},"state":[0.1,0.2],"prompt":"open the door","is_robot":true}}'


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def two_episodes(tmp_path):
    root = tmp_path / "dexdata"
    (root / "video").mkdir(parents=True)
    (root / "jsonl").mkdir()
    for ep in ("episode1", "episode2"):
        (root / "jsonl" / f"{ep}.jsonl").write_text("".join(LINE.format(ep=ep, i=i) + "\n" for i in range(3)))
        (root / "video" / f"{ep}.mp4").write_bytes(simple_video([bytes([i]) * 10 for i in range(3)]))
    return root


@pytest.fixture
def configs(tmp_path):
    d = tmp_path / "exp"
    d.mkdir()
    (d / "base.json").write_text(ConfigNode("base_exp", None, {"optimizer": {"lr": 1e-4, "bs": 16}}).dumps())
    (d / "child.json").write_text(ConfigNode("child_exp", "base_exp", {"optimizer": {"lr": 5e-5}}).dumps())
    return d


def test_validate_two_episode_dataset(capsys, two_episodes):
    code, out, _ = run(capsys, "validate", "--dataset", str(two_episodes))
    assert code == EXIT_OK
    assert "2 episodes, 0 invalid" in out
    code, out, _ = run(capsys, "validate", "--dataset", str(two_episodes), "--json")
    doc = json.loads(out)
    assert [e["jsonl_path"] for e in doc["episodes"]] == ["jsonl/episode1.jsonl", "jsonl/episode2.jsonl"]
    assert out == canonical.dumps(doc) + "\n"


def test_validate_reports_line(capsys, two_episodes):
    with open(two_episodes / "jsonl" / "episode2.jsonl", "a") as f:
        f.write('{"images_1":{"type":"video","url":"video/episode2.mp4","frame_idx":3},"state":[1],"prompt":"open the door","is_robot":true}\n')
    code, out, _ = run(capsys, "--json", "validate", "--dataset", str(two_episodes))
    assert code == EXIT_VALIDATION
    bad = json.loads(out)["episodes"][1]
    assert bad["violations"][0]["line"] == 4
    assert bad["violations"][0]["code"] == "InconsistentStateDim"


def test_no_arguments(capsys):
    code, out, err = run(capsys)
    assert code == EXIT_USAGE
    assert "usage" in err
    assert out == ""


def test_config_resolve_matches_library(capsys, configs):
    code, out, _ = run(capsys, "config-resolve", "--exp", str(configs / "child.json"), "--json")
    assert code == EXIT_OK
    assert json.loads(out) == json.loads(json.dumps(resolve_file(configs / "child.json").to_json()))
    code, out, _ = run(capsys, "config-resolve", "--exp", str(configs / "child.json"), "--set", "optimizer.bs=32")
    assert "optimizer.bs  = 32  [cli]" in out
    assert "optimizer.lr  = 5e-05  [child_exp]" in out


def test_convert_index_stats_verify(capsys, tmp_path):
    src = tmp_path / "raw"
    make_bundle(src, "episode1", 4, 2)
    dst = tmp_path / "dex"
    code, out, _ = run(capsys, "convert", "--src", str(src), "--dst", str(dst), "--encoder", STUB_ENCODER, "--epoch", "0", "--json")
    assert code == EXIT_OK, out
    assert IndexCache.load(dst / "jsonl" / "index_cache.json").created_unix == 0
    code, out, _ = run(capsys, "index", "--dst", str(dst), "--epoch", "0", "--json")
    assert json.loads(out)["episodes"][0]["num_frames"] == 4
    code, out, _ = run(capsys, "stats", "--src", str(src), "--dst", str(dst), "--json")
    assert json.loads(out)["episodes"][0]["name"] == "episode1"
    code, out, _ = run(capsys, "verify", "--src", str(src / "episode1"), "--dst", str(dst), "--json")
    assert json.loads(out)["metadata"] == "ok"
    code, out, _ = run(capsys, "probe-mp4", str(dst / "video" / "episode1_images_1.mp4"), "--frame", "2", "--json")
    assert json.loads(out)["frame_count"] == 4
    assert json.loads(out)["frame"]["index"] == 2


def test_run_train(capsys, tmp_path, configs):
    src = tmp_path / "raw"
    make_bundle(src, "episode1", 3, 1)
    dst = tmp_path / "dex"
    assert run(capsys, "convert", "--src", str(src), "--dst", str(dst), "--encoder", STUB_ENCODER)[0] == EXIT_OK
    code, out, _ = run(capsys, "run", "--exp", str(configs / "child.json"), "--task", "train",
                       "--set", f"data.dataset={json.dumps(str(dst))}", "--json")
    assert code == EXIT_OK
    assert json.loads(out)["report"]["num_frames"] == 3


def _busy_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    return s


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _error_cases(tmp_path, configs, two_episodes):
    cyc = tmp_path / "cyc"
    cyc.mkdir()
    (cyc / "a.json").write_text(ConfigNode("a", "b", {}).dumps())
    (cyc / "b.json").write_text(ConfigNode("b", "a", {}).dumps())
    orphan = tmp_path / "orphan.json"
    orphan.write_text(ConfigNode("orphan", "ghost", {}).dumps())
    junk = tmp_path / "junk.mp4"
    junk.write_bytes(b"not a video at all")
    (two_episodes / "jsonl" / "bad.jsonl").write_text("{}\n")
    src = tmp_path / "raw"
    make_bundle(src, "episode1", 3, 1)
    return [
        (["frobnicate"], EXIT_USAGE),
        (["validate"], EXIT_USAGE),
        (["validate", "--dataset", str(two_episodes)], EXIT_VALIDATION),
        (["validate", "--dataset", str(tmp_path / "missing")], EXIT_IO),
        (["index", "--dst", str(two_episodes)], EXIT_VALIDATION),
        (["config-resolve", "--exp", str(cyc / "a.json")], EXIT_VALIDATION),
        (["config-resolve", "--exp", str(orphan)], EXIT_VALIDATION),
        (["config-resolve", "--exp", str(tmp_path / "none.json")], EXIT_IO),
        (["config-resolve", "--exp", str(configs / "child.json"), "--set", "nonsense"], EXIT_USAGE),
        (["run", "--exp", str(configs / "child.json"), "--task", "evaluate"], EXIT_USAGE),
        (["run", "--exp", str(configs / "child.json"), "--task", "train"], EXIT_USAGE),
        (["probe-mp4", str(junk)], EXIT_VALIDATION),
        (["probe-mp4", str(tmp_path / "nothing.mp4")], EXIT_IO),
        (["serve", "--backend", "nope", "--port", "0"], EXIT_USAGE),
        (["rollout", "--url", f"http://127.0.0.1:{_free_port()}", "--goal", "1,1", "--max-steps", "3"], EXIT_IO),
        (["rollout", "--url", "x", "--goal", "1", "--max-steps", "3"], EXIT_USAGE),
        (["convert", "--src", str(src), "--dst", str(tmp_path / "d1"), "--encoder", STUB_ENCODER + " --fail"], EXIT_IO),
        (["convert", "--src", str(src), "--dst", str(tmp_path / "d2"), "--encoder", STUB_ENCODER + " --drop 1"], EXIT_VALIDATION),
        (["convert", "--src", str(src), "--dst", str(tmp_path / "d3"), "--encoder", STUB_ENCODER, "--bounds", "median"], EXIT_USAGE),
        (["verify", "--src", str(src / "episode1"), "--dst", str(tmp_path / "d4")], EXIT_IO),
    ]


def test_exit_code_table(capsys, tmp_path, configs, two_episodes):
    for argv, expected in _error_cases(tmp_path, configs, two_episodes):
        code, out, err = run(capsys, *argv, "--json")
        assert code == expected, (argv, err)
        doc = json.loads(out)
        if "error" in doc:
            assert doc["error"]["exit_code"] == expected
        else:  # a completed validation run reports its findings instead
            assert expected == EXIT_VALIDATION and doc["num_invalid"] > 0
        assert out == canonical.dumps(doc) + "\n"
        code, out, err = run(capsys, *argv)
        assert code == expected
        assert err


def test_serve_port_in_use(capsys):
    with _busy_port() as s:
        code, out, err = run(capsys, "serve", "--backend", "zero", "--port", str(s.getsockname()[1]), "--json")
    assert code == EXIT_IO
    assert json.loads(out)["error"]["code"] == "PortInUse"


def test_serve_and_rollout_processes(tmp_path):
    env = dict(os.environ)
    proc = subprocess.Popen(
        [sys.executable, "-m", "dexkit", "serve", "--backend", "pcontrol", "--port", "0", "--json"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env,
    )
    try:
        url = json.loads(proc.stdout.readline())["url"]
        record = tmp_path / "traj.jsonl"
        done = subprocess.run(
            [sys.executable, "-m", "dexkit", "rollout", "--url", url, "--goal", "0.5,0.5", "--start", "0,0",
             "--chunk", "4", "--max-steps", "10", "--record", str(record), "--json"],
            capture_output=True, text=True, timeout=60,
        )
        assert done.returncode == 0, done.stderr
        assert json.loads(done.stdout)["steps_taken"] == 7
        assert len(record.read_text().splitlines()) == 7
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
