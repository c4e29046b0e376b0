import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

THREE_VIEW_LINE = """{
  "images_1": {"type": "video", "url": "url1", "frame_idx": 21},
  "images_2": {"type": "video", "url": "url2", "frame_idx": 21},
  "images_3": {"type": "video", "url": "url3", "frame_idx": 21},
  "state": [0.1, 0.2],
  "prompt": "open the door",
  "is_robot": true
}"""

STUB_ENCODER = f'"{sys.executable}" "{HERE / "helpers" / "stub_encoder.py"}" {{input_list}} {{fps}} {{output}}'
STUB_DECODER = f'"{sys.executable}" "{HERE / "helpers" / "stub_decoder.py"}" {{input}} {{output_dir}}'


def make_bundle(root: Path, name: str, n_frames: int, n_views: int, *, states=None, actions=None,
                prompt="open the door", size=(16, 16), low_motion=False, seed=0) -> Path:
    """Write a raw episode bundle of PNG frames."""
    d = root / name
    rng = np.random.default_rng(seed)
    h, w = size
    for v in range(1, n_views + 1):
        vd = d / f"images_{v}"
        vd.mkdir(parents=True)
        base = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        for i in range(n_frames):
            if low_motion:
                img = base.copy()
                r = (i * 2) % (h - 4)
                img[r:r + 4, 4:8] = 255
            else:
                img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            Image.fromarray(img).save(vd / f"{i:06d}.png")
    if states is None:
        states = [[0.1, 0.2] for _ in range(n_frames)]
    (d / "states.json").write_text(json.dumps(states))
    if actions is not None:
        (d / "actions.json").write_text(json.dumps(actions))
    (d / "prompt.txt").write_text(prompt + "\n")
    return d


@pytest.fixture
def three_view_line() -> str:
    return THREE_VIEW_LINE


@pytest.fixture
def stub_encoder() -> str:
    return STUB_ENCODER


@pytest.fixture
def stub_decoder() -> str:
    return STUB_DECODER


_ACCEPTANCE: dict[int, tuple[str, bool, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    _ACCEPTANCE[number] = (title, report.passed, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, duration = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({duration:.2f}s)")
