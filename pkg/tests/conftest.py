import json

import numpy as np
import pytest

from iagaze.data import Fixation, FixationSet, HOISample
from iagaze.synthetic import make_corpus, write_corpus

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def sample():
    return HOISample("s0", "img.png", 640, 480, (10, 20, 200, 400), (300, 100, 500, 300), "bicycle", "ride")


@pytest.fixture
def record_json():
    def make(**over):
        obj = {
            "sample_id": "s0", "image_path": "img.png", "width": 640, "height": 480,
            "human_box": [10, 20, 200, 400], "object_box": [300, 100, 500, 300],
            "object_label": "bicycle", "interaction_label": "ride",
            "fixations": [{"x": 320.0, "y": 240.0, "observer_id": "a"}],
        }
        obj.update(over)
        return json.dumps(obj)
    return make


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(out, 24, seed=5)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fixset(points, sid="s"):
    return FixationSet(sid, [Fixation(x, y, f"o{i % 2}") for i, (x, y) in enumerate(points)])
