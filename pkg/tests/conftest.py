import numpy as np
import pytest
import torch

from sganet.annotations import ImageRecord, PointAnnotationSet, SynthConfig, synth_generate

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_records():
    return synth_generate(SynthConfig(num_images=4, image_size=(128, 128), count_range=(5, 15), seed=11))


def make_record(width, height, points, image_id="img", fill=0.5):
    pixels = np.full((height, width, 3), fill, dtype=np.float32)
    return ImageRecord(image_id, pixels, PointAnnotationSet(image_id, width, height, points))


# one "PASS|FAIL <criterion>: <detail>" line per acceptance criterion
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
