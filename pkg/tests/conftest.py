import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from helpers import write_wav  # noqa: E402


@pytest.fixture
def wav_factory(tmp_path):
    def factory(name, samples, rate=16000, channels=1, sampwidth=2):
        return write_wav(tmp_path / name, samples, rate, channels, sampwidth)
    return factory
