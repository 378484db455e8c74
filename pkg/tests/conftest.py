import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vlbias.model import ModelConfig, ToyVLM, default_injections  # noqa: E402
from vlbias.scenes import GenConfig, generate  # noqa: E402


@pytest.fixture(scope="session")
def base_model():
    return ToyVLM(ModelConfig())


@pytest.fixture(scope="session")
def planted_model(base_model):
    return base_model.with_injections(default_injections())


@pytest.fixture(scope="session")
def corpus():
    return generate(GenConfig())


@pytest.fixture(scope="session")
def small_corpus():
    return generate(GenConfig(n_images=300, seed=5))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.lines():
        terminalreporter.write_line(line)
