import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from querycrop.env import EnvConfig, generate_instance  # noqa: E402
from querycrop.episode import Episode  # noqa: E402
from querycrop.policy import build_anchors  # noqa: E402


@pytest.fixture(scope="session")
def anchors():
    return build_anchors(16, 16)


@pytest.fixture(scope="session")
def episodes(anchors):
    cfg = EnvConfig()
    return [Episode.from_instance(generate_instance(cfg, s), anchors) for s in range(12)]


@pytest.fixture(scope="session")
def clean_cfg():
    return EnvConfig(noise_in=0.0, noise_emb=0.0, noise_q=0.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
