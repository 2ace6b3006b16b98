import os
import random

import pytest

from edgechain.channel import KeyPair


@pytest.fixture(scope="session")
def fog_keys():
    return KeyPair.generate()


@pytest.fixture(scope="session")
def other_keys():
    return KeyPair.generate()


def seeded_rng(seed):
    r = random.Random(seed)
    return lambda n: r.randbytes(n)


@pytest.fixture
def rng():
    return seeded_rng(1234)


@pytest.fixture
def urandom():
    return os.urandom


# one line per acceptance criterion, echoed at the end of the run
CRITERIA: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def record_info(name: str, detail: str) -> None:
    CRITERIA.append(f"info  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
