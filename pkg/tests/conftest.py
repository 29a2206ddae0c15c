import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from invisnet.cli import main

TINY = Path(__file__).parent / "data" / "tiny.ini"
# development shortcut: point at a finished default-config run instead of training afresh
REUSE_ENV = "INVISNET_REUSE_RUN"


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def logged_seconds(root: Path) -> float:
    total = 0.0
    for line in (root / "run.log").read_text().splitlines():
        _, _, t = line.partition("\t")
        if t.endswith("s"):
            total += float(t[:-1])
    return total


@dataclass
class FullRun:
    root: Path
    seconds: float
    fresh: bool


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete pipeline run at toy sizes, shared by the plumbing tests."""
    root = tmp_path_factory.mktemp("tiny") / "run"
    assert run_cli("run", "--config", TINY, "--run", root) == 0
    return root


@pytest.fixture(scope="session")
def full_run(tmp_path_factory) -> FullRun:
    """The default-config pipeline, trained once per session and timed end to end."""
    reuse = os.environ.get(REUSE_ENV)
    if reuse:
        root = Path(reuse)
        assert (root / "sweep" / "DONE").exists(), f"{root} is not a finished run"
        return FullRun(root, logged_seconds(root), False)
    root = tmp_path_factory.mktemp("full") / "run"
    t0 = time.perf_counter()
    assert run_cli("run", "--run", root) == 0
    return FullRun(root, time.perf_counter() - t0, True)
