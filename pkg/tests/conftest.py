import time
from contextlib import contextmanager

import pytest
from hypothesis import settings

from abn_snn.standin import write_standin_dataset

settings.register_profile("abn", deadline=None, max_examples=60)
settings.load_profile("abn")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def standin_root(tmp_path_factory):
    """N-MNIST-layout stand-in with exactly the nmnist-100 preset's per-class counts."""
    return write_standin_dataset(tmp_path_factory.mktemp("standin"), train_per_class=10, test_per_class=4, seed=1)


@pytest.fixture(scope="session")
def standin_1k_root(tmp_path_factory):
    """Stand-in sized for the nmnist-1k preset (100 train / 20 test per class)."""
    return write_standin_dataset(tmp_path_factory.mktemp("standin1k"), train_per_class=100, test_per_class=20, seed=0)


class Criterion:
    """Collects the verdict of one acceptance criterion.

    Set ``detail`` to the measured values; ``check`` records a failed
    sub-condition without stopping, so the summary line lists every miss.
    Diagnostic runs (``enforce=False``) print their verdict but never fail.
    """

    def __init__(self, name, limit_s):
        self.name, self.limit_s = name, limit_s
        self.detail = ""
        self.misses: list[str] = []

    def check(self, ok, message):
        if not ok:
            self.misses.append(message)
        return ok


@contextmanager
def criterion(name, limit_s=None, tag="PRIMARY", enforce=True):
    c = Criterion(name, limit_s)
    start = time.perf_counter()
    try:
        yield c
    except Exception as exc:
        c.misses.append(f"{type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - start
    if limit_s is not None and elapsed >= limit_s:
        c.misses.append(f"runtime {elapsed:.1f}s >= {limit_s}s")
    verdict = "FAIL" if c.misses else "PASS"
    parts = [p for p in (c.detail, "; ".join(c.misses)) if p]
    line = f"[{tag}] {verdict}  {name}  ({elapsed:.1f}s)" + (f"  {' | '.join(parts)}" if parts else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    if enforce:
        assert not c.misses, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
