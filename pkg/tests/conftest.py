import time

import numpy as np
import pytest

from geoxray.family import fan_family, wall_family
from geoxray.manifold import euclidean_disc

ACCEPTANCE = []


class Recorder:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, name, capsys):
        self.name = name
        self.capsys = capsys
        self.t0 = time.perf_counter()
        self.checks = []

    def check(self, label, value, op, bound):
        ok = bool({"<=": value <= bound, ">=": value >= bound, ">": value > bound, "<": value < bound}[op])
        self.checks.append((label, value, op, bound, ok))
        return ok

    def finish(self, budget):
        dt = time.perf_counter() - self.t0
        self.check("runtime [s]", dt, "<=", budget)
        ok = all(c[-1] for c in self.checks)
        detail = "; ".join(f"{lab} = {val:.3e} {op} {b:g}" for lab, val, op, b, _ in self.checks)
        line = f"{'PASS' if ok else 'FAIL'} {self.name} ({dt:.2f} s): {detail}"
        ACCEPTANCE.append(line)
        with self.capsys.disabled():
            print("\n" + line)
        return ok, line


@pytest.fixture
def criterion(capsys):
    def make(name):
        return Recorder(name, capsys)
    return make


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def disc():
    return euclidean_disc()


@pytest.fixture(scope="session")
def fan(disc):
    return fan_family(disc)


@pytest.fixture(scope="session")
def gapped_disc():
    return euclidean_disc(outer=1.6, box=1.65)


@pytest.fixture(scope="session")
def gapped(gapped_disc):
    return wall_family(gapped_disc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
