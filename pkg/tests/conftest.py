import json
import os

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", deadline=None, max_examples=60)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from dxnat.geodata import RoadSegment, SegmentSet


@pytest.fixture
def write_lines(tmp_path):
    def _write(name, lines):
        p = tmp_path / name
        p.write_text("".join(l + "\n" for l in lines))
        return p
    return _write


@pytest.fixture
def seg_record():
    def _rec(key, points, limit=45):
        return json.dumps({"tmc_key": key, "speed_limit_mph": limit, "points": points})
    return _rec


@pytest.fixture
def small_segments():
    return SegmentSet((
        RoadSegment("129+00001", 45, ((36.150, -86.810), (36.155, -86.805))),
        RoadSegment("129+00002", 35, ((36.148, -86.811), (36.148, -86.803), (36.157, -86.803))),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``criterion(name, ok, detail)`` prints and records one pass/fail line.
    Known, documented failures are tagged XFAIL instead of FAIL."""
    def _record(name, ok, detail="", expected_failure=False):
        tag = "PASS" if ok else ("XFAIL" if expected_failure else "FAIL")
        line = f"[{tag}] {name}: {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
