import copy
import functools

import pytest

from pnp_dempc.pnp import design_all
from pnp_dempc.powernet import scenario


@functools.lru_cache(maxsize=None)
def _designed(sid):
    net, sched = scenario(sid)
    design_all(net)
    return net, sched


@pytest.fixture
def designed():
    """``designed(sid)`` returns a private copy of a designed scenario network and its loads."""
    def get(sid):
        net, sched = _designed(sid)
        return copy.deepcopy(net), sched
    return get


ACCEPTANCE = {}


@pytest.fixture
def accept(request):
    """``accept(n, ok, detail)`` records and prints the verdict for acceptance criterion ``n``."""
    def record(n, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
