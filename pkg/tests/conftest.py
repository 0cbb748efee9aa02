"""Session-wide guards: the whole suite must run with no network access."""

import socket

import pytest


class NetworkBlockedError(RuntimeError):
    pass


_GUARD = {"active": False, "attempts": 0}


@pytest.fixture(scope="session", autouse=True)
def no_network():
    """Refuse every outgoing socket connection for the entire session.

    Offline operation is a hard requirement: everything must work from the
    shipped fixtures. Any code path that tries to dial out fails loudly.
    """

    real_connect = socket.socket.connect

    def guarded(self, *args, **kwargs):
        _GUARD["attempts"] += 1
        raise NetworkBlockedError(f"network access attempted: {args[:1]}")

    socket.socket.connect = guarded
    _GUARD["active"] = True
    try:
        yield _GUARD
    finally:
        socket.socket.connect = real_connect
        _GUARD["active"] = False


@pytest.fixture(scope="session")
def benchmark_reports():
    """One full single-tool benchmark battery, shared across test modules.

    The spread/cut/arrange tasks take minutes per trial, so every test that
    wants battery evidence (success rates, trace invariants, runtimes)
    reads from this single run.
    """
    from doughplan.evaluation import run_benchmark, task_catalog

    catalog = task_catalog()
    tasks = [catalog[name] for name in ("spread", "cut", "arrange")]
    return run_benchmark(tasks, seeds=range(5))
