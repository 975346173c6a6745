import functools
import time

import pytest

_RESULTS = {}


def criterion(number, title):
    """Record the outcome of an acceptance test for the end-of-run summary."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                note = fn(*args, **kwargs)
            except BaseException as exc:
                _RESULTS[number] = (title, False, "%s: %s" % (type(exc).__name__, str(exc).splitlines()[0] if str(exc) else ""),
                                    time.perf_counter() - t0)
                raise
            _RESULTS[number] = (title, True, note or "", time.perf_counter() - t0)
        return run
    return wrap


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, note, secs = _RESULTS[number]
        terminalreporter.write_line("criterion %2d %s  %-44s %6.1fs  %s"
                                    % (number, "PASS" if ok else "FAIL", title, secs, note))
