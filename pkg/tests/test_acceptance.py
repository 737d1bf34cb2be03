"""Acceptance criteria, each run at its stated tolerance.

Prints one ``[PASS]``/``[FAIL]`` line per criterion: in the pytest terminal
summary, or directly with ``python3 tests/test_acceptance.py``.
"""

import pytest

from hyperspec import acceptance

RESULTS = {}


@pytest.mark.parametrize("fn", acceptance.ALL, ids=[f"criterion_{k}" for k in range(1, 10)])
def test_criterion(fn):
    res = fn()
    RESULTS[res.number] = res.line()
    print(res.line())
    failed = [f"{c.label}={c.value:.6g} (want {c.target})" for c in res.checks if not c.passed]
    if res.runtime_limit_s is not None and res.runtime_s >= res.runtime_limit_s:
        failed.append(f"runtime {res.runtime_s:.1f} s (want < {res.runtime_limit_s:g} s)")
    assert not failed, "; ".join(failed)


if __name__ == "__main__":
    for r in acceptance.run_all():
        print(r.line())
