"""Acceptance criteria, one test and one printed verdict line per criterion.

Tolerances and run sizes are the acceptance settings; nothing is relaxed.
Run directly (``python3 tests/test_acceptance.py``) to print the lines
without pytest.
"""

from __future__ import annotations

import sys

import pytest

from dynkin_filter import checks as ck
from dynkin_filter import vi_solver as vs
from dynkin_filter.model_core import validate_params

CASE1 = (0.08, 0.05, 0.3, 1.0, 2.0)
CASE4 = (0.08, 0.02, 0.3, 1.0, 0.1)

pytestmark = pytest.mark.acceptance


def _solved(params):
    p = validate_params(*params)
    s = vs.solve(p)
    return p, s, vs.extract_boundaries(s)


def criterion_1():
    return [ck.complete_info_consistency(ck.desk_params(), n_z=400, n_y=200, tol=1e-2, max_runtime=120.0)]


def criterion_2():
    _, s, _ = _solved(ck.DESK)
    return [ck.edge_agreement(s, tol=5e-3)]


def criterion_3():
    return [ck.root_residuals(tol=1e-8, max_runtime=10.0)]


def criterion_4():
    out = []
    for params in (ck.DESK, ck.STRONG_NEGATIVE_K, CASE1, CASE4):
        _, s, fb = _solved(params)
        res = ck.geometry(s, fb)
        res.name = f"geometry[{','.join(f'{v:g}' for v in params)}]"
        out.append(res)
    return out


def criterion_5():
    return [ck.truncation_ladder(ck.desk_params(), levels=(2, 4, 8, 16), tol=1e-3)]


def criterion_6():
    return [ck.filter_identity(ck.desk_params(), dts=(1e-3, 5e-4, 2.5e-4), n_paths=1000, band=(1.5, 3.0), max_runtime=60.0)]


def criterion_7():
    p, s, fb = _solved(ck.DESK)
    return [ck.martingale(p, s, fb, ys=(0.3, 0.5, 0.7), checkpoints=(0.25, 0.5, 1.0), n_paths=100_000)]


def criterion_8():
    out = []
    for params in (ck.DESK, ck.STRONG_NEGATIVE_K):
        p, s, fb = _solved(params)
        out.append(ck.saddle(p, s, fb, shifts=ck.SHIFTS, n_paths=100_000, max_runtime=600.0))
    return out


def criterion_9():
    return [ck.smoothfit_decay(ck.desk_params(), n_ys=(101, 201, 401, 801), band=(1.4, 2.8))]


def criterion_10():
    p, _, fb = _solved(ck.DESK)
    return [ck.regularity(p, fb, dt=1e-4, budget=0.05)]


CRITERIA = {
    1: ("complete-information consistency", criterion_1),
    2: ("edge value agreement", criterion_2),
    3: ("root residuals", criterion_3),
    4: ("geometry suite", criterion_4),
    5: ("truncation ladder", criterion_5),
    6: ("filter identity", criterion_6),
    7: ("martingale characterization", criterion_7),
    8: ("saddle verification", criterion_8),
    9: ("smooth-fit decay", criterion_9),
    10: ("boundary regularity", criterion_10),
}


def verdict_line(number: int, results) -> str:
    title = CRITERIA[number][0]
    ok = all(r.passed for r in results)
    parts = "; ".join(r.line() for r in results)
    return f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title}: {parts}"


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, acceptance_lines):
    results = CRITERIA[number][1]()
    line = verdict_line(number, results)
    acceptance_lines.append(line)
    print(line)
    assert all(r.passed for r in results), line


def main() -> int:
    failed = 0
    for number in sorted(CRITERIA):
        results = CRITERIA[number][1]()
        print(verdict_line(number, results), flush=True)
        failed += not all(r.passed for r in results)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
