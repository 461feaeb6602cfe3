"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python crates/py/python/smoke_test.py
"""

import json
import math
import tempfile

import safe_lsoc


def check_filter():
    # one halfspace: project (0, 0) onto u0 >= 1
    assert safe_lsoc.safety_filter([0.0, 0.0], [([1.0, 0.0], 1.0)]) == [1.0, 0.0]
    # already feasible controls pass through unchanged
    assert safe_lsoc.safety_filter([2.0, -1.0], [([1.0, 0.0], 1.0)]) == [2.0, -1.0]
    u = safe_lsoc.safety_filter([0.0, 0.0], [([1.0, 0.0], 1.0), ([0.0, 1.0], 1.0)])
    assert max(abs(a - 1.0) for a in u) < 1e-12, u


def check_weights():
    kernel = [0.02, 0.02, 1e-8, 1e-8]
    w = safe_lsoc.composition_weights([[35, 28, 2, 0], [35, 14, 2, 0]], [35, 21, 2, 0], kernel)
    assert abs(sum(w) - 1.0) < 1e-12 and abs(w[0] - 0.5) < 1e-12, w
    big = safe_lsoc.state_weights(w, [-1.0, -3.0])
    shifted = safe_lsoc.state_weights(w, [9.0, 7.0])
    assert all(abs(a - b) < 1e-12 for a, b in zip(big, shifted))
    assert abs(big[0] - 1.0 / (1.0 + math.exp(-2.0))) < 1e-12
    u = safe_lsoc.composite_control(big, [[1.0, 0.0], [0.0, 1.0]])
    assert abs(u[0] - big[0]) < 1e-12 and abs(u[1] - big[1]) < 1e-12


def check_estimators():
    assert abs(safe_lsoc.log_desirability([1.0, 1.0, 1.0], 0.5) + 2.0) < 1e-12
    r = safe_lsoc.control_weight([[0.05, 0.0], [0.0, 0.025]], 0.02)
    assert abs(r[0][0] - 0.02 / 0.05**2) < 1e-9 and abs(r[1][1] - 0.02 / 0.025**2) < 1e-9


def check_run():
    names = safe_lsoc.bundled_scenarios()
    assert "single_uav" in names, names
    s = safe_lsoc.Scenario.bundled("single_uav")
    doc = json.loads(s.to_json())
    doc["sim"]["max_time"] = 1.0
    short = safe_lsoc.Scenario.from_json(json.dumps(doc))
    a = safe_lsoc.run_task(short, "filtered", 1)
    b = safe_lsoc.run_task(short, "filtered", 1)
    assert a.trajectory_csv() == b.trajectory_csv()
    assert a.steps == 20 and a.safety_violations == 0, a
    with tempfile.TemporaryDirectory() as d:
        files = a.export(d)
        assert len(files) == 2
    print(a, "terminal error", [round(e, 2) for e in a.terminal_error])


if __name__ == "__main__":
    check_filter()
    check_weights()
    check_estimators()
    check_run()
    print("smoke test passed")
