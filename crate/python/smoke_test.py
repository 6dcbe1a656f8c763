"""Smoke test for the Python bindings: build with
`pip install -e crates/py --no-build-isolation`, then run this file."""

import math

import bdsde

CONFIG = """
[problem]
name = "bsb_quadratic"
backend = "dp"

[grid]
horizon = 1.0
n_steps = 64
"""


def main():
    problems = bdsde.list_problems()
    assert "bsb_quadratic" in problems and "flow_linear" in problems, problems

    record = bdsde.run(CONFIG)
    y0 = next(r for r in record["results"] if r["quantity"] == "y0")
    assert record["passed"], record
    assert abs(y0["value"] - 3.0) < 0.06, y0
    assert math.isclose(bdsde.bsb_value([0.0, 0.0, 1.0], 0.5, 2.0, 1.0, 1.0), 3.0)

    study = bdsde.study(CONFIG.replace("n_steps = 64", "n_steps = 16"), 2)
    assert abs(study["fitted_order"] - 1.0) < 0.3, study

    suite = bdsde.property_suite("doss-identities", 1)
    assert suite["passed"] and suite["violations"] == 0, suite

    try:
        bdsde.run("[problem]\nname = 'bsb_quadratic'\nbackend = 'dp'\n")
    except ValueError as e:
        assert "grid" in str(e)
    else:
        raise AssertionError("config without [grid] was accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
