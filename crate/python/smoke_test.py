"""Smoke test for the massgrid_py extension.

Build and install with `pip install --no-build-isolation ./crates/py`
(needs maturin), then run `python python/smoke_test.py`.
"""

import json
import math

import massgrid_py as mg


def main() -> None:
    pb = mg.Problem(32, "ramp(p, 0.25, 0.4, 10)", log_factor="smoothstep_bump(p, 0.3, 0.45, 0.3)")
    assert pb.nodes == 32**3
    assert pb.lambda_min() > 0

    direct, variational = pb.mass_direct(), pb.mass_variational()
    assert abs(direct - variational) <= 1e-8 * max(1.0, abs(direct)), (direct, variational)

    # the functional is bounded below by -m
    assert pb.functional_j([0.0] * pb.nodes) >= -direct - 1e-8

    green = pb.green_function()
    assert math.isnan(green[0])
    assert all(g > 0 for g in green[1:])

    flat = mg.Problem(48, "const(0)")
    ball = flat.dirichlet_mass(0.25)
    exact = mg.flat_ball_mass(3, 0.25)
    assert abs(ball - exact) < 0.01 * abs(exact), (ball, exact)

    fam = pb.family("ramp(p, 0.25, 0.45, 1) - smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.15, 1.5)")
    m, m1, m2, lam = fam.derivatives(1.0)
    assert m2 >= 0 and lam > 0

    try:
        mg.Problem(32, "const(1)")
    except mg.ValidationError:
        pass
    else:
        raise AssertionError("a potential not vanishing near p must be rejected")

    try:
        mg.Problem(32, "const(0)").mass_direct()
    except mg.SolverError:
        pass
    else:
        raise AssertionError("f = 0 on the flat torus is not positive")

    checks = mg.verify(["homothety", "cutoff-formula"])
    assert all(passed for _, passed, _ in checks), checks

    cfg = """
[manifold]
dim = 3
resolutions = [32]
flat_radius = 0.25
[potential]
f = "ramp(p, 0.25, 0.4, 10)"
[kernel]
delta = 0.125
[experiment]
kind = "eigen"
"""
    rows = json.loads(mg.run_config(cfg))
    assert rows[0]["lambda_min"] > 0

    print(f"ok: m = {direct:.6f}, Dirichlet ball {ball:.5f} (exact {exact:.5f})")


if __name__ == "__main__":
    main()
