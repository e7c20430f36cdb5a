"""Freeze exact optimal-transport costs for random small instances.

Two families are written:

* ``general``: uniform random cost matrices in [0, 1], up to 5 x 5. Every LP
  optimum is certified by its dual: u_i + v_j <= C_ij everywhere, complementary
  slackness on the support of the plan, and zero duality gap.
* ``line``: squared cost between random points in [0, 1]. The LP optimum is
  cross-checked against the monotone (northwest-corner) coupling, which is
  optimal for convex costs on a line.

Any check failing beyond 1e-9 aborts the build.

    python tools/build_ot_oracle.py tests/fixtures/ot_instances.json
"""

import json
import sys

import numpy as np
from scipy.optimize import linprog


def lp_solve(a, b, C):
    m, n = C.shape
    A_eq = np.zeros((m + n, m * n))
    for i in range(m):
        A_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_eq[m + j, j::n] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return res


def lp_cost(a, b, C):
    return float(lp_solve(a, b, C).fun)


def certify(a, b, C, res, tol=1e-9):
    m, n = C.shape
    plan = res.x.reshape(m, n)
    duals = res.eqlin.marginals
    u, v = duals[:m], duals[m:]
    slack = C - u[:, None] - v[None, :]
    if slack.min() < -tol:
        raise SystemExit(f"dual infeasible by {slack.min()}")
    if np.abs(slack[plan > tol]).max(initial=0.0) > tol:
        raise SystemExit("complementary slackness violated")
    if abs(float(a @ u + b @ v) - float(res.fun)) > tol:
        raise SystemExit("nonzero duality gap")


def monotone_cost(a, x, b, y):
    ia, ib = np.argsort(x), np.argsort(y)
    a, x, b, y = a[ia].copy(), x[ia], b[ib].copy(), y[ib]
    i = j = 0
    total = 0.0
    while i < len(a) and j < len(b):
        m = min(a[i], b[j])
        total += m * (x[i] - y[j]) ** 2
        a[i] -= m
        b[j] -= m
        if a[i] <= 1e-15:
            i += 1
        if b[j] <= 1e-15:
            j += 1
    return total


def _weights(rng, k):
    w = rng.uniform(0.2, 1.0, k)
    return w / w.sum()


def build_general(n_instances=50, seed=20240613):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        m, n = (int(v) for v in rng.integers(1, 6, size=2))
        a, b = _weights(rng, m), _weights(rng, n)
        C = rng.uniform(0.0, 1.0, (m, n))
        res = lp_solve(a, b, C)
        certify(a, b, C, res)
        out.append({"a": a.tolist(), "b": b.tolist(), "cost": C.tolist(), "exact": float(res.fun)})
    return out


def build_line(n_instances=50, seed=20240614):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        m, n = (int(v) for v in rng.integers(2, 6, size=2))
        a, b = _weights(rng, m), _weights(rng, n)
        x = rng.uniform(0.0, 1.0, m)
        y = rng.uniform(0.0, 1.0, n)
        C = (x[:, None] - y[None, :]) ** 2
        exact = lp_cost(a, b, C)
        check = monotone_cost(a, x, b, y)
        if abs(exact - check) > 1e-9:
            raise SystemExit(f"LP and monotone coupling disagree: {exact} vs {check}")
        out.append({"a": a.tolist(), "b": b.tolist(), "x": x.tolist(), "y": y.tolist(), "exact": exact})
    return out


if __name__ == "__main__":
    path = sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/ot_instances.json"
    with open(path, "w") as fh:
        json.dump({"eps": 0.005, "general": build_general(), "line": build_line()}, fh, indent=1)
    print(f"wrote {path}")
