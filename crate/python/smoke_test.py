"""Smoke test for the attnshift_py extension.

Build first:
    cargo build --release -p attnshift-py --features extension-module
    cp target/release/libattnshift_py.so python/attnshift_py.so
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import attnshift_py as a


def close(x, y, tol=1e-12):
    return abs(x - y) <= tol


def main():
    z = [[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]
    c = a.instance_center(z)
    for j in range(2):
        assert close(sum(row[j] for row in c), 0.0)
    assert close(c[0][0], -2.0)

    assert close(a.operator_2_norm([[3.0, 0.0], [0.0, -4.0]]), 4.0, 1e-10)
    assert close(a.operator_2_norm([[1.0, 1.0], [1.0, 1.0]]), 2.0, 1e-10)

    assert a.fine_coarse_len(8, 64, 2) == 64 + 7 * 16
    flops, ctx = a.flop_estimate("ffam", 8, 64, 64, 2)
    full, full_ctx = a.flop_estimate("full", 8, 64, 64)
    assert ctx == 176 and full_ctx == 512
    assert math.isclose(flops / full, 176 / 512)

    try:
        a.flop_estimate("ffam", 8, 64, 64, 3)
    except ValueError as e:
        assert "divisible" in str(e)
    else:
        raise AssertionError("indivisible ratio accepted")

    rep = json.loads(a.verify_json(seed=42))
    assert rep["passed"] is True, rep

    tr = json.loads(a.train_json(mode="stam", steps=3, seed=42))
    assert len(tr["loss_curve"]) == 3
    assert len(tr["config_hash"]) == 16
    print("smoke test passed")


if __name__ == "__main__":
    main()
