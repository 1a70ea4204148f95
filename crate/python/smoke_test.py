"""Smoke test for the `accept` extension module.

Build and install first:  maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/accept-*.whl
Then run:  python python/smoke_test.py
"""

import math

import numpy as np

import accept


def check_budget():
    assert accept.validate_partition(768, 24) == 32
    assert accept.solve_rank(46080, 768, 60, 24) == 20
    assert accept.param_count(20, 768, 60, 24) == 44160
    assert accept.param_count(24, 768, 256, 2) == 30720
    assert accept.codeword_capacity(20, 24) == 20**24
    try:
        accept.validate_partition(10, 3)
    except ValueError:
        pass
    else:
        raise AssertionError("uneven partition accepted")


def check_compose():
    positions, d, k, r = 5, 12, 3, 4
    codebook, weights = accept.init_random(positions, d, k, r, seed=7)
    t = d // k
    c = np.array(codebook.entries).reshape(k, r, t)
    w = np.array(weights.entries).reshape(positions, k, r)
    want = np.einsum("ikj,kjt->ikt", w, c).reshape(positions, d)
    got = np.array(accept.compose(codebook, weights))
    assert got.shape == (positions, d)
    assert np.max(np.abs(got - want)) <= 1e-12
    assert codebook.codeword(1, 2) == list(c[1, 2])

    # K=1 with one-hot weights gives back the codewords
    cb = accept.Codebook(1, 3, 6, list(range(18)))
    rows = accept.compose(cb, accept.WeightSet.one_hot(3, 1))
    assert rows == [[float(v) for v in range(6 * i, 6 * i + 6)] for i in range(3)]


def check_tasks_and_metrics():
    data = accept.gen_task("pair-match", 16, 7, 100, 3)
    assert len(data) == 100
    labels = [label for _, label in data]
    assert sum(labels) == 50
    assert accept.metric("accuracy", labels, labels) == 1.0
    assert accept.metric("accuracy", [1 - y for y in labels], labels) == 0.0

    reg = accept.gen_task("count-regression", 16, 7, 10, 3)
    assert all(isinstance(label, float) for _, label in reg)

    mean, std, n = accept.fewshot_report([0.5, 0.75, 1.0])
    assert n == 3 and mean == 0.75
    assert math.isclose(std, np.std([0.5, 0.75, 1.0]), rel_tol=1e-15)


if __name__ == "__main__":
    check_budget()
    check_compose()
    check_tasks_and_metrics()
    print("python smoke test passed")
