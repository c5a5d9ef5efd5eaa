"""Compiled kernels must agree with the numpy fallback: bitwise for
integer/boolean outputs, to float tolerance where transcendentals differ."""

import numpy as np
import pytest

from ddxplan._core import BACKEND, fallback

speedups = pytest.importorskip(
    "ddxplan._core._speedups", reason="compiled kernels not built"
)


def test_backend_reports_a_known_name():
    assert BACKEND in ("python", "compiled")


def test_gae_scan_bitwise_equal():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 64))
        rewards = rng.normal(size=n)
        values = rng.normal(size=n)
        dones = (rng.random(n) < 0.2).astype(float)
        dones[-1] = 1.0
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        a = fallback.gae_scan(rewards, values, dones, gamma, lam)
        b = speedups.gae_scan(rewards, values, dones, gamma, lam)
        assert np.array_equal(a, b)


def test_masked_softmax_close_and_same_support():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        logits = rng.normal(scale=5.0, size=n)
        mask = rng.random(n) < 0.5
        if not mask.any():
            mask[int(rng.integers(n))] = True
        a = fallback.masked_softmax_1d(logits, mask)
        b = speedups.masked_softmax_1d(logits, mask)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-300)
        assert ((a == 0.0) == (b == 0.0)).all()
        assert abs(b.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        speedups.masked_softmax_1d(np.zeros(3), np.zeros(3, dtype=bool))


def test_categorical_sample_identical_indices():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(1, 30))
        probs = np.zeros(n)
        support = rng.random(n) < 0.6
        if not support.any():
            support[0] = True
        probs[support] = rng.random(int(support.sum()))
        probs /= probs.sum()
        u = float(rng.random())
        a = fallback.categorical_sample(probs, u)
        b = speedups.categorical_sample(probs, u)
        assert a == b
        assert probs[b] > 0.0
    # boundary draws
    probs = np.array([0.25, 0.0, 0.75])
    for u in (0.0, 0.2499999999, 0.25, 0.999999999999):
        assert fallback.categorical_sample(probs, u) == speedups.categorical_sample(probs, u)


def test_action_mask_bitwise_equal():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n_first = int(rng.integers(1, 6))
        children = int(rng.integers(0, 5))
        m = n_first * (1 + children)
        parent_index = np.full(m, -1, dtype=np.int64)
        for j in range(n_first, m):
            parent_index[j] = (j - n_first) % n_first
        asked = rng.random(m) < 0.4
        triplets = np.zeros(3 * m)
        for j in range(m):
            triplets[3 * j + int(rng.integers(3))] = 1.0
        a = fallback.action_mask(asked, triplets, parent_index)
        b = speedups.action_mask(asked, triplets, parent_index)
        assert a.dtype == b.dtype == np.bool_
        assert np.array_equal(a, b)


def test_forced_fallback_env_var():
    import subprocess
    import sys

    code = (
        "import ddxplan; print(ddxplan.BACKEND)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True,
        text=True,
        env={"DDXPLAN_PURE_PYTHON": "1", "PYTHONPATH": "src", "PATH": "/usr/bin:/bin"},
        check=True,
    )
    assert out.stdout.strip() == "python"
