import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abnvar.optim import GlobalParams, RMSpropConfig, clip_gradients, global_norm, rmsprop_apply, rmsprop_step


def test_zero_gradient_only_decays_average():
    p, v = np.array([1.0, -2.0]), np.array([0.5, 0.0])
    rmsprop_step(p, np.zeros(2), v, 7e-4, 0.99, 1e-8)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_array_equal(v, [0.495, 0.0])


def test_first_step_hand_value():
    p, v = np.array([0.0]), np.array([0.0])
    rmsprop_step(p, np.array([1.0]), v, 7e-4, 0.99, 1e-8)
    assert v[0] == pytest.approx(0.01, rel=1e-15)
    assert p[0] == pytest.approx(-7e-4 / (0.1 + 1e-8), rel=1e-12)
    assert p[0] == pytest.approx(-7e-3, rel=1e-6)


def test_opposite_gradients_return_near_start():
    store = GlobalParams({"w": np.array([0.3])}, config=RMSpropConfig())
    rmsprop_apply(store, {"w": np.array([1.0])}, 1)
    v1 = store.optimizer.sq_avg["w"].copy()
    rmsprop_apply(store, {"w": np.array([-1.0])}, 1)
    v2 = store.optimizer.sq_avg["w"]
    assert v2[0] > v1[0]
    # the second step is shorter (larger v), so the parameter heads back but not all the way
    assert 0.3 - 7e-3 < store.params["w"][0] < 0.3


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.integers(1, 20))
def test_average_stays_non_negative(grad, steps):
    p, v = np.zeros(len(grad)), np.zeros(len(grad))
    g = np.array(grad)
    for i in range(steps):
        rmsprop_step(p, g * (-1) ** i, v, 1e-3, 0.99, 1e-8)
        assert np.all(v >= 0)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_first_step_scale_covariant(g, c):
    """With eps ~ 0 the first step is sign-like: |dp| = lr / sqrt(1 - alpha) whatever the scale."""
    steps = []
    for scale in (1.0, c):
        p, v = np.zeros(1), np.zeros(1)
        rmsprop_step(p, np.array([g * scale]), v, 1e-3, 0.99, 1e-30)
        steps.append(p[0])
    assert steps[0] == pytest.approx(steps[1], rel=1e-9)
    assert abs(steps[0]) <= 1e-3 / np.sqrt(0.01) * (1 + 1e-12)


def test_clip_identity_below_threshold():
    g = {"a": np.array([3.0, 4.0])}
    out, norm = clip_gradients(g, 40.0)
    assert norm == 5.0 and out["a"] is g["a"]


def test_clip_zero():
    out, norm = clip_gradients({"a": np.zeros(3)}, 40.0)
    assert norm == 0.0 and np.all(out["a"] == 0)


def test_clip_halves_norm_80():
    g = {"a": np.array([48.0, 0.0]), "b": np.array([[64.0]])}
    out, norm = clip_gradients(g, 40.0)
    assert norm == 80.0
    np.testing.assert_array_equal(out["a"], [24.0, 0.0])
    np.testing.assert_array_equal(out["b"], [[32.0]])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(0.1, 50))
def test_clip_never_increases_and_keeps_direction(vals, max_norm):
    g = {"a": np.array(vals)}
    out, norm = clip_gradients(g, max_norm)
    assert global_norm(out.values()) <= max(norm, 0) * (1 + 1e-12)
    assert global_norm(out.values()) <= max_norm * (1 + 1e-12) or norm <= max_norm
    if norm > 0:
        np.testing.assert_allclose(out["a"] / global_norm(out.values()), g["a"] / norm, atol=1e-12)


def test_clip_disabled():
    g = {"a": np.array([1e6])}
    assert clip_gradients(g, None)[0] is g


def test_store_rejects_non_finite():
    store = GlobalParams({"w": np.ones(2)})
    assert not store.apply_gradients({"w": np.array([np.nan, 0.0])}, 5)
    assert store.optimizer.rejected == 1 and store.global_step == 0 and np.all(store.params["w"] == 1)


def test_store_shape_check():
    store = GlobalParams({"w": np.ones(2)})
    with pytest.raises(ValueError):
        store.apply_gradients({"w": np.ones(3)}, 1)


def test_store_counters_and_snapshot_copy():
    store = GlobalParams({"w": np.ones(2)})
    snap, version = store.snapshot()
    snap["w"][:] = 9.0
    assert np.all(store.params["w"] == 1.0) and version == 0
    store.apply_gradients({"w": np.ones(2)}, 5)
    assert store.global_step == 5 and store.version == 1 and store.verify()


def test_concurrent_updates_consistent():
    store = GlobalParams({"a": np.zeros(64), "b": np.zeros((8, 8))}, config=RMSpropConfig(lr=1e-4))
    errors = []

    def work(seed):
        rng = np.random.default_rng(seed)
        for _ in range(300):
            snap, _ = store.snapshot(verify=True)
            if not all(np.all(np.isfinite(v)) for v in snap.values()):
                errors.append("nan")
            store.apply_gradients({"a": rng.normal(size=64), "b": rng.normal(size=(8, 8))}, 1)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and store.torn == 0 and store.verify()
    assert store.updates == 1200 and store.global_step == 1200
