import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vxf.inference import aggregate, plan_windows, worker_count
from vxf.tensor import precision
from vxf.verify import _tiny_model


def test_volume_equal_to_window_gives_one_window():
    plan = plan_windows((32, 32, 32), (32, 32, 32))
    assert plan.origins == [(0, 0, 0)]


def test_half_overlap_origins_on_64():
    plan = plan_windows((64, 32, 40), (32, 32, 32), 0.5)
    assert sorted({o[0] for o in plan.origins}) == [0, 16, 32]
    assert sorted({o[1] for o in plan.origins}) == [0]
    assert sorted({o[2] for o in plan.origins}) == [0, 8]  # last window clamped to the edge
    assert plan.origins == sorted(plan.origins)


def test_short_axis_is_padded():
    plan = plan_windows((10, 32, 32), (16, 16, 16))
    assert plan.padded == (16, 32, 32)


@pytest.mark.parametrize("window", [(0, 8, 8), (8, -1, 8)])
def test_non_positive_window_rejected(window):
    with pytest.raises(ValueError, match="window"):
        plan_windows((16, 16, 16), window)


def test_bad_overlap_rejected():
    with pytest.raises(ValueError, match="overlap"):
        plan_windows((16, 16, 16), (8, 8, 8), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 40)] * 3), st.tuples(*[st.integers(1, 16)] * 3),
       st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_every_voxel_is_covered(extents, window, overlap):
    plan = plan_windows(extents, window, overlap)
    cover = plan.coverage()
    assert (cover[:extents[0], :extents[1], :extents[2]] >= 1).all()
    for o in plan.origins:
        assert all(0 <= a and a + w <= p for a, w, p in zip(o, window, plan.padded))


def _const_fn(K=3):
    def fn(crop):
        return np.broadcast_to(crop[..., 0], (K,) + crop.shape[:3]) * np.arange(1, K + 1)[:, None, None, None]
    return fn


def test_identity_windows_reproduce_the_volume():
    image = np.random.default_rng(0).normal(size=(20, 12, 9, 1))
    prob, _ = aggregate(None, image, plan_windows(image.shape[:3], (8, 8, 8), 0.5), window_fn=_const_fn())
    np.testing.assert_allclose(prob[1], 2 * image[..., 0], atol=1e-12)


def test_identical_window_outputs_average_to_themselves():
    fixed = np.random.default_rng(1).random((2, 8, 8, 8))
    prob, _ = aggregate(None, np.zeros((24, 8, 16)), plan_windows((24, 8, 16), (8, 8, 8), 0.5),
                        window_fn=lambda crop: fixed)
    assert prob.shape == (2, 24, 8, 16)
    assert np.isfinite(prob).all() and (prob >= fixed.min()).all() and (prob <= fixed.max()).all()


def test_aggregation_is_linear():
    rng = np.random.default_rng(2)
    plan = plan_windows((16, 16, 16), (8, 8, 8), 0.5)
    a, b = rng.normal(size=(16, 16, 16, 1)), rng.normal(size=(16, 16, 16, 1))
    fn = _const_fn(2)
    pa, _ = aggregate(None, a, plan, window_fn=fn)
    pb, _ = aggregate(None, b, plan, window_fn=fn)
    pab, _ = aggregate(None, 2 * a - b, plan, window_fn=fn)
    np.testing.assert_allclose(pab, 2 * pa - pb, atol=1e-12)


def test_result_does_not_depend_on_workers():
    rng = np.random.default_rng(3)
    image = rng.normal(size=(16, 16, 16, 1))
    plan = plan_windows((16, 16, 16), (8, 8, 8), 0.5)

    def noisy(crop):
        return np.stack([np.sin(crop[..., 0] * 3.7), np.cos(crop[..., 0]) * 1e-3])

    serial, ls = aggregate(None, image, plan, window_fn=noisy, workers=1)
    pooled, lp = aggregate(None, image, plan, window_fn=noisy, workers=4)
    np.testing.assert_array_equal(serial, pooled)
    np.testing.assert_array_equal(ls, lp)


def test_labels_are_argmax_with_low_index_ties():
    prob, labels = aggregate(None, np.zeros((8, 8, 8)), plan_windows((8, 8, 8), (8, 8, 8)),
                             window_fn=lambda crop: np.ones((3,) + crop.shape[:3]))
    assert (labels == 0).all()


def test_plan_volume_mismatch_rejected():
    with pytest.raises(ValueError, match="plan was made"):
        aggregate(None, np.zeros((8, 8, 8)), plan_windows((16, 8, 8), (8, 8, 8)), window_fn=lambda c: c)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("VXF_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("VXF_THREADS", "zero")
    with pytest.raises(ValueError, match="VXF_THREADS"):
        worker_count()
    monkeypatch.delenv("VXF_THREADS")
    assert worker_count() == 1


@pytest.mark.parametrize("mask_mode", ["soft", "binary"])
def test_query_sum_stitched_total_equals_sigmoid_sum(mask_mode):
    with precision(np.float64):
        model = _tiny_model()
        image = np.random.default_rng(4).normal(size=(8, 8, 8, 1))
        prob, _ = aggregate(model, image, plan_windows((8, 8, 8), (8, 8, 8)), mask_mode=mask_mode,
                            background="query_sum")
        logits = model.forward(image).snapshots[-1].mask_logits.data
    expected = 1 / (1 + np.exp(-logits)) if mask_mode == "soft" else (logits >= 0).astype(float)
    np.testing.assert_allclose(prob.sum(axis=0).ravel(), expected.sum(axis=0), atol=1e-5)


def test_real_model_stitching_on_odd_volume():
    with precision(np.float64):
        model = _tiny_model("encoder_only")
        image = np.random.default_rng(5).normal(size=(12, 8, 10, 1))
        prob, labels = aggregate(model, image, plan_windows((12, 8, 10), (8, 8, 8), 0.5))
    assert prob.shape == (3, 12, 8, 10) and labels.shape == (12, 8, 10)
    np.testing.assert_allclose(prob.sum(axis=0), 1.0, atol=1e-10)
