import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from vxf import decoder as D
from vxf import reference
from vxf.model import query_probabilities
from vxf.tensor import Tensor, precision
from vxf.verify import _tiny_model, compare_with_reference


def test_threshold_counts_zero_as_foreground():
    assert D.threshold(np.array([-1e-7, 0.0, 2.0])).tolist() == [0, 1, 1]


def test_zero_queries_give_all_foreground_coarse_mask():
    logits, Z = D.coarse_predict(Tensor(np.zeros((3, 4))), Tensor(np.random.default_rng(0).normal(size=(10, 4))))
    assert (logits.data == 0).all() and (Z == 1).all()


def test_coarse_predict_rejects_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        D.coarse_predict(Tensor(np.zeros((3, 4))), Tensor(np.zeros((10, 5))))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 3), st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2 ** 31))
def test_resample_mask_matches_voxel_loop(src, dst, seed):
    Z = (np.random.default_rng(seed).random((2, int(np.prod(src)))) < 0.5).astype(np.uint8)
    np.testing.assert_array_equal(D.resample_mask(Z, src, dst), reference.nearest_resize(Z, src, dst))


def test_resample_halving_picks_even_voxels():
    vol = np.arange(64).reshape(1, 4, 4, 4)
    out = D.resample_mask(vol.reshape(1, -1), (4, 4, 4), (2, 2, 2)).reshape(2, 2, 2)
    np.testing.assert_array_equal(out, vol[0, ::2, ::2, ::2])


def test_attention_bias_and_empty_rows():
    bias, empty = D.attention_bias(np.array([[1, 0, 1], [0, 0, 0]]), np.float64)
    assert bias[0].tolist() == [0.0, -np.inf, 0.0]
    assert bias[1].tolist() == [0.0, 0.0, 0.0]
    assert empty.tolist() == [False, True]


def _attn_fixture(seed, N=3, V=7, d=4):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(N, d))), Tensor(rng.normal(size=(V, d))),
            *[Tensor(rng.normal(size=(d, d))) for _ in range(3)])


def test_cross_attention_matches_formula():
    with precision(np.float64):
        P, feats, wq, wk, wv = _attn_fixture(1)
        pos = Tensor(np.random.default_rng(2).normal(size=P.shape))
        Z = np.array([[1, 0, 0, 1, 1, 0, 0], [0] * 7, [1] * 7], dtype=np.uint8)
        got = D.cross_attend(P, feats, wq, wk, wv, pos=pos, mask=Z).data
        ref = reference.masked_update(P.data, feats.data, wq.data, wk.data, wv.data, pos.data, Z)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_single_foreground_key_takes_all_weight():
    with precision(np.float64):
        P, feats, wq, wk, wv = _attn_fixture(3, N=1)
        Z = np.zeros((1, 7), dtype=np.uint8)
        Z[0, 4] = 1
        rec = []
        out = D.cross_attend(P, feats, wq, wk, wv, mask=Z, record=rec)
    np.testing.assert_array_equal(rec[0]["weights"][0], Z[0].astype(float))
    np.testing.assert_allclose(out.data, P.data + feats.data[4] @ wv.data, atol=1e-12)


def test_empty_row_falls_back_to_unmasked():
    with precision(np.float64):
        P, feats, wq, wk, wv = _attn_fixture(4)
        plain = D.cross_attend(P, feats, wq, wk, wv).data
        empty = D.cross_attend(P, feats, wq, wk, wv, mask=np.zeros((3, 7), dtype=np.uint8)).data
    np.testing.assert_array_equal(plain, empty)


def _models(**kw):
    with precision(np.float64):
        return _tiny_model(seed=3, **kw)


def test_refine_returns_T_plus_one_snapshots():
    for T in (1, 2, 4):
        model = _models(num_layers=T)
        with precision(np.float64):
            snaps = model.forward(np.random.default_rng(T).normal(size=(8, 8, 8, 1))).snapshots
        assert len(snaps) == T + 1
        assert all(s.mask_logits.shape == (4, 512) and s.O.shape == (4, 3) for s in snaps)
        assert (snaps[0].Z == 1).all()


def test_c2f_off_equals_all_ones_mask(monkeypatch):
    image = np.random.default_rng(5).normal(size=(8, 8, 8, 1))
    with precision(np.float64):
        off = _models(c2f=False)
        on = _models(c2f=True)
        for p in (*off.decoder.parameters(), *on.decoder.parameters()):
            p.data = p.data * 10
        ref = [s.mask_logits.data for s in off.forward(image).snapshots]
        monkeypatch.setattr(D, "resample_mask", lambda Z, src, dst: np.ones((Z.shape[0], int(np.prod(dst))),
                                                                             dtype=np.uint8))
        got = [s.mask_logits.data for s in on.forward(image).snapshots]
    for a, b in zip(ref, got):
        np.testing.assert_array_equal(a, b)


def test_c2f_masks_change_the_result():
    image = np.random.default_rng(6).normal(size=(8, 8, 8, 1))
    with precision(np.float64):
        off, on = _models(c2f=False), _models(c2f=True)
        for p in (*off.decoder.parameters(), *on.decoder.parameters()):
            p.data = p.data * 25
        a = off.forward(image).snapshots[-1].mask_logits.data
        b = on.forward(image).snapshots[-1].mask_logits.data
    assert not np.allclose(a, b)


def test_stage_choice():
    multi = _models(num_layers=5)
    assert [multi.decoder.stage_index(t) for t in range(5)] == [0, 1, 0, 1, 0]
    single = _models(num_layers=3, multiscale=False)
    assert [single.decoder.stage_index(t) for t in range(3)] == [1, 1, 1]
    with precision(np.float64):
        pyr = single.unet(Tensor(np.zeros((8, 8, 8, 1))))
    _, grid = single.decoder.project_stage(pyr, 2)
    assert grid == (4, 4, 4)


@pytest.mark.parametrize("kw", [
    dict(), dict(query_extras=False), dict(pos_every_layer=False), dict(self_attn_first=False),
    dict(multiscale=False), dict(c2f=False), dict(num_layers=4, num_queries=6),
])
def test_decoder_matches_numpy_reference(kw):
    with precision(np.float64):
        model = _tiny_model(seed=9, **kw)
        for p in model.decoder.parameters():
            p.data = p.data * 20
        image = np.random.default_rng(10).normal(size=(8, 8, 8, 1))
        assert compare_with_reference(model, image) < 1e-8


def test_query_extras_off_keeps_only_cross_weights():
    lean, full = _models(query_extras=False), _models()
    assert set(dict(lean.decoder.layers[0].named_parameters())) == {"cross.w_q", "cross.w_k", "cross.w_v"}
    assert len(dict(full.decoder.layers[0].named_parameters())) > 3


def test_decoder_config_validation():
    with pytest.raises(ValueError, match="queries"):
        D.DecoderConfig(num_queries=2, num_classes=4)
    with pytest.raises(ValueError, match="layer"):
        D.DecoderConfig(num_layers=0)


def test_classify_ties_go_to_lowest_class():
    _, labels = D.classify(Tensor(np.array([[1.0, 1.0, 1.0]])), Tensor(np.eye(3)))
    assert labels.tolist() == [0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2 ** 31))
def test_query_sum_voxel_total_equals_mask_sum(N, K, seed):
    rng = np.random.default_rng(seed)
    logits, O = rng.normal(size=(N, 27)) * 3, rng.normal(size=(N, K)) * 3
    prob = query_probabilities(logits, O, (3, 3, 3), "soft", "query_sum")
    np.testing.assert_allclose(prob.sum(axis=0).ravel(), expit(logits).sum(axis=0), atol=1e-5)
    no_obj = query_probabilities(logits, O, (3, 3, 3), "soft", "no_object")
    np.testing.assert_array_equal(no_obj[1:], prob[1:])
    assert (no_obj[0] >= 0).all()


def test_binary_mode_counts_votes():
    logits = np.array([[1.0, -1.0], [2.0, 3.0]])
    O = np.array([[0.0, 5.0, 0.0], [0.0, 0.0, 5.0]])
    prob = query_probabilities(logits, O, (1, 1, 2), "binary", "query_sum").reshape(3, 2)
    assert prob.tolist() == [[0, 0], [1, 0], [1, 1]]
    with pytest.raises(ValueError):
        query_probabilities(logits, O, (1, 1, 2), "hard")
