"""Self-checks run by ``vxf verify``.

Each suite compares an implementation against an independent oracle
(finite differences, brute force, a direct formula) and raises
``AssertionError`` on a mismatch.  ``inject_fault`` swaps in a known-bad
component so the suites can be shown to catch it.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import time
import traceback
from pathlib import Path

import numpy as np
from scipy.special import softmax as scipy_softmax

from vxf import decoder as decoder_mod
from vxf import functional as F
from vxf.gradcheck import check_gradients
from vxf.tensor import Tensor, make_result, precision

GRAD_TOL = 1e-4


# ---------------------------------------------------------------- faults
def _naive_softmax(x: Tensor) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(x.data)
        out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (x,), backward, "softmax")


def _unmasked_bias(mask, dtype):
    return np.zeros(mask.shape, dtype=dtype), ~mask.astype(bool).any(axis=1)


FAULTS = {
    "softmax-no-max-sub": (F, "softmax_lastdim", _naive_softmax),
    "mask-bias-zero": (decoder_mod, "attention_bias", _unmasked_bias),
}


@contextlib.contextmanager
def inject_fault(name: str | None):
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {sorted(FAULTS)}")
    module, attr, replacement = FAULTS[name]
    original = getattr(module, attr)
    setattr(module, attr, replacement)
    try:
        yield
    finally:
        setattr(module, attr, original)


# ---------------------------------------------------------------- suites
def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def gradient_cases(rng: np.random.Generator) -> dict:
    """Name -> (loss closure, parameters); every closure rebuilds its graph."""
    from vxf.losses import GroundTruthSegments, hybrid_seg_loss, matching_loss

    cases = {}
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    cases["add_mul"] = (lambda: ((a + b) * a * w).sum(), [a, b])
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    cases["div_log_sqrt_exp"] = (lambda: ((a / pos) + F.log(pos) * F.sqrt(pos) + F.exp(a * 0.3)).sum(), [a, pos])
    m1, m2 = _param(rng, 4, 5), _param(rng, 5, 3)
    wm = Tensor(rng.normal(size=(4, 3)))
    cases["matmul"] = (lambda: ((m1 @ m2) * wm).sum(), [m1, m2])
    x = _param(rng, 4, 6)
    wx = Tensor(rng.normal(size=(4, 6)))
    cases["activations"] = (lambda: ((F.sigmoid(x) + F.gelu(x) + F.softplus(x) + F.leaky_relu(x, 0.1)) * wx).sum(),
                            [x])
    cases["softmax"] = (lambda: (F.softmax_lastdim(x * 3.0) * wx).sum(), [x])
    cases["log_softmax"] = (lambda: (F.log_softmax_lastdim(x) * wx).sum(), [x])
    g, bb = _param(rng, 6), _param(rng, 6)
    cases["layer_norm"] = (lambda: (F.layer_norm(x, g, bb) * wx).sum(), [x, g, bb])
    vol = _param(rng, 4, 4, 4, 2)
    gi, bi = _param(rng, 2), _param(rng, 2)
    wv = Tensor(rng.normal(size=(4, 4, 4, 2)))
    cases["instance_norm"] = (lambda: (F.instance_norm(vol, gi, bi) * wv).sum(), [vol, gi, bi])
    kern, bias = _param(rng, 3, 2, 3, 3, 3, scale=0.3), _param(rng, 3)
    wc = Tensor(rng.normal(size=(2, 2, 2, 3)))
    cases["conv3d_stride2"] = (lambda: (F.conv3d(vol, kern, bias, stride=2) * wc).sum(), [vol, kern, bias])
    wu = Tensor(rng.normal(size=(8, 8, 8, 2)))
    cases["upsample_trilinear"] = (lambda: (F.upsample3d(vol, 2) * wu).sum(), [vol])
    cases["upsample_nearest"] = (lambda: (F.upsample3d(vol, 2, mode="nearest") * wu).sum(), [vol])
    k1 = _param(rng, 3, 2, 1, 1, 1)
    w1 = Tensor(rng.normal(size=(4, 4, 4, 3)))
    cases["conv3d_1x1"] = (lambda: (F.conv3d(vol, k1) * w1).sum(), [vol, k1])
    vol1, kk = _param(rng, 4, 4, 4, 1), _param(rng, 2, 1, 3, 3, 3, scale=0.3)
    w2 = Tensor(rng.normal(size=(4, 4, 4, 2)))
    cases["conv3d_single_channel"] = (lambda: (F.conv3d(vol1, kk) * w2).sum(), [vol1, kk])
    t = (rng.random((4, 6)) > 0.5).astype(np.float64)
    cases["bce"] = (lambda: F.bce_with_logits(x, t).mean(), [x])
    cases["sub_neg_scale_pow"] = (lambda: ((a - b) * F.scale(-a, 0.7) + F.power(pos, 1.5)).sum(), [a, b, pos])
    cases["reductions"] = (lambda: (F.sum(x * wx, axis=0) * F.mean(x, axis=0)).sum()
                           + F.mean(x * x, axis=1, keepdims=True).sum(), [x])
    cases["shape_ops"] = (lambda: (F.transpose(F.reshape(x, (6, 4))) * wx).sum()
                          + (F.getitem(x, (slice(None), [0, 2, 2])) ** 2).sum(), [x])
    cases["concat_stack"] = (lambda: (F.concat([a, b], axis=1) ** 2).sum()
                             + (F.stack([a, b], axis=0) * F.stack([w, w], axis=0)).sum(), [a, b])
    cases["relu"] = (lambda: (F.relu(x) * wx).sum(), [x])
    cq, cf = _param(rng, 3, 4), _param(rng, 5, 4)
    cw = [_param(rng, 4, 4, scale=0.5) for _ in range(3)]
    cpos = Tensor(rng.normal(size=(3, 4)))
    cmask = np.array([[1, 1, 0, 0, 1], [0, 0, 0, 0, 0], [0, 1, 1, 1, 0]], dtype=np.uint8)
    wcq = Tensor(rng.normal(size=(3, 4)))
    cases["masked_cross_attention"] = (
        lambda: (decoder_mod.cross_attend(cq, cf, *cw, pos=cpos, mask=cmask) * wcq).sum(), [cq, cf] + cw)

    mask_logits, O = _param(rng, 5, 27), _param(rng, 5, 3)
    masks = np.zeros((2, 27))
    masks[0, :9] = 1
    masks[1, 9:20] = 1
    gt = GroundTruthSegments(masks, np.array([1, 2]))
    cases["matching_loss"] = (lambda: matching_loss(mask_logits, O, gt)[0], [mask_logits, O])
    pix = _param(rng, 3, 27)
    labels = rng.integers(0, 3, size=27)
    cases["hybrid_loss"] = (lambda: hybrid_seg_loss(pix, labels), [pix])
    return cases


def suite_gradients():
    with precision(np.float64):
        for name, (fn, params) in gradient_cases(np.random.default_rng(0)).items():
            err = check_gradients(fn, params, h=1e-6)
            assert err < GRAD_TOL, f"{name}: relative gradient error {err:.2e}"


def suite_softmax_extreme():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        for offset in (0.0, 500.0, -800.0, 1e4):
            logits = rng.normal(size=(3, 7)) * 20 + offset
            out = F.softmax_lastdim(Tensor(logits)).data
            ref = scipy_softmax(logits, axis=-1)
            assert np.isfinite(out).all(), f"softmax non-finite at offset {offset}"
            assert np.allclose(out, ref, rtol=1e-12, atol=1e-15), f"softmax wrong at offset {offset}"
        x = Tensor(rng.normal(size=(2, 5)) + 700.0, requires_grad=True)
        wx = Tensor(rng.normal(size=(2, 5)))
        err = check_gradients(lambda: (F.softmax_lastdim(x) * wx).sum(), [x], h=1e-6)
        assert err < GRAD_TOL, f"softmax gradient at large logits: {err:.2e}"


def brute_force_assignment(cost: np.ndarray) -> float:
    S, N = cost.shape
    best = np.inf
    for cols in itertools.permutations(range(N), S):
        best = min(best, sum(cost[s, n] for s, n in enumerate(cols)))
    return best if S else 0.0


def suite_hungarian(n_trials: int = 300):
    from vxf.losses import hungarian

    rng = np.random.default_rng(2)
    for _ in range(n_trials):
        S = int(rng.integers(0, 6))
        N = int(rng.integers(max(S, 1), 8))
        cost = rng.random((S, N)) if rng.random() < 0.7 else rng.integers(0, 4, size=(S, N)).astype(float)
        got = hungarian(cost)
        oracle = brute_force_assignment(cost)
        assert abs(got.cost - oracle) <= 1e-12, f"cost {got.cost} != brute force {oracle} for {cost.tolist()}"
        assert len({q for q, _ in got.pairs}) == S, "assignment is not injective"


def suite_mask_attention():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        d, N, V = 6, 4, 10
        P = Tensor(rng.normal(size=(N, d)))
        feats = Tensor(rng.normal(size=(V, d)))
        wq, wk, wv = (Tensor(rng.normal(size=(d, d))) for _ in range(3))
        mask = (rng.random((N, V)) > 0.5).astype(np.uint8)
        mask[0] = 0  # forces the unmasked fallback on row 0
        rec = []
        out = decoder_mod.cross_attend(P, feats, wq, wk, wv, mask=mask, record=rec)
        weights = rec[0]["weights"]
        assert np.isfinite(out.data).all(), "masked attention produced non-finite output"
        masked_rows = mask.any(axis=1)
        assert (weights[masked_rows][mask[masked_rows] == 0] == 0).all(), "background keys got attention weight"
        assert np.allclose(weights.sum(axis=1), 1.0), "attention rows do not sum to one"
        full = decoder_mod.cross_attend(P, feats, wq, wk, wv, mask=np.ones((N, V), dtype=np.uint8))
        plain = decoder_mod.cross_attend(P, feats, wq, wk, wv, mask=None)
        assert np.array_equal(full.data, plain.data), "all-ones mask differs from unmasked attention"
        empty = decoder_mod.cross_attend(P, feats, wq, wk, wv, mask=np.zeros((N, V), dtype=np.uint8))
        assert np.array_equal(empty.data, plain.data), "empty-mask fallback differs from unmasked attention"


def suite_conv_head():
    from vxf.unet import flatten_spatial

    rng = np.random.default_rng(4)
    with precision(np.float64):
        for _ in range(5):
            N, d = int(rng.integers(1, 6)), int(rng.integers(1, 7))
            vol = Tensor(rng.normal(size=(3, 4, 5, d)))
            P = Tensor(rng.normal(size=(N, d)))
            logits, Z = decoder_mod.coarse_predict(P, flatten_spatial(vol))
            head = F.conv3d(vol, Tensor(P.data.reshape(N, d, 1, 1, 1)))
            ref = head.data.reshape(-1, N).T
            assert np.abs(logits.data - ref).max() < 1e-6, "coarse prediction differs from a 1x1x1 conv head"
            assert np.array_equal(Z, (ref >= 0).astype(Z.dtype)), "threshold differs from sigmoid >= 0.5"


def _tiny_model(configuration="decoder_only", seed=5, **decoder_kw):
    from vxf.decoder import DecoderConfig
    from vxf.model import ModelConfig, SegmentationModel
    from vxf.unet import UNetConfig

    dec = dict(num_queries=4, num_classes=3, d_dec=8, num_layers=2, num_heads=2)
    dec.update(decoder_kw)
    cfg = ModelConfig(configuration=configuration, crop=(8, 8, 8), num_classes=3,
                      unet=UNetConfig(base_channels=4, depth=2), decoder=DecoderConfig(**dec))
    return SegmentationModel(cfg, seed=seed)


def compare_with_reference(model, image) -> float:
    """Max abs mask-logit difference between ``refine`` and the numpy reference (asserts on structure)."""
    from vxf import reference

    snaps = model.forward(image).snapshots
    Z_ref, logits_ref, O_ref, _ = reference.refine_model(model, image)
    T = model.config.decoder.num_layers
    assert len(snaps) == T + 1 == len(Z_ref), f"expected {T + 1} snapshots, got {len(snaps)}"
    worst = 0.0
    for snap, z, lg in zip(snaps, Z_ref, logits_ref):
        worst = max(worst, float(np.abs(snap.mask_logits.data - lg).max()))
        decided = np.abs(lg) > 1e-9
        assert np.array_equal(snap.Z[decided], z[decided]), "binarized masks differ from the reference"
    worst = max(worst, float(np.abs(snaps[-1].O.data - O_ref).max()))
    return worst


def suite_refinement_reference():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        for extras in (False, True):
            for seed in range(2):
                model = _tiny_model(seed=seed, query_extras=extras, num_layers=3)
                # scale up the weights so the masks are far from trivial
                for p in model.decoder.parameters():
                    p.data = p.data * 25.0
                diff = compare_with_reference(model, rng.normal(size=(8, 8, 8, 1)))
                assert diff < 1e-6, f"refinement differs from the reference by {diff:.2e}"


def suite_sliding_window():
    from vxf.inference import WindowPlan, aggregate, plan_windows

    rng = np.random.default_rng(6)
    with precision(np.float64):
        model = _tiny_model()
        image = rng.normal(size=(8, 8, 8, 1))
        direct = model.predict_window(image)
        prob, labels = aggregate(model, image, plan_windows((8, 8, 8), (8, 8, 8), 0.5))
        assert np.array_equal(prob, direct), "single-window plan differs from the direct forward pass"
        assert np.array_equal(labels, np.argmax(direct, axis=0)), "labels differ from direct argmax"
        twice = WindowPlan((8, 8, 8), (8, 8, 8), (8, 8, 8), (4, 4, 4), [(0, 0, 0), (0, 0, 0)])
        prob2, labels2 = aggregate(model, image, twice)
        assert np.allclose(prob2, direct, rtol=0, atol=1e-15), "averaging identical windows changed the result"
        assert np.array_equal(labels2, labels)
        for _ in range(20):
            ext = tuple(int(e) for e in rng.integers(1, 40, size=3))
            win = tuple(int(w) for w in rng.integers(1, 20, size=3))
            plan = plan_windows(ext, win, float(rng.uniform(0, 0.9)))
            assert (plan.coverage() >= 1).all(), f"plan for {ext}/{win} leaves voxels uncovered"


SUITES = {
    "gradients": suite_gradients,
    "softmax_extreme": suite_softmax_extreme,
    "hungarian": suite_hungarian,
    "mask_attention": suite_mask_attention,
    "conv_head": suite_conv_head,
    "sliding_window": suite_sliding_window,
    "refinement_reference": suite_refinement_reference,
}


def run_suites(fault: str | None = None, only=None, json_out=None, verbose: bool = True) -> bool:
    names = list(SUITES) if not only else list(only)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; known: {sorted(SUITES)}")
    results = []
    with inject_fault(fault):
        for name in names:
            t0 = time.time()
            try:
                SUITES[name]()
                ok, detail = True, ""
            except Exception as exc:  # a failing or crashing suite both count as FAIL
                ok = False
                detail = f"{type(exc).__name__}: {exc}"
                if not isinstance(exc, AssertionError) and verbose:
                    traceback.print_exc()
            results.append({"suite": name, "passed": ok, "seconds": round(time.time() - t0, 3),
                            "detail": detail})
            if verbose:
                print(f"{'PASS' if ok else 'FAIL'} {name} ({results[-1]['seconds']:.2f}s) {detail}".rstrip())
    all_ok = all(r["passed"] for r in results)
    if verbose:
        print(f"{sum(r['passed'] for r in results)}/{len(results)} suites passed")
    if json_out:
        Path(json_out).write_text(json.dumps({"fault": fault, "results": results, "passed": all_ok},
                                             indent=2) + "\n", encoding="utf-8")
    return all_ok
