import numpy as np
import pytest

from zsvd import correct, linalg, select, toynet
from zsvd.correct import CorrectionCfg, Variant
from zsvd.select import BudgetMode


def test_projection_examples(rng):
    d = rng.standard_normal((3, 4))
    np.testing.assert_allclose(correct.project_correction(d, d), d, rtol=1e-14)
    g = np.array([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(correct.project_correction(g, [[0.0, 3.0], [4.0, 5.0]]), 0.0)
    np.testing.assert_array_equal(correct.project_correction(g, [[2.0, 3.0], [4.0, 5.0]]), [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(correct.project_correction(np.zeros((2, 2)), d[:2, :2]), 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_projection_matches_inner_product(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in rng.integers(1, 12, size=2))
    g, d = rng.standard_normal(shape), rng.standard_normal(shape)
    p = correct.project_correction(g, d)
    want = linalg.frob_inner(g, d)
    assert abs(linalg.frob_inner(g, p) - want) <= 1e-10 * max(abs(want), 1e-300)
    # exact scalar multiple of g
    coef = p.flat[np.argmax(np.abs(g))] / g.flat[np.argmax(np.abs(g))]
    np.testing.assert_allclose(p, coef * g, rtol=0, atol=1e-15 * np.abs(p).max())


def test_projection_minimal_norm(rng):
    g, d = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    p = correct.project_correction(g, d)
    target = linalg.frob_inner(g, d)
    for _ in range(50):
        r = rng.standard_normal((5, 4))
        r += (target - linalg.frob_inner(g, r)) / linalg.frob_inner(g, g) * g
        assert np.linalg.norm(p) < np.linalg.norm(r)


def test_variant_edge_cases(rng):
    w, wt, g = (rng.standard_normal((3, 3)) for _ in range(3))
    np.testing.assert_array_equal(correct.variant_update(CorrectionCfg(Variant.ALPHA_BLEND, alpha=1.0), w, wt, g), w)
    np.testing.assert_array_equal(correct.variant_update(CorrectionCfg(Variant.ALPHA_BLEND, alpha=0.0), w, wt, g), wt)
    out = correct.variant_update(CorrectionCfg(Variant.GD_STEP, eta=0.1), w, wt, g)
    np.testing.assert_allclose(out, wt - 0.1 * g)
    np.testing.assert_array_equal(correct.variant_update(CorrectionCfg(Variant.PROJ_DELTA), wt, wt, g), wt)
    pd = correct.variant_update(CorrectionCfg(Variant.PROJ_DELTA), w, wt, g)
    delta = w - wt
    np.testing.assert_allclose(pd - wt, linalg.frob_inner(g, delta) / linalg.frob_inner(delta, delta) * delta)
    pg = correct.variant_update(CorrectionCfg(Variant.PROJ_GRAD), w, wt, delta)
    np.testing.assert_allclose(pg, w, atol=1e-14)
    with pytest.raises(ValueError):
        correct.variant_update(CorrectionCfg(), w, wt, g[:2])


def test_cfg_validation():
    with pytest.raises(ValueError):
        CorrectionCfg(iters=-1)
    with pytest.raises(ValueError):
        CorrectionCfg(alpha=1.5)
    with pytest.raises(ValueError):
        CorrectionCfg(eta=0.0)


def _compressed(toy, ratio=0.6):
    model, calib, layers = toy
    res = select.run_selection(select.init_selection(layers, BudgetMode.STANDARD, ratio))
    return model, calib, layers, res, select.apply_assignment(model, layers, res)


def test_zero_iters_identity(toy):
    model, calib, layers, res, cm = _compressed(toy)
    assert correct.correct_iterate(model, layers, res, calib, CorrectionCfg(iters=0), cm) is cm


@pytest.mark.parametrize("variant", list(Variant))
def test_rank_preserved_and_dense_untouched(toy, variant):
    model, calib, layers, res, cm = _compressed(toy, 0.8)
    out = correct.correct_iterate(model, layers, res, calib, CorrectionCfg(variant, iters=2), cm)
    assert len(out.notes["loss_history"]) == 3
    for i, layer in enumerate(out.layers):
        if res.dense[i]:
            assert layer is cm.layers[i]
        else:
            assert layer.rank == res.ranks[i]
            assert linalg.numerical_rank(layer.matrix()) <= res.ranks[i]


def test_proj_grad_lowers_loss(toy):
    model, calib, layers, res, cm = _compressed(toy, 0.4)
    out = correct.correct_iterate(model, layers, res, calib, CorrectionCfg(iters=5), cm)
    hist = out.notes["loss_history"]
    assert hist[-1] < hist[0]
    assert toynet.evaluate(out, calib)[0] == pytest.approx(hist[-1], rel=0, abs=0)


def test_calib_subset(toy):
    model, calib, layers, res, cm = _compressed(toy)
    out = correct.correct_iterate(model, layers, res, calib, CorrectionCfg(iters=1, calib_subset=16), cm)
    assert toynet.evaluate(out, calib.subset(16))[0] == out.notes["loss_history"][-1]


def test_rank_energy_tau_one_equals_rank(toy):
    model, calib, layers, res, cm = _compressed(toy, 0.4)
    rep = correct.rank_energy_report(cm, calib, 1.0)
    for e in rep.layers:
        assert e.k_tau_weight == res.ranks[e.layer]
        assert e.ratio == e.k_tau_grad / e.k_tau_weight


def test_rank_energy_grad_bounded_by_tokens(toy):
    model, calib, layers, res, cm = _compressed(toy, 0.4)
    rep = correct.rank_energy_report(cm, calib.subset(4), 1.0)
    assert rep.layers and all(e.k_tau_grad <= 4 for e in rep.layers)


def test_rank_energy_rejects_tau(toy):
    model, calib, *_ = toy
    with pytest.raises(ValueError):
        correct.rank_energy_report(model, calib, 0.0)


def test_retruncation_residual_small_vs_random(toy):
    # re-truncating after the projected step costs less than re-truncating a random step of equal size
    model, calib, layers, res, cm = _compressed(toy, 0.6)
    from zsvd.whiten import retruncate

    caps = toynet.backward(cm, calib)
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        i = next(j for j, d in enumerate(res.dense) if not d)
        wt = cm.layers[i].matrix()
        step = correct.project_correction(caps[i].g, model.layers[i].matrix() - wt)
        noise = rng.standard_normal(step.shape)
        noise *= np.linalg.norm(step) / np.linalg.norm(noise)

        def resid(dw):
            wu, wv = retruncate(wt + dw, layers[i], res.ranks[i])
            return np.linalg.norm((wt + dw - wu @ wv) @ layers[i].s)

        ratios.append(resid(step) / resid(noise))
    assert np.median(ratios) <= 1.0
