import math
import warnings

import numpy as np
import pytest

from zsvd import oracle, select
from zsvd.model import DenseLayer, ModelSpec, ToyModel
from zsvd.select import BudgetMode, Rule, Strategy
from zsvd.linalg import Svd
from zsvd.oracle import synthetic_layer as layer_of


def run(layers, mode=BudgetMode.STANDARD, ratio=0.5):
    return select.run_selection(select.init_selection(layers, mode, ratio))


def test_budget_two_square_layers():
    layers = [layer_of(i, (4, 4), [4, 3, 2, 1], [0.1] * 4) for i in range(2)]
    assert select.init_selection(layers, BudgetMode.STANDARD, 0.5).budget_total == 16


def test_remap_cost_from_start():
    st = select.init_selection([layer_of(0, (6, 4), [4, 3, 2, 1], [0.1] * 4)], BudgetMode.REMAP, 0.5)
    assert st.cost == [6.0]
    assert select.drop_cost(BudgetMode.REMAP, 6, 4, 4, 3) == 6


def test_negative_layer_starts_in_minus_heap():
    st = select.init_selection([layer_of(0, (3, 3), [3, 2, 1], [-1, -2, -3])], BudgetMode.STANDARD, 0.5)
    assert not st.q_plus and st.q_minus[0][3] == -3.0


def test_zero_dl_goes_to_plus_heap():
    st = select.init_selection([layer_of(0, (2, 2), [2, 1], [0.0, 0.0])], BudgetMode.STANDARD, 0.5)
    assert len(st.q_plus) == 1 and not st.q_minus


def test_ratio_out_of_range():
    layers = [layer_of(0, (2, 2), [2, 1], [0.0, 0.0])]
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            select.init_selection(layers, BudgetMode.STANDARD, bad)
    with pytest.raises(ValueError):
        select.init_selection([], BudgetMode.STANDARD, 0.5)


def test_two_layer_hand_trace():
    # layer A offers +0.4 then -0.1; layer B offers -0.3
    a = layer_of(0, (2, 2), [2.0, 1.0], [-0.1, 0.4])
    b = layer_of(1, (2, 2), [2.0, 1.0], [-0.5, -0.3])
    st = select.init_selection([a, b], BudgetMode.STANDARD, 0.5)
    first = st.step()
    assert (first.layer_id, first.dl, st.s) == (0, 0.4, 0.4)
    second = st.step()
    assert (second.layer_id, second.dl) == (0, -0.1)
    assert st.s == pytest.approx(0.3)


def test_single_layer_4x4_trace():
    wl = layer_of(0, (4, 4), [4.0, 3.0, 2.0, 1.0], [0.2, -0.1, 0.3, -0.4])
    res = run([wl])
    assert [(t.cost, t.b) for t in res.trace] == [(0.0, 0.0), (8.0, 8.0)]
    assert res.ranks == [2] and res.dense == [False] and res.budget_used == 8.0
    assert res.removed == [[3, 2]]


def test_ratio_one_is_noop():
    layers = [layer_of(i, (4, 3), [3, 2, 1], [0.1, -0.2, 0.3]) for i in range(2)]
    res = run(layers, ratio=1.0)
    assert res.trace == [] and res.ranks == [3, 3] and all(res.dense)
    assert not res.exhausted


def test_all_zero_dl_order():
    layers = [layer_of(0, (3, 3), [3, 2, 1], [0, 0, 0]), layer_of(1, (3, 3), [5, 4, 1], [0, 0, 0])]
    res = run(layers, ratio=0.2)
    seq = [(t.layer_id, t.comp) for t in res.trace]
    assert seq[:2] == [(0, 2), (0, 1)]
    for idx in range(2):
        comps = [c for lid, c in seq if lid == idx]
        assert comps == sorted(comps, reverse=True)


def test_exhaustion_warns():
    # every full spectrum can pay any budget below 1, so fake a rank-deficient layer
    wl = layer_of(0, (4, 4), [4.0, 3.0, 2.0, 1.0], [0.1] * 4)
    wl.svd = Svd(wl.svd.u[:, :1], wl.sigma[:1], wl.svd.vt[:1])
    wl.delta_l, wl.order = wl.delta_l[:1], wl.order[:1] * 0
    layers = [wl]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = run(layers, ratio=0.05)
    assert res.exhausted and any("exhausted" in str(w.message) for w in caught)


def test_deterministic():
    layers, mode, ratio = oracle.fuzz_layers(3)
    a, b = run(layers, mode, ratio), run(layers, mode, ratio)
    assert a.trace == b.trace and a.ranks == b.ranks


@pytest.mark.parametrize("seed", range(40))
def test_fuzz_invariants(seed):
    layers, mode, ratio = oracle.fuzz_layers(seed)
    st = select.init_selection(layers, mode, ratio)
    while not st.done():
        s_before = st.s
        prefer_plus = st.s <= 0
        pref_nonempty = bool(st.q_plus if prefer_plus else st.q_minus)
        heap = st.q_plus if (prefer_plus and st.q_plus) or (not prefer_plus and not st.q_minus) else st.q_minus
        expect = min(heap)
        cand = st.step()
        assert (abs(cand.dl), cand.comp) == (expect[0], expect[2])
        if pref_nonempty:
            if s_before == 0:
                assert cand.dl >= 0
            else:
                assert cand.dl == 0 or np.sign(cand.dl) != np.sign(s_before)
        assert abs(st.s) <= abs(s_before) + abs(cand.dl) + 1e-15
    res = select.run_selection(select.init_selection(layers, mode, ratio))
    assert res.budget_used == pytest.approx(sum(t.cost for t in res.trace))
    for wl, rem in zip(layers, res.removed):
        assert rem == [int(c) for c in wl.order[: len(rem)]]
    if not res.exhausted:
        max_c = max(select.max_cost(mode, *wl.shape) for wl in layers)
        assert res.budget_total <= res.budget_used < res.budget_total + max_c or res.budget_total == 0


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy(Rule.ZERO_SUM, per_w_sorted=False)
    assert Strategy(Rule.MIN_ABS_DL, False).name == "min-abs/unsorted"


def test_min_sigma_is_global_merge():
    layers = [layer_of(0, (3, 3), [5, 3, 1], [0.1, 0.2, 0.3]), layer_of(1, (3, 3), [4, 2, 0.5], [-1, -1, -1])]
    res = select.run_strategy(layers, BudgetMode.REMAP, 0.5, Strategy(Rule.MIN_SIGMA))
    got = [layers[t.layer_id].sigma[t.comp] for t in res.trace]
    assert got == sorted(got) and got == [0.5, 1, 2]


def test_single_layer_sorted_strategies_agree():
    wl = layer_of(0, (5, 5), [5, 4, 3, 2, 1], [0.3, -0.2, 0.5, -0.7, 0.1])
    sets = []
    for rule in Rule:
        res = select.run_strategy([wl], BudgetMode.STANDARD, 0.4, Strategy(rule))
        sets.append(sorted(res.removed[0]))
    assert all(s == sets[0] for s in sets)


def test_most_negative_unsorted_picks_global_min():
    wl = layer_of(0, (3, 3), [3, 2, 1], [-5.0, 0.1, 0.2])
    res = select.run_strategy([wl], BudgetMode.REMAP, 0.9, Strategy(Rule.MOST_NEGATIVE, False))
    assert res.trace[0].comp == 0


def test_homogeneous_baseline_examples():
    layers = [layer_of(0, (64, 32), np.linspace(32, 1, 32), np.zeros(32))]
    assert select.homogeneous_baseline(layers, 0.6).ranks == [12]
    sq = [layer_of(0, (8, 8), np.arange(8, 0, -1.0), np.zeros(8))]
    assert select.homogeneous_baseline(sq, 1.0).ranks == [4]
    res = select.homogeneous_baseline(layers, 0.3)
    k = res.ranks[0]
    assert k * 96 <= 0.3 * 2048 and res.kept == [list(range(k))]


def test_hq_plan():
    assert select.hq_plan(0.4) == (0.8, 8, 0.4)
    assert select.hq_plan(0.25) == (0.5, 8, 0.25)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        select.hq_plan(0.5)
        with pytest.raises(RuntimeWarning):
            select.hq_plan(0.6)


def test_dense_rules():
    assert select.keeps_dense(BudgetMode.STANDARD, 4, 4, 3)
    assert not select.keeps_dense(BudgetMode.STANDARD, 4, 4, 2)
    assert select.keeps_dense(BudgetMode.EXACT, 4, 4, 2)
    assert select.keeps_dense(BudgetMode.REMAP, 4, 4, 4)
    assert not select.keeps_dense(BudgetMode.REMAP, 4, 4, 3)


def test_apply_assignment_counting(toy):
    model, _, layers = toy
    res = select.run_selection(select.init_selection(layers, BudgetMode.STANDARD, 0.5))
    cm = select.apply_assignment(model, layers, res)
    assert cm.n_params() == select.stored_params(res, layers)
    for i, (layer, dense) in enumerate(zip(cm.layers, res.dense)):
        assert cm.is_factored(i) == (not dense)
        np.testing.assert_array_equal(layer.bias, model.layers[i].bias)


def test_apply_assignment_all_dense(toy):
    from zsvd import toynet

    model, calib, layers = toy
    res = select.run_selection(select.init_selection(layers, BudgetMode.STANDARD, 1.0))
    cm = select.apply_assignment(model, layers, res)
    assert toynet.evaluate(cm, calib)[0] == toynet.evaluate(model, calib)[0]


def test_apply_assignment_rank_zero_outputs_bias(toy):
    from zsvd import toynet

    model, _, layers = toy
    res = select.homogeneous_baseline(layers, 0.6)
    res.ranks[0], res.kept[0] = 0, []
    cm = select.apply_assignment(model, layers, res)
    h = np.random.default_rng(0).standard_normal((32, 3))
    np.testing.assert_array_equal(cm.layers[0].apply(h), 0.0)
    x = toynet.CalibSet(h, np.zeros(3, dtype=np.int64))
    _, acts = toynet.forward_loss(cm, x)
    np.testing.assert_array_equal(acts[1], np.repeat(toynet._act("gelu_tanh", model.layers[0].bias)[:, None], 3, 1))
