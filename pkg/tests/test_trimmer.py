import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vltrim.errors import ContractError, DimensionError, ParameterError
from vltrim.graph import toy_cnn
from vltrim.synthworld import gen_classification_set
from vltrim.train import predict_logits
from vltrim.trimmer import (
    FULL_MAX_ITERS,
    FULL_T_START,
    FilterView,
    TrimConfig,
    count_flops,
    filter_cosine,
    filter_euclidean,
    filter_norm,
    filter_views,
    max_iterations,
    rank_filters,
    remove_filters,
    score_layer,
    select_removals,
    trim_loop,
    zero_mask,
)


def views(weights, layer="conv1"):
    return [FilterView(layer, i, np.asarray(w, dtype=float)) for i, w in enumerate(weights)]


def random_case(rng):
    """A random small CNN plus a random non-exhaustive filter set per prunable layer."""
    widths = tuple(int(w) for w in rng.integers(2, 7, size=rng.integers(1, 4)))
    pool = "gap" if rng.random() < 0.5 else "flatten"
    model = toy_cnn(rng, widths, n_classes=3, input_shape=(2, 6, 6), bias=bool(rng.random() < 0.7), pool=pool)
    for p in model.parameters().values():
        p.data += rng.normal(0, 0.1, size=p.shape)  # non-zero biases too
    removals = {}
    for layer in model.prunable_layers():
        n = model.layer(layer).out_channels
        k = int(rng.integers(1, n))
        removals[layer] = sorted(rng.choice(n, size=k, replace=False).tolist())
    return model, removals


def apply_removals(model, removals):
    # later layers first so each call sees the original successor layout of its layer
    for layer in reversed(list(removals)):
        model = remove_filters(model, layer, removals[layer])
    return model


# -- criteria ---------------------------------------------------------------


def test_norm_examples():
    assert filter_norm([3.0, 4.0], 2) == 5.0
    assert filter_norm([1.0, -1.0, 1.0], 1) == 3.0


def test_norm_vs_direct_summation():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(size=rng.integers(1, 30))
        l1 = sum(abs(x) for x in v.tolist())
        l2 = math.sqrt(sum(x * x for x in v.tolist()))
        assert abs(filter_norm(v, 1) - l1) <= 1e-12
        assert abs(filter_norm(v, 2) - l2) <= 1e-12


def test_norm_errors():
    with pytest.raises(ContractError):
        filter_norm([], 1)
    with pytest.raises(ParameterError):
        filter_norm([1.0], 3)


def test_euclidean_examples():
    assert filter_euclidean([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert filter_euclidean([0.0, 0.0], [3.0, 4.0]) == 5.0
    with pytest.raises(DimensionError):
        filter_euclidean([1.0], [1.0, 2.0])


def test_euclidean_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b = rng.normal(size=(2, 9))
        assert filter_euclidean(a, b) == filter_euclidean(b, a)


def test_cosine_examples():
    assert abs(filter_cosine([1.0, 2.0], [1.0, 2.0])) < 1e-15
    assert filter_cosine([1.0, 0.0], [0.0, 3.0]) == 1.0
    assert filter_cosine([1.0, -2.0], [-1.0, 2.0]) == pytest.approx(2.0, abs=1e-15)
    assert filter_cosine([0.0, 0.0], [1.0, 0.0]) == 1.0


def test_score_components_recomputed():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(7, 12))
    scores = score_layer(views(w))
    l1 = np.abs(w).sum(axis=1)
    l2 = np.sqrt((w**2).sum(axis=1))
    for s in scores:
        a, b = s.index, s.partner
        dists = [
            (filter_euclidean(w[a], w[j]) + filter_cosine(w[a], w[j]), j) for j in range(7) if j != a
        ]
        assert b == min(dists)[1]
        expect = (
            l1[a] / l1.max(),
            l1[b] / l1.max(),
            l2[a] / l2.max(),
            l2[b] / l2.max(),
            filter_euclidean(w[a], w[b]),
            filter_cosine(w[a], w[b]),
        )
        assert s.components == pytest.approx(expect, abs=1e-12)
        assert abs(s.total - sum(s.components)) <= 1e-12
        assert all(c >= 0 for c in s.components)


def test_duplicate_pair_scores_lowest():
    basis = np.eye(6)[:5] * 2.0
    w = np.vstack([basis, basis[2]])  # filter 5 copies filter 2
    scores = score_layer(views(w))
    ranked = rank_filters(scores)
    assert {ranked[0].index, ranked[1].index} == {2, 5}
    # protection: only one member of the pair is removed
    chosen = select_removals(scores, 3)
    assert len({2, 5} & set(chosen)) == 1


def test_orthogonal_equal_norm_ties_by_index():
    scores = score_layer(views(np.eye(5) * 3.0))
    totals = [s.total for s in scores]
    assert max(totals) - min(totals) < 1e-12
    assert [s.index for s in rank_filters(scores)] == [0, 1, 2, 3, 4]
    # 0 and 1 are mutual nearest neighbours, so 1 is protected once 0 is chosen
    assert select_removals(scores, 3) == [0, 2, 3]


def test_single_filter_layer_skipped():
    with pytest.warns(UserWarning):
        assert score_layer(views([[1.0, 2.0]])) == []


def test_select_keeps_one_filter():
    scores = score_layer(views(np.eye(3)))
    assert len(select_removals(scores, 10)) == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(3, 9))
def test_duplicate_in_bottom_three(seed, n):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    w = q[:n] * rng.uniform(5, 10, size=(n, 1))  # mutually orthogonal, euc ≥ 5·√2 > 4 ≥ norm terms
    copy = w[int(rng.integers(n))].copy()
    w = np.insert(w, int(rng.integers(n + 1)), copy, axis=0)
    scores = score_layer(views(w))
    dup = {i for i in range(n + 1) if np.array_equal(w[i], copy)}
    bottom = {s.index for s in rank_filters(scores)[:3]}
    assert dup & bottom


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_scores_move_with_filters(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(6, 5))
    perm = rng.permutation(6)
    a = score_layer(views(w))
    b = score_layer(views(w[perm]))
    for new_i, old_i in enumerate(perm):
        assert abs(b[new_i].total - a[old_i].total) < 1e-12


# -- structural removal -----------------------------------------------------


def test_zero_filter_removal_is_exact():
    rng = np.random.default_rng(3)
    model = toy_cnn(rng, (4, 5), n_classes=3, input_shape=(2, 6, 6), bias=False)
    model.layer("conv1").weight.data[2] = 0.0
    model.layer("conv2").weight.data[:, 2] = rng.normal(size=(5, 3, 3))  # arbitrary slice
    pruned = remove_filters(model, "conv1", [2])
    x = rng.normal(size=(50, 2, 6, 6))
    assert np.max(np.abs(predict_logits(pruned, x) - predict_logits(model, x))) <= 1e-12


def test_structural_equals_zero_mask_sample():
    rng = np.random.default_rng(4)
    for _ in range(10):
        model, removals = random_case(rng)
        x = rng.normal(size=(200,) + model.input_shape)
        gap = np.max(np.abs(predict_logits(apply_removals(model, removals), x) - predict_logits(zero_mask(model, removals), x)))
        assert gap <= 1e-10


@pytest.mark.parametrize("bias", [False, True])
@pytest.mark.parametrize("pool", ["gap", "flatten"])
def test_parameter_count_oracle(bias, pool):
    rng = np.random.default_rng(5)
    model = toy_cnn(rng, (6, 5), n_classes=4, input_shape=(3, 4, 4), bias=bias, pool=pool)
    for layer in model.prunable_layers():
        removed = [0, 3]
        m_h = int(np.prod(model.layer(layer).weight.shape[1:]))
        succ = model.layer(model.successor(layer))
        slice_size = succ.weight.size // model.layer(layer).out_channels
        per_filter = m_h + slice_size + (1 if bias else 0)
        after = remove_filters(model, layer, removed)
        assert model.num_params() - after.num_params() == len(removed) * per_filter


def test_remove_errors():
    model = toy_cnn(np.random.default_rng(6), (3, 3), n_classes=2, input_shape=(1, 4, 4))
    with pytest.raises(ContractError):
        remove_filters(model, "conv1", [0, 1, 2])
    with pytest.raises(ContractError):
        remove_filters(model, "fc", [0])
    with pytest.raises(ContractError):
        remove_filters(model, "conv1", [5])


# -- FLOPs ------------------------------------------------------------------


def test_linear_flops():
    model = toy_cnn(np.random.default_rng(7), (3,), n_classes=5, input_shape=(1, 4, 4))
    assert count_flops(model).per_layer["fc"] == 2 * 3 * 5


def test_conv_flops_formula_and_additivity():
    model = toy_cnn(np.random.default_rng(8), (4, 6), n_classes=5, input_shape=(3, 8, 8))
    rep = count_flops(model)
    assert rep.per_layer["conv1"] == 2 * 4 * 3 * 9 * 64
    assert rep.per_layer["conv2"] == 2 * 6 * 4 * 9 * 64
    assert rep.total == sum(rep.per_layer.values())
    assert rep.ratio == 1.0


@pytest.mark.parametrize("pool", ["gap", "flatten"])
def test_halving_a_layer_halves_its_flops(pool):
    model = toy_cnn(np.random.default_rng(9), (8, 6), n_classes=5, input_shape=(3, 8, 8), pool=pool)
    before = count_flops(model)
    after = count_flops(remove_filters(model, "conv1", [0, 2, 4, 6]), baseline=before.total)
    assert after.per_layer["conv1"] * 2 == before.per_layer["conv1"]
    assert after.per_layer["conv2"] * 2 == before.per_layer["conv2"]
    assert 0 < after.ratio < 1


# -- trim loop --------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    full = gen_classification_set(11, 4, 96)
    return full.subset(np.arange(64)), full.subset(np.arange(64, 96))


def quick_cfg(**kw):
    base = dict(warmup_steps=2, epochs_per_iter=1, final_epochs=1, batch_size=32, exactness_inputs=64)
    base.update(kw)
    return TrimConfig(**base)


def tiny_model(seed=0, widths=(8, 8)):
    return toy_cnn(np.random.default_rng(seed), widths, n_classes=4, input_shape=(3, 16, 16))


def test_trim_config_validation():
    for r in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ParameterError):
            TrimConfig(target_rate=r)


def test_default_warmup_scaled_from_full_schedule():
    assert FULL_T_START == 100_000 and FULL_MAX_ITERS == 300_000
    assert TrimConfig().warmup_steps == round(100_000 * 2000 / 300_000)


def test_small_rate_single_iteration(tiny_data):
    train, val = tiny_data
    model = tiny_model()
    res = trim_loop(model, model.copy(), train, val, quick_cfg(target_rate=0.01), np.random.default_rng(0))
    assert len(res.history) == 1
    assert res.status == "reached" and res.final_ratio <= 0.99


def test_history_strictly_decreasing_and_exact(tiny_data):
    train, val = tiny_data
    model = tiny_model(1, (9, 9))
    res = trim_loop(model, model.copy(), train, val, quick_cfg(target_rate=0.7), np.random.default_rng(1))
    ratios = [h.ratio for h in res.history]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] <= 0.3
    for h in res.history:
        assert h.structural_gap <= 1e-10
        assert h.ratio == h.flops / res.baseline_flops
    assert count_flops(res.model, baseline=res.baseline_flops).ratio == pytest.approx(ratios[-1])
    assert len(res.history) <= max_iterations(model, 3)


def test_unreachable_target(tiny_data):
    train, val = tiny_data
    model = tiny_model(2, (4, 4))
    res = trim_loop(model, model.copy(), train, val, quick_cfg(target_rate=0.99), np.random.default_rng(2))
    assert res.status == "unreached"
    assert len(res.history) <= max_iterations(model, 3)
    assert all(res.model.layer(n).out_channels == 1 for n in res.model.prunable_layers())


def test_trim_deterministic(tiny_data):
    train, val = tiny_data
    runs = []
    for _ in range(2):
        model = tiny_model(3)
        res = trim_loop(model, model.copy(), train, val, quick_cfg(target_rate=0.4), np.random.default_rng(3))
        runs.append(res)
    a, b = runs
    assert [h.ratio for h in a.history] == [h.ratio for h in b.history]
    assert [h.val_kl for h in a.history] == [h.val_kl for h in b.history]
    for k, v in a.model.state_dict().items():
        assert np.array_equal(v, b.model.state_dict()[k])


def test_trim_does_not_mutate_input(tiny_data):
    train, val = tiny_data
    model = tiny_model(4)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    trim_loop(model, model.copy(), train, val, quick_cfg(target_rate=0.2), np.random.default_rng(4))
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_filter_views_shape():
    model = tiny_model()
    fv = filter_views(model, "conv2")
    assert len(fv) == 8 and fv[0].weights.shape == (8 * 9,)
