import numpy as np
import pytest

from umq import moe as M
from umq import tensor as T
from umq.rng import Rng


def rand_moe(d=4, h=3, k=2, seed=1, dtype=np.float64):
    return M.init_moe(d, h, k, seed, dtype)


# ----------------------------------------------------------------- gate

def test_zero_gate_gives_zero_logits():
    params = rand_moe()
    params.gate_w = T.parameter(np.zeros_like(params.gate_w.data), dtype=np.float64)
    logits = M.gate(T.Tensor(Rng(1).normal((5, 4))), params.gate_w)
    np.testing.assert_array_equal(logits.data, np.zeros((5, 3)))


def test_gate_hand_value_and_linearity():
    d = 4
    gate_w = T.Tensor(np.eye(1, d))  # single expert row e_1
    x = np.array([[2.0, 0.0, 0.0, 0.0]])
    logits = M.gate(T.Tensor(x), gate_w)
    assert logits.data[0, 0] == pytest.approx(2.0 / 2.0)  # scaled by 1/sqrt(4)
    scaled = M.gate(T.Tensor(3.0 * x), gate_w)
    assert scaled.data[0, 0] == pytest.approx(3.0 * logits.data[0, 0])


# ---------------------------------------------------------------- top-k

def test_top_k_basic():
    values, idx = M.top_k_select(np.array([0.3, 0.9, 0.1]), 2)
    np.testing.assert_allclose(values, [0.9, 0.3])
    np.testing.assert_array_equal(idx, [1, 0])


def test_top_k_full_is_descending_sort():
    values, idx = M.top_k_select(np.array([0.3, 0.9, 0.1]), 3)
    np.testing.assert_allclose(values, [0.9, 0.3, 0.1])
    np.testing.assert_array_equal(idx, [1, 0, 2])


def test_top_k_tie_prefers_lower_index():
    _, idx = M.top_k_select(np.array([0.5, 0.5, 0.1]), 1)
    np.testing.assert_array_equal(idx, [0])


# ----------------------------------------------------------- mix_experts

def test_k1_mixing_is_exact_single_expert():
    params = rand_moe(k=1)
    x = T.Tensor(Rng(2).normal((4, 4)))
    logits = M.gate(x, params.gate_w)
    mask = M.selection_mask(logits.data, 1)
    mixed, weights = M.mix_experts(x, logits, mask, params)
    np.testing.assert_allclose(weights.data[mask], np.ones(4), atol=1e-12)
    for i in range(4):
        j = int(np.nonzero(mask[i])[0][0])
        expert_out = M.expert_forward(x, params.experts[j]).data[i]
        np.testing.assert_allclose(mixed.data[i], expert_out, atol=1e-12)


def test_equal_selected_logits_mix_uniformly():
    params = rand_moe(h=2, k=2)
    params.gate_w = T.parameter(np.zeros_like(params.gate_w.data), dtype=np.float64)
    x = T.Tensor(Rng(3).normal((3, 4)))
    logits = M.gate(x, params.gate_w)
    mask = M.selection_mask(logits.data, 2)
    mixed, _ = M.mix_experts(x, logits, mask, params)
    want = 0.5 * (M.expert_forward(x, params.experts[0]).data
                  + M.expert_forward(x, params.experts[1]).data)
    np.testing.assert_allclose(mixed.data, want, atol=1e-12)


def test_selected_softmax_closed_form():
    params = rand_moe(h=2, k=2)
    logits = T.Tensor(np.array([[1.0, 0.0]]))
    mask = np.array([[True, True]])
    x = T.Tensor(Rng(4).normal((1, 4)))
    mixed, weights = M.mix_experts(x, logits, mask, params)
    e = np.e
    np.testing.assert_allclose(weights.data, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-7)
    want = (weights.data[0, 0] * M.expert_forward(x, params.experts[0]).data
            + weights.data[0, 1] * M.expert_forward(x, params.experts[1]).data)
    np.testing.assert_allclose(mixed.data, want, rtol=1e-6)


def test_unselected_experts_get_zero_gradient():
    params = rand_moe(d=3, h=3, k=1)
    x = T.Tensor(Rng(5).normal((2, 3)))
    logits = T.Tensor(np.array([[3.0, 0.0, -1.0], [2.5, 0.5, -2.0]]), requires_grad=True)
    mask = M.selection_mask(logits.data, 1)  # expert 0 selected everywhere
    mixed, _ = M.mix_experts(x, logits, mask, params)
    T.tsum(mixed * mixed).backward()
    assert params.experts[0].w1.grad is not None
    assert params.experts[1].w1.grad is None
    assert params.experts[2].w1.grad is None
    # gradient w.r.t. unselected logits is exactly zero
    np.testing.assert_array_equal(logits.grad[:, 1:], np.zeros((2, 2)))


def test_mixing_invariant_to_constant_logit_shift():
    params = rand_moe(h=4, k=2)
    x = T.Tensor(Rng(6).normal((3, 4)))
    base_logits = M.gate(x, params.gate_w)
    mask = M.selection_mask(base_logits.data, 2)
    mixed_a, _ = M.mix_experts(x, base_logits, mask, params)
    shifted = base_logits + 0.01  # small enough to keep the same selection
    mask_b = M.selection_mask(shifted.data, 2)
    np.testing.assert_array_equal(mask, mask_b)
    mixed_b, _ = M.mix_experts(x, shifted, mask_b, params)
    np.testing.assert_allclose(mixed_a.data, mixed_b.data, atol=1e-10)


def test_weights_form_a_simplex():
    params = rand_moe(d=5, h=6, k=3)
    x = T.Tensor(Rng(7).normal((10, 5)))
    logits = M.gate(x, params.gate_w)
    mask = M.selection_mask(logits.data, 3)
    _, weights = M.mix_experts(x, logits, mask, params)
    np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones(10), atol=1e-6)
    assert (weights.data[mask] > 0).all()
    np.testing.assert_array_equal(weights.data[~mask], 0.0)


# ---------------------------------------------------------------- losses

def test_balance_loss_cases():
    equal = M.loss_balance(T.Tensor(np.full((4, 3), 0.7)))
    assert equal.item() == pytest.approx(0.0, abs=1e-12)
    two = M.loss_balance(T.Tensor(np.array([[1.0, -1.0], [1.0, -1.0]])))
    assert two.item() == pytest.approx(1.0, rel=1e-9)  # mean [1, -1], population var 1
    rng = Rng(8)
    logits = rng.normal((5, 4))
    base = M.loss_balance(T.Tensor(logits)).item()
    shifted = M.loss_balance(T.Tensor(logits + 3.3)).item()
    assert shifted == pytest.approx(base, rel=1e-6)


def test_sample_variance_loss_cases():
    beta = 0.1
    flat = M.loss_sample_variance(T.Tensor(np.full((2, 4), 2.0)), beta)
    assert flat.item() == pytest.approx(beta, rel=1e-9)
    spread = M.loss_sample_variance(T.Tensor(np.array([[1.0, -1.0]])), beta)
    assert spread.item() == 0.0  # row variance 1 >= beta


def test_same_config_loss_cases():
    levels = np.array([[1, 0], [1, 0], [0, 1]])
    same_rows = T.Tensor(np.array([[1.0, 2.0], [1.0, 2.0], [9.0, 9.0]]))
    assert M.loss_same_config(same_rows, levels).item() == pytest.approx(0.0, abs=1e-12)

    pair = T.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    both = np.array([[1, 1], [1, 1]])
    assert M.loss_same_config(pair, both).item() == pytest.approx(2.0, rel=1e-9)

    distinct = np.array([[1, 0], [0, 1]])
    assert M.loss_same_config(pair, distinct).item() == 0.0


def test_same_config_normalization_and_pair_conventions():
    rng = Rng(9)
    logits = T.Tensor(rng.normal((4, 3)))
    levels = np.array([[1, 1], [1, 1], [1, 1], [0, 0]])
    unordered = M.loss_same_config(logits, levels, normalize=False, pairs="unordered").item()
    ordered = M.loss_same_config(logits, levels, normalize=False, pairs="ordered").item()
    assert ordered == pytest.approx(2 * unordered, rel=1e-9)
    norm_unordered = M.loss_same_config(logits, levels, pairs="unordered").item()
    norm_ordered = M.loss_same_config(logits, levels, pairs="ordered").item()
    assert norm_ordered == pytest.approx(norm_unordered, rel=1e-9)


def test_same_config_permutation_invariant():
    rng = Rng(10)
    logits = rng.normal((6, 3))
    levels = np.array([[1], [1], [0], [0], [1], [0]])
    base = M.loss_same_config(T.Tensor(logits), levels).item()
    perm = Rng(11).permutation(6)
    permuted = M.loss_same_config(T.Tensor(logits[perm]), levels[perm]).item()
    assert permuted == pytest.approx(base, rel=1e-9)


def test_routing_losses_match_finite_differences():
    from umq.gradcheck import grad_check
    rng = Rng(12)
    logits = T.Tensor(rng.normal((5, 4)), requires_grad=True)
    levels = np.array([[1, 0], [1, 0], [0, 0], [0, 0], [1, 1]])

    def f():
        return (M.loss_balance(logits) + M.loss_sample_variance(logits, 0.5)
                + M.loss_same_config(logits, levels))

    report = grad_check(f, [("logits", logits)], h=1e-6)
    assert report.max_rel_error < 1e-4
