import numpy as np
import pytest

from umq import decouple as D
from umq import tensor as T
from umq.rng import Rng


def zero_params(d):
    z = lambda *shape: T.Tensor(np.zeros(shape))
    return D.DecoupleParams(z(d, 2 * d), z(1, 2 * d), z(2 * d, d), z(1, d),
                            z(2 * d, d), z(1, d))


def rand_params(d, seed=3, dtype=np.float64):
    return D.init_decouple(d, seed, dtype), D.init_couple(d, seed + 1, dtype)


def test_zero_weights_map_to_zero():
    x = T.Tensor(Rng(1).normal((4, 3)))
    x_s, x_c = D.decouple(x, zero_params(3))
    np.testing.assert_array_equal(x_s.data, np.zeros((4, 3)))
    np.testing.assert_array_equal(x_c.data, np.zeros((4, 3)))


def test_decouple_permutation_equivariant():
    d = 5
    params, _ = rand_params(d)
    x = Rng(2).normal((6, d))
    perm = Rng(3).permutation(6)
    direct_s, direct_c = D.decouple(T.Tensor(x), params)
    perm_s, perm_c = D.decouple(T.Tensor(x[perm]), params)
    np.testing.assert_allclose(direct_s.data[perm], perm_s.data, atol=1e-12)
    np.testing.assert_allclose(direct_c.data[perm], perm_c.data, atol=1e-12)


def test_decouple_and_couple_match_straight_line_oracle():
    d = 4
    dec, cpl = rand_params(d, seed=9)
    x = Rng(4).normal((3, d))

    hidden = np.maximum(x @ dec.hidden_w.data + dec.hidden_b.data, 0.0)
    want_s = hidden @ dec.sample_w.data + dec.sample_b.data
    want_c = hidden @ dec.shared_w.data + dec.shared_b.data
    x_s, x_c = D.decouple(T.Tensor(x), dec)
    np.testing.assert_allclose(x_s.data, want_s, rtol=1e-5)
    np.testing.assert_allclose(x_c.data, want_c, rtol=1e-5)

    joined = np.concatenate([want_s, want_c], axis=-1)
    hidden2 = np.maximum(joined @ cpl.hidden_w.data + cpl.hidden_b.data, 0.0)
    want_recon = hidden2 @ cpl.out_w.data + cpl.out_b.data
    recon = D.couple(x_s, x_c, cpl)
    np.testing.assert_allclose(recon.data, want_recon, rtol=1e-5)


# -------------------------------------------------------------- losses

def test_orthogonality_extremes_and_hand_value():
    orth = D.loss_orthogonality(T.Tensor(np.array([[1.0, 0.0]])),
                                T.Tensor(np.array([[0.0, 1.0]])))
    assert orth.item() == pytest.approx(0.0, abs=1e-7)
    parallel = D.loss_orthogonality(T.Tensor(np.array([[1.0, 0.0]])),
                                    T.Tensor(np.array([[1.0, 0.0]])))
    assert parallel.item() == pytest.approx(1.0, rel=1e-6)
    mixed = D.loss_orthogonality(T.Tensor(np.array([[1.0, 1.0]])),
                                 T.Tensor(np.array([[1.0, 0.0]])))
    assert mixed.item() == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-6)


def test_orthogonality_bounded_and_scale_invariant():
    rng = Rng(5)
    for _ in range(20):
        a, b = rng.normal((4, 6)), rng.normal((4, 6))
        base = D.loss_orthogonality(T.Tensor(a), T.Tensor(b)).item()
        assert 0.0 <= base <= 1.0 + 1e-9
        scaled = D.loss_orthogonality(T.Tensor(3.7 * a), T.Tensor(b * 0.2)).item()
        assert scaled == pytest.approx(base, rel=1e-5)


def test_mutual_info_loss_cases():
    x = T.Tensor(np.array([[1.0, 2.0]]))
    zero = D.loss_mutual_info(x, x, x, slack=0.2)
    assert zero.item() == pytest.approx(0.0)

    # distances 0.3 and 0.1 against slack 0.2 -> 0.1 + 0
    base = np.array([[0.0, 0.0]])
    x_t = T.Tensor(base)
    x_c = T.Tensor(base + np.array([[np.sqrt(0.3), 0.0]]))
    x_s = T.Tensor(base + np.array([[np.sqrt(0.1), 0.0]]))
    val = D.loss_mutual_info(x_t, x_s, x_c, slack=0.2)
    assert val.item() == pytest.approx(0.1, rel=1e-6)


def test_mutual_info_zero_slack_is_sum_of_squared_distances():
    rng = Rng(6)
    x, x_s, x_c = (T.Tensor(rng.normal((3, 4))) for _ in range(3))
    val = D.loss_mutual_info(x, x_s, x_c, slack=0.0)
    want = (((x.data - x_c.data) ** 2).sum(-1) + ((x.data - x_s.data) ** 2).sum(-1)).mean()
    assert val.item() == pytest.approx(want, rel=1e-6)


def test_center_loss_cases():
    same = D.loss_center(T.Tensor(np.tile([[1.0, 2.0]], (5, 1))))
    assert same.item() == pytest.approx(0.0, abs=1e-12)
    spread = D.loss_center(T.Tensor(np.array([[0.0], [2.0]])))
    assert spread.item() == pytest.approx(1.0, rel=1e-6)
    single = D.loss_center(T.Tensor(np.array([[3.0, -1.0]])))
    assert single.item() == pytest.approx(0.0, abs=1e-12)


def test_center_loss_translation_invariant():
    rng = Rng(7)
    x = rng.normal((6, 4))
    base = D.loss_center(T.Tensor(x)).item()
    shifted = D.loss_center(T.Tensor(x + np.array([[5.0, -2.0, 0.5, 9.0]]))).item()
    assert shifted == pytest.approx(base, rel=1e-6)


def test_reconstruction_loss_cases():
    x = T.Tensor(np.array([[3.0, 4.0]]))
    assert D.loss_reconstruction(x, x).item() == pytest.approx(0.0, abs=1e-12)
    zero = T.Tensor(np.zeros((1, 2)))
    assert D.loss_reconstruction(x, zero).item() == pytest.approx(5.0, rel=1e-7)
    rng = Rng(8)
    a, b = rng.normal((4, 3)), rng.normal((4, 3))
    want = np.sqrt(((a - b) ** 2).sum(-1)).mean()
    assert D.loss_reconstruction(T.Tensor(a), T.Tensor(b)).item() == pytest.approx(want, rel=1e-6)
    want_sq = (((a - b) ** 2).sum(-1)).mean()
    got_sq = D.loss_reconstruction(T.Tensor(a), T.Tensor(b), squared=True)
    assert got_sq.item() == pytest.approx(want_sq, rel=1e-6)


def test_decouple_total_is_plain_sum():
    parts = [T.Tensor(np.array(v)) for v in (0.1, 0.2, 0.3, 0.4)]
    one_modality = parts[0] + parts[1] + parts[2] + parts[3]
    assert D.decouple_total([one_modality]).item() == pytest.approx(1.0, rel=1e-6)
    three = [T.Tensor(np.array(0.5))] * 3
    assert D.decouple_total(three).item() == pytest.approx(1.5, rel=1e-6)


def test_loss_gradients_match_finite_differences():
    from umq.gradcheck import grad_check
    d = 4
    rng = Rng(9)
    x = T.Tensor(rng.normal((3, d)), requires_grad=True)
    x_s = T.Tensor(rng.normal((3, d)), requires_grad=True)
    x_c = T.Tensor(rng.normal((3, d)), requires_grad=True)

    def joint():
        return (D.loss_orthogonality(x_s, x_c) + D.loss_mutual_info(x, x_s, x_c, 0.2)
                + D.loss_center(x_c) + D.loss_reconstruction(x, x_c))

    report = grad_check(joint, [("x", x), ("x_s", x_s), ("x_c", x_c)], h=1e-6)
    assert report.max_rel_error < 1e-4


# ------------------------------------------------------------- baseline

def make_state(d=3, lam=0.9, bias=None, baseline=None):
    state = D.init_state(d, seed=10, ema_coeff=lam, dtype=np.float64)
    if bias is not None:
        state.bias = T.parameter(np.asarray(bias, dtype=np.float64).reshape(1, -1),
                                 dtype=np.float64)
    if baseline is not None:
        state.baseline = np.asarray(baseline, dtype=np.float64).reshape(1, -1)
    return state


def test_baseline_frozen_ema_when_lambda_one():
    state = make_state(d=2, lam=1.0, bias=[0.4, 0.4], baseline=[1.0, 2.0])
    x_b, _ = D.baseline_update(state, T.Tensor(Rng(11).normal((5, 2))))
    np.testing.assert_allclose(x_b.data, 0.5 * np.array([[1.0, 2.0]]) + 0.5 * 0.4, rtol=1e-12)


def test_baseline_no_memory_when_lambda_zero():
    x_c = T.Tensor(Rng(12).normal((5, 2)))
    state = make_state(d=2, lam=0.0, bias=[0.0, 0.0], baseline=[9.0, 9.0])
    x_b, _ = D.baseline_update(state, x_c)
    np.testing.assert_allclose(x_b.data, 0.5 * x_c.data.mean(axis=0, keepdims=True), rtol=1e-12)


def test_baseline_hand_value():
    state = make_state(d=1, lam=0.9, bias=[0.2], baseline=[1.0])
    x_b, new_buf = D.baseline_update(state, T.Tensor(np.zeros((4, 1))))
    assert x_b.data[0, 0] == pytest.approx(0.55, rel=1e-12)
    assert new_buf[0, 0] == pytest.approx(0.55, rel=1e-12)


def test_baseline_gradient_flows_only_through_bias():
    x_c = T.Tensor(Rng(13).normal((4, 2)), requires_grad=True)
    state = make_state(d=2, lam=0.5)
    x_b, _ = D.baseline_update(state, x_c)
    T.tsum(x_b * x_b).backward()
    assert x_c.grad is None  # EMA half is detached
    assert state.bias.grad is not None and np.abs(state.bias.grad).max() > 0


def test_baseline_converges_geometrically_with_frozen_bias():
    lam = 0.9
    state = make_state(d=1, lam=lam, bias=[0.3], baseline=[4.0])
    mean = np.array([[1.0]])
    x_c = T.Tensor(np.tile(mean, (6, 1)))
    # fixed point of b <- 0.5(lam b + (1-lam) mu) + 0.5 tri
    lam_bar = (1 + lam) / 2
    fixed = (0.5 * (1 - lam) * mean + 0.5 * 0.3) / (1 - 0.5 * lam)
    prev_gap = abs(state.baseline[0, 0] - fixed[0, 0])
    for _ in range(8):
        _, new_buf = D.baseline_update(state, x_c)
        state.baseline = new_buf
        gap = abs(state.baseline[0, 0] - fixed[0, 0])
        assert gap <= lam_bar * prev_gap + 1e-12
        prev_gap = gap
    assert prev_gap < 0.02
