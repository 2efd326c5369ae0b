"""Hand-evaluated unit values, degeneration identities, masking, and
finite-difference gradients for the imbalance losses."""

import math

import numpy as np
import pytest

import chexfusion.autodiff as ad
import chexfusion.losses as L
from chexfusion.autodiff import Parameter, Tape, Tensor


def test_positive_ratio_balanced():
    np.testing.assert_array_equal(L.positive_ratio([[1], [1], [0], [0]]), [0.5])


def test_positive_ratio_counts():
    np.testing.assert_array_equal(L.positive_ratio([[1], [1], [1], [0]]), [0.75])


def test_positive_ratio_all_masked_defaults_half():
    y = np.array([[1.0], [0.0]])
    mask = np.zeros_like(y)
    np.testing.assert_array_equal(L.positive_ratio(y, mask), [0.5])


def test_wbce_hand_value():
    # y=1, p=0.5, rho=0.5: w = e^0.5, L = e^0.5 * ln 2
    got = L.wbce([0.5], [1.0], [0.5]).item()
    assert abs(got - math.exp(0.5) * math.log(2.0)) < 1e-9
    assert abs(got - 1.142944) < 2e-4


def test_wbce_negative_hand_value():
    # y=0, p=0.5, rho=0: w = 1, L = ln 2
    got = L.wbce([0.5], [0.0], [0.0]).item()
    assert abs(got - math.log(2.0)) < 1e-9


def test_wbce_perfect_prediction_vanishes():
    got = L.wbce([1.0 - 1e-12], [1.0], [0.5]).item()
    assert got < 1e-9


def test_asl_hand_value():
    # y=1, p=0.5, gamma_pos=1: (1-0.5)^1 * ln 2
    cfg = L.LossConfig()
    got = L.asl([0.5], [1.0], cfg).item()
    assert abs(got - 0.5 * math.log(2.0)) < 1e-9
    assert abs(got - 0.346574) < 1e-6


def test_asl_margin_zeroes_easy_negative():
    cfg = L.LossConfig(margin=0.05)
    assert L.asl([0.03], [0.0], cfg).item() == 0.0


def test_asl_degenerates_to_bce():
    cfg = L.LossConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(4, 6))
    y = rng.integers(0, 2, size=(4, 6)).astype(float)
    assert abs(L.asl(p, y, cfg).item() - L.bce(p, y).item()) < 1e-12


def test_combined_hand_value():
    # y=1, p=0.5, rho=0.5, gamma_pos=1: e^0.5 * 0.5 * ln 2
    cfg = L.LossConfig()
    got = L.combined([0.5], [1.0], cfg, [0.5]).item()
    assert abs(got - math.exp(0.5) * 0.5 * math.log(2.0)) < 1e-9
    assert abs(got - 0.571472) < 1e-4


def test_combined_degenerates_to_wbce():
    cfg = L.LossConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, size=(5, 3))
    y = rng.integers(0, 2, size=(5, 3)).astype(float)
    rho = rng.uniform(0.1, 0.9, size=3)
    assert abs(L.combined(p, y, cfg, rho).item() - L.wbce(p, y, rho).item()) < 1e-12


def test_combined_with_unit_weights_equals_asl():
    cfg = L.LossConfig()
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(5, 3))
    y = rng.integers(0, 2, size=(5, 3)).astype(float)
    rho = rng.uniform(0.1, 0.9, size=3)
    got = L.combined(p, y, cfg, rho, weight_override=1.0).item()
    assert abs(got - L.asl(p, y, cfg).item()) < 1e-12


def test_soft_labels_consistent_with_hard():
    cfg = L.LossConfig()
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, size=(4, 3))
    y = rng.integers(0, 2, size=(4, 3)).astype(float)
    rho = rng.uniform(0.1, 0.9, size=3)
    assert L.loss_with_soft_labels(p, y, cfg, rho).item() == \
        L.combined(p, y, cfg, rho).item()


def test_soft_labels_self_consistency_is_binary_entropy():
    # soft_y = p, focusing off, margin 0, weights forced to 1: loss is the
    # binary entropy of p summed over classes
    cfg = L.LossConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
    p = np.array([0.2, 0.7])
    got = L.combined(p, p, cfg, [0.5, 0.5], weight_override=1.0).item()
    want = -sum(q * math.log(q) + (1 - q) * math.log(1 - q) for q in p)
    assert abs(got - want) < 1e-12


def test_soft_labels_range_checked():
    cfg = L.LossConfig()
    with pytest.raises(ValueError):
        L.loss_with_soft_labels([0.5], [1.5], cfg, [0.5])


def test_nan_input_rejected():
    with pytest.raises(ad.DomainError):
        L.bce([float("nan")], [1.0])


def test_losses_nonnegative():
    rng = np.random.default_rng(4)
    cfg = L.LossConfig()
    for _ in range(20):
        p = rng.uniform(1e-6, 1 - 1e-6, size=(3, 5))
        y = rng.integers(0, 2, size=(3, 5)).astype(float)
        rho = rng.uniform(0.05, 0.95, size=5)
        for val in (L.bce(p, y), L.wbce(p, y, rho),
                    L.asl(p, y, cfg), L.combined(p, y, cfg, rho)):
            assert val.item() >= 0.0


def test_monotone_in_p():
    cfg = L.LossConfig()
    ps = np.linspace(0.02, 0.98, 25)
    pos = [L.combined([q], [1.0], cfg, [0.5]).item() for q in ps]
    neg = [L.combined([q], [0.0], cfg, [0.5]).item() for q in ps]
    assert all(a >= b - 1e-12 for a, b in zip(pos, pos[1:]))     # non-increasing
    assert all(b >= a - 1e-12 for a, b in zip(neg, neg[1:]))     # non-decreasing


def test_batch_reduction_is_mean_of_class_sums():
    cfg = L.LossConfig()
    rng = np.random.default_rng(5)
    p = rng.uniform(0.1, 0.9, size=(4, 3))
    y = rng.integers(0, 2, size=(4, 3)).astype(float)
    rho = rng.uniform(0.1, 0.9, size=3)
    rows = [L.combined(p[i], y[i], cfg, rho).item() for i in range(4)]
    assert abs(L.combined(p, y, cfg, rho).item() - np.mean(rows)) < 1e-12


def test_mask_zeroes_loss_and_gradient():
    cfg = L.LossConfig()
    rng = np.random.default_rng(6)
    logits = Parameter("z", rng.normal(size=(2, 4)))
    y = rng.integers(0, 2, size=(2, 4)).astype(float)
    rho = rng.uniform(0.1, 0.9, size=4)
    mask = np.ones((2, 4))
    mask[:, 2] = 0.0
    with Tape() as tape:
        p = ad.sigmoid(logits.value)
        loss = L.combined(p, y, cfg, rho, mask=mask)
    ad.backward(loss, tape)
    np.testing.assert_array_equal(logits.value.grad[:, 2], 0.0)

    # the masked class's probability must not influence the value either
    logits2 = logits.value.data.copy()
    logits2[:, 2] += 3.0
    p2 = 1.0 / (1.0 + np.exp(-logits2))
    assert abs(L.combined(p2, y, cfg, rho, mask=mask).item() - loss.item()) < 1e-12


def test_gradients_match_fd_over_random_draws():
    cfg = L.LossConfig()
    rng = np.random.default_rng(7)
    h, worst = 1e-6, 0.0
    for trial in range(100):
        z0 = rng.normal(size=5) * 1.5
        y = rng.integers(0, 2, size=5).astype(float)
        rho = rng.uniform(0.1, 0.9, size=5)
        mode = ("bce", "wbce", "asl", "combined")[trial % 4]

        def value(z):
            with Tape():
                p = ad.sigmoid(Tensor(z))
                c = L.LossConfig(mode=mode)
                return L.compute_loss(p, y, c, rho=rho).item()

        zp = Parameter("z", z0.copy())
        with Tape() as tape:
            loss = L.compute_loss(ad.sigmoid(zp.value), y, L.LossConfig(mode=mode), rho=rho)
        ad.backward(loss, tape)
        for i in range(5):
            zq = z0.copy(); zq[i] += h; lp = value(zq)
            zq = z0.copy(); zq[i] -= h; lm = value(zq)
            gn = (lp - lm) / (2 * h)
            ga = zp.value.grad[i]
            # skip entries whose true gradient sits below the fd noise floor
            # (central differences carry ~1e-10 absolute error at h=1e-6)
            if abs(ga) + abs(gn) < 5e-4:
                continue
            worst = max(worst, abs(ga - gn) / max(1e-8, abs(ga) + abs(gn)))
    assert worst < 1e-6, f"worst rel err {worst:.3e}"
