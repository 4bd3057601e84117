import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepseg import loss as L
from sepseg.loss import LossConfig
from sepseg.tensor import Tensor, grad_check

G4 = [1.0, 1.0, 0.0, 0.0]
P4 = [0.8, 0.6, 0.2, 0.0]


def _two_class(p1, g1):
    """(1, 2, n) arrays with class 1 = given values and class 0 = complement."""
    p1, g1 = np.asarray(p1, float), np.asarray(g1, float)
    return np.stack([1 - p1, p1])[None], np.stack([1 - g1, g1])[None]


# --- scalar oracle, written directly from the formulas with Python loops ------

def oracle_l_exp(p, g, eps=1.0, alpha=None, weights=None, w_dsc=1.0, w_cross=1.0, gd=1.0, gc=1.0):
    """p, g: lists [class][voxel]."""
    n_cls, n_vox = len(p), len(p[0])
    weights = weights or [1.0] * n_cls
    ldsc = 0.0
    for c in range(n_cls):
        num = 0.0
        den = 0.0
        for x in range(n_vox):
            pc = p[c][x]
            if alpha is not None:
                pc = pc * math.exp((p[c][x] - g[c][x]) / alpha)
            num += g[c][x] * pc
            den += g[c][x] + pc
        d = (2 * num + eps) / (den + eps)
        ldsc += (-math.log(d)) ** gd
    ldsc /= n_cls
    lcross = 0.0
    for x in range(n_vox):
        for c in range(n_cls):
            if g[c][x] == 1.0:
                lcross += weights[c] * (-math.log(max(p[c][x], 1e-7))) ** gc
    lcross /= n_vox
    return w_dsc * ldsc + w_cross * lcross


def test_class_weights():
    np.testing.assert_allclose(L.class_weights([0.5, 0.5]), [math.sqrt(2)] * 2)
    np.testing.assert_allclose(L.class_weights([0.99, 0.01]), [1.0050378152592121, 10.0])
    np.testing.assert_allclose(L.class_weights([1.0]), [1.0])
    with pytest.raises(ValueError, match="floor"):
        L.class_weights([10, 0])
    np.testing.assert_allclose(L.class_weights([3, 0], floor=1), [math.sqrt(4 / 3), 2.0])


def test_class_frequencies():
    labs = [np.array([0, 0, 1]), np.array([[2, 0]])]
    np.testing.assert_array_equal(L.class_frequencies(labs, 4), [3, 1, 1, 0])


def test_soft_dsc_examples():
    g = np.array([0, 1, 1, 0, 1.0])
    assert float(L.soft_dsc(g, g)) == 1.0
    assert float(L.soft_dsc(np.zeros(4), np.zeros(4))) == 1.0
    assert float(L.soft_dsc(P4, G4)) == pytest.approx(3.8 / 4.6, abs=1e-12)
    assert 3.8 / 4.6 == pytest.approx(0.8261, abs=1e-4)


def test_l_dsc_examples():
    p = np.array(P4).reshape(1, 1, 4)
    g = np.array(G4).reshape(1, 1, 4)
    assert float(L.l_dsc(g, g)) == 0.0
    assert float(L.l_dsc(p, g)) == pytest.approx(-math.log(3.8 / 4.6), abs=1e-12)
    assert -math.log(3.8 / 4.6) == pytest.approx(0.1911, abs=1e-4)


def test_l_cross_single_voxel():
    p, g = _two_class([0.5], [1.0])
    assert float(L.l_cross(p, g)) == pytest.approx(math.log(2), abs=1e-12)


def test_l_cross_clamps_zero_probability():
    p, g = _two_class([0.0], [1.0])
    assert float(L.l_cross(p, g)) == pytest.approx(-math.log(1e-7))


def test_l_exp_is_weighted_sum():
    p, g = _two_class(P4, G4)
    cfg = LossConfig(w_dsc=0.3, w_cross=2.0, class_weights=[1.0, 3.0])
    expected = 0.3 * float(L.l_dsc(p, g, cfg)) + 2.0 * float(L.l_cross(p, g, cfg))
    assert float(L.l_exp(p, g, cfg)) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("cfg", [
    LossConfig(),
    LossConfig(class_weights=[1.0, 4.0], gamma_dsc=0.3, gamma_cross=0.7),
    LossConfig(alpha=0.5),
    LossConfig(alpha=1.0, class_weights=[0.5, 2.0], eps=0.5),
])
def test_against_scalar_oracle(cfg):
    p, g = _two_class(P4, G4)
    kw = dict(eps=cfg.eps, weights=cfg.class_weights, gd=cfg.gamma_dsc, gc=cfg.gamma_cross,
              w_dsc=cfg.w_dsc, w_cross=cfg.w_cross)
    if cfg.alpha is None:
        value = float(L.l_exp(p, g, cfg))
    else:
        value = float(L.ath_l_exp(p, g, cfg))
        kw["alpha"] = cfg.alpha
    assert value == pytest.approx(oracle_l_exp(p[0].tolist(), g[0].tolist(), **kw), abs=1e-12)


def test_ath_four_voxel_value_frozen():
    # by hand: DSC term mean(0.4520, 0.3405) = 0.3963, cross term 0.957 / 4 = 0.2393
    p, g = _two_class(P4, G4)
    expected = oracle_l_exp(p[0].tolist(), g[0].tolist(), alpha=0.5)
    assert float(L.ath_l_exp(p, g, LossConfig(alpha=0.5))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6355609, abs=1e-6)


def test_ath_weight_examples():
    assert L.ath_weight(1.0, 1.0, 0.5) == 1.0 and L.ath_apply(1.0, 1.0, 0.5) == 1.0
    assert L.ath_weight(0.5, 1.0, 0.5) == pytest.approx(math.exp(-1))
    assert L.ath_apply(0.5, 1.0, 0.5) == pytest.approx(0.5 * math.exp(-1))
    assert math.exp(-1) == pytest.approx(0.3679, abs=1e-4) and 0.5 * math.exp(-1) == pytest.approx(0.1839, abs=1e-4)
    assert L.ath_weight(0.5, 0.0, 0.5) == pytest.approx(math.e)
    assert L.ath_apply(0.5, 0.0, 0.5) == pytest.approx(0.5 * math.e)
    assert 0.5 * math.e == pytest.approx(1.3591, abs=1e-4)


def test_ath_limits():
    p, g = _two_class(P4, G4)
    assert float(L.ath_l_exp(p, g, LossConfig(alpha=1e6))) == pytest.approx(float(L.l_exp(p, g)), abs=1e-6)
    gp, gg = _two_class(G4, G4)
    assert float(L.ath_l_exp(gp, gg, LossConfig(alpha=0.5))) == float(L.l_exp(gp, gg))
    with pytest.raises(ValueError):
        L.ath_l_exp(p, g, LossConfig())


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0, 1), g=st.sampled_from([0.0, 1.0]), alpha=st.floats(0.01, 100))
def test_ath_moves_away_from_target(p, g, alpha):
    pw = L.ath_apply(p, g, alpha)
    if g == 1.0:
        assert pw <= p
    else:
        assert pw >= p


def _random_case(seed, n=30, c=3):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(1, c, n))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    g = np.eye(c)[rng.integers(0, c, n)].T[None]
    return p, g


def test_weighted_dice_in_unit_interval_randomized():
    for seed in range(300):
        p, g = _random_case(seed)
        for alpha in (0.05, 0.5, 1.0, 5.0):
            pw = L.ath_apply(p, g, alpha)
            d = L.soft_dsc_per_class(pw, g).data
            assert np.all(d > 0) and np.all(d <= 1.0 + 1e-15)
            assert float(L.l_dsc(pw, g)) >= -1e-15


def test_ath_loss_dominates_plain_loss_randomized():
    for seed in range(300):
        p, g = _random_case(seed)
        for alpha in (0.5, 1.0):
            assert float(L.ath_l_exp(p, g, LossConfig(alpha=alpha))) >= float(L.l_exp(p, g))


# --- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("fn,cfg", [
    (L.dice_loss, LossConfig()),
    (L.l_dsc, LossConfig()),
    (L.l_cross, LossConfig(class_weights=[1.0, 2.0, 5.0])),
    (L.l_exp, LossConfig(class_weights=[1.0, 2.0, 5.0])),
    (L.ath_l_exp, LossConfig(alpha=0.5, class_weights=[1.0, 2.0, 5.0])),
    (L.ath_l_exp, LossConfig(alpha=1.0)),
])
def test_loss_gradients_match_finite_differences(fn, cfg):
    # probabilities reach 1e-3, where -log curvature makes a 1e-5 step too coarse
    p, g = _random_case(7)
    assert grad_check(lambda p: fn(p, g, cfg), [p], eps=1e-7) < 1e-6


@pytest.mark.parametrize("gamma,eps", [(1.0, 1.0), (0.6, 1.0), (1.0, 0.0), (2.0, 0.3)])
def test_closed_form_dice_gradient_matches_reverse_mode(gamma, eps):
    for seed in range(5):
        p, g = _random_case(seed, n=40, c=4)
        cfg = LossConfig(gamma_dsc=gamma, eps=max(eps, 1e-300))
        leaf = Tensor(p, requires_grad=True)
        L.l_dsc(leaf, g, cfg).backward()
        np.testing.assert_allclose(L.grad_l_dsc(p, g, cfg), leaf.grad, rtol=1e-10, atol=1e-14)


def test_closed_form_gradient_matches_finite_differences():
    p, g = _random_case(11)
    cfg = LossConfig()
    num = np.empty_like(p)
    h = 1e-6
    for idx in np.ndindex(p.shape):
        a, b = p.copy(), p.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (float(L.l_dsc(a, g, cfg)) - float(L.l_dsc(b, g, cfg))) / (2 * h)
    an = L.grad_l_dsc(p, g, cfg)
    assert np.abs(an - num).max() / np.abs(an).max() < 1e-6


def test_closed_form_without_smoothing_is_printed_chain_rule():
    p, g = _random_case(2, n=10, c=2)
    grad = L.grad_l_dsc(p, g, LossConfig(eps=1e-300))
    for c in range(2):
        s = (g[0, c] + p[0, c]).sum()
        i = (g[0, c] * p[0, c]).sum()
        dsc = 2 * i / s
        printed = -1 / dsc * 2 * (g[0, c] * s - i) / s ** 2
        np.testing.assert_allclose(grad[0, c], printed / 2, rtol=1e-12)


def test_easy_class_gradient_is_restrained():
    # same interior foreground voxel: near-perfect class vs a class at DSC 0.5
    n = 20
    g = np.zeros((1, 1, n))
    g[0, 0, :10] = 1.0
    good = g * 0.999
    good[0, 0, 10:] = 0.001
    half = np.zeros((1, 1, n))
    half[0, 0, :10] = 1.0 / 3.0
    cfg = LossConfig(eps=1e-300)
    assert float(L.soft_dsc_per_class(half, g, cfg.eps).data[0]) == pytest.approx(0.5)
    assert abs(L.grad_l_dsc(good, g, cfg)[0, 0, 0]) < abs(L.grad_l_dsc(half, g, cfg)[0, 0, 0])


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LossConfig(eps=0.0)
    cfg = LossConfig(alpha=0.5, class_weights=[1.0, 2.0])
    assert LossConfig.from_json(cfg.to_json()) == cfg
