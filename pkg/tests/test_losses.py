import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dems.losses import (
    EPS,
    WarmupClock,
    fusion_loss,
    sensitivity_loss_hard,
    sensitivity_loss_soft,
    total_loss,
    unsupervised_loss,
    warmup,
)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# -- direct-formula oracles (plain Python loops) -----------------------------

def oracle_fusion(p, y):
    p = [min(max(v, EPS), 1 - EPS) for v in np.ravel(p)]
    y = list(np.ravel(y))
    n = len(p)
    bce = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / n
    dice = 1 - 2 * sum(pi * yi for pi, yi in zip(p, y)) / (sum(p) + sum(y))
    return 0.5 * bce + dice


def oracle_soft(p, q):
    p, q = np.ravel(p), np.ravel(q)
    return sum(a + b - 2 * a * b for a, b in zip(p, q)) / len(p)


def oracle_mse(p, q):
    p, q = np.ravel(p), np.ravel(q)
    return sum((a - b) ** 2 for a, b in zip(p, q)) / len(p)


def oracle_xor(p, q, t=0.5):
    p, q = np.ravel(p), np.ravel(q)
    return sum((a > t) != (b > t) for a, b in zip(p, q)) / len(p)


# -- fusion ------------------------------------------------------------------

def test_fusion_perfect_prediction():
    gt = t64(np.random.default_rng(0).random((8, 8)) > 0.5)
    assert float(fusion_loss(gt.clone(), gt)) == pytest.approx(0.0, abs=1e-5)


def test_fusion_half_foreground():
    gt = np.zeros((4, 4))
    gt[:2] = 1
    value = float(fusion_loss(t64(np.full((4, 4), 0.5)), t64(gt)))
    assert value == pytest.approx(0.5 * math.log(2) + 0.5, abs=1e-12)
    assert value == pytest.approx(0.84657, abs=1e-5)


def test_fusion_empty_foreground_is_one():
    value = float(fusion_loss(t64(np.full((4, 4), EPS)), t64(np.zeros((4, 4)))))
    assert value == pytest.approx(1.0, abs=1e-6)


def test_fusion_rejects_bad_input():
    with pytest.raises(ValueError, match="shape"):
        fusion_loss(torch.rand(4, 4), torch.zeros(4, 5))
    with pytest.raises(ValueError, match="binary"):
        fusion_loss(torch.rand(4, 4), torch.full((4, 4), 0.5))


def test_fusion_batch_is_mean_of_samples():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, (3, 1, 8, 8))
    y = (rng.random((3, 1, 8, 8)) > 0.5).astype(float)
    expected = np.mean([oracle_fusion(p[i], y[i]) for i in range(3)])
    assert float(fusion_loss(t64(p), t64(y))) == pytest.approx(expected, abs=1e-12)


# -- sensitivity -------------------------------------------------------------

def test_hard_identical_is_zero(rng):
    p = t64(rng.random((8, 8)))
    assert float(sensitivity_loss_hard(p, p)) == 0.0


def test_hard_full_disagreement():
    assert float(sensitivity_loss_hard(torch.full((4, 4), 0.6), torch.full((4, 4), 0.4))) == 1.0


def test_hard_half_disagreement():
    a = t64([[1, 1], [0, 0]])
    b = t64([[1, 0], [1, 0]])
    assert float(sensitivity_loss_hard(a, b)) == 0.5


def test_hard_threshold_is_strict():
    assert float(sensitivity_loss_hard(torch.full((2, 2), 0.5), torch.zeros(2, 2))) == 0.0


def test_soft_examples():
    half = torch.full((4, 4), 0.5, dtype=torch.float64)
    assert float(sensitivity_loss_soft(half, half)) == 0.5
    assert float(sensitivity_loss_soft(torch.ones(4, 4), torch.zeros(4, 4))) == 1.0


def test_soft_equals_hard_on_binary(rng):
    a = t64(rng.random((16, 16)) > 0.5)
    b = t64(rng.random((16, 16)) > 0.5)
    assert float(sensitivity_loss_soft(a, b)) == float(sensitivity_loss_hard(a, b))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hard_invariant_to_monotone_remap(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.random((8, 8)), rng.random((8, 8))

    def remap(x):
        return 0.5 + 0.5 * np.tanh(3 * (x - 0.5))

    assert float(sensitivity_loss_hard(t64(p), t64(q))) == float(
        sensitivity_loss_hard(t64(remap(p)), t64(remap(q))))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pair_losses_bounded(seed):
    rng = np.random.default_rng(seed)
    p, q = t64(rng.random((8, 8))), t64(rng.random((8, 8)))
    for fn in (sensitivity_loss_hard, sensitivity_loss_soft, unsupervised_loss):
        assert 0.0 <= float(fn(p, q)) <= 1.0


# -- unsupervised ------------------------------------------------------------

def test_unsupervised_examples(rng):
    p = t64(rng.random((4, 4)))
    assert float(unsupervised_loss(p, p)) == 0.0
    assert float(unsupervised_loss(torch.full((4, 4), 0.75), torch.full((4, 4), 0.25))) == 0.25
    a = torch.zeros(2, 2)
    b = torch.zeros(2, 2)
    b[1, 0] = 1.0
    assert float(unsupervised_loss(a, b)) == 0.25


def test_pair_losses_reject_shape_mismatch():
    for fn in (sensitivity_loss_hard, sensitivity_loss_soft, unsupervised_loss):
        with pytest.raises(ValueError):
            fn(torch.rand(4, 4), torch.rand(4, 3))


# -- oracle agreement and gradients ------------------------------------------

def test_losses_match_direct_formulas():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        p, q = rng.random((8, 8)), rng.random((8, 8))
        y = (rng.random((8, 8)) > 0.5).astype(float)
        assert abs(float(fusion_loss(t64(p), t64(y))) - oracle_fusion(p, y)) <= 1e-10
        assert abs(float(sensitivity_loss_soft(t64(p), t64(q))) - oracle_soft(p, q)) <= 1e-10
        assert abs(float(unsupervised_loss(t64(p), t64(q))) - oracle_mse(p, q)) <= 1e-10
        assert float(sensitivity_loss_hard(t64(p), t64(q))) == oracle_xor(p, q)


def central_difference(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _autograd(fn, p, *rest):
    pt = t64(p).requires_grad_(True)
    fn(pt, *[t64(r) for r in rest]).backward()
    return pt.grad.numpy()


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, (8, 8))
    q = rng.uniform(0.05, 0.95, (8, 8))
    y = (rng.random((8, 8)) > 0.5).astype(float)
    cases = [
        (fusion_loss, y, lambda x: oracle_fusion(x, y)),
        (sensitivity_loss_soft, q, lambda x: oracle_soft(x, q)),
        (unsupervised_loss, q, lambda x: oracle_mse(x, q)),
    ]
    for fn, other, scalar in cases:
        analytic = _autograd(fn, p, other)
        numeric = central_difference(scalar, p)
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-3, fn.__name__


# -- warm-up -----------------------------------------------------------------

def test_warmup_examples():
    assert warmup(0, 0) == 1.0
    assert warmup(WarmupClock(0, 0)) == 1.0
    assert abs(warmup(0, 100) - math.exp(-5)) < 1e-9
    assert warmup(0, 100) == pytest.approx(0.0067379, abs=1e-7)
    assert warmup(100, 100) == 1.0


def test_warmup_rejects_overrun():
    with pytest.raises(ValueError):
        warmup(11, 10)
    with pytest.raises(ValueError):
        WarmupClock(-1, 3)


@settings(max_examples=50, deadline=None)
@given(t_max=st.integers(1, 5000))
def test_warmup_monotone(t_max):
    values = [warmup(t, t_max) for t in range(0, t_max + 1, max(1, t_max // 200))] + [warmup(t_max, t_max)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0
    assert warmup(t_max - 1, t_max) == pytest.approx(1.0, abs=5.0 / t_max**2 + 1e-12)


# -- total -------------------------------------------------------------------

def test_total_perfect_labeled():
    gt = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    gt[..., 1:3, 1:3] = 1
    out = [gt.clone() for _ in range(4)]
    br = total_loss([(out, gt)], [], 0.7)
    assert br.total == pytest.approx(0.0, abs=1e-5)
    assert br.unsupervised == 0.0 and br.sensitivity_hard == 0.0


def test_total_unlabeled_only():
    main = torch.full((1, 1, 4, 4), 0.75, dtype=torch.float64)
    aux = [torch.full((1, 1, 4, 4), 0.25, dtype=torch.float64)] * 3
    for lam in (1.0, 0.3):
        br = total_loss([], [[main, *aux]], lam)
        assert br.fusion == 0.0 and br.sensitivity_soft == 0.0
        assert br.unsupervised == 0.25
        assert br.total == pytest.approx(lam * 0.25, abs=1e-15)


def test_total_hand_computed_at_start_of_warmup():
    # 2x2 fixture; lambda = warmup(0, 10) = e^-5
    gt = t64([[[[1, 0], [0, 0]]]])
    main = t64([[[[0.9, 0.2], [0.1, 0.4]]]])
    aux = [t64([[[[0.6, 0.3], [0.1, 0.7]]]]), t64([[[[0.9, 0.2], [0.1, 0.4]]]]),
           t64([[[[0.2, 0.2], [0.5, 0.4]]]])]
    unl_main = t64([[[[0.5, 0.5], [0.5, 0.5]]]])
    unl_aux = [t64([[[[0.5, 0.5], [0.5, 0.5]]]]), t64([[[[1.0, 0.5], [0.5, 0.5]]]]),
               t64([[[[0.5, 0.5], [0.5, 0.0]]]])]
    lam = math.exp(-5)
    f_terms = [oracle_fusion(m, gt) for m in [main, *aux]]
    s_terms = [oracle_soft(main, a) for a in aux]
    u_terms = [0.0, 0.25 / 4, 0.25 / 4]
    l_f, l_s, l_u = np.mean(f_terms), np.mean(s_terms), np.mean(u_terms)
    br = total_loss([([main, *aux], gt)], [[unl_main, *unl_aux]], WarmupClock(0, 10))
    assert br.lam == pytest.approx(lam, abs=1e-15)
    assert br.fusion == pytest.approx(l_f, abs=1e-12)
    assert br.sensitivity_soft == pytest.approx(l_s, abs=1e-12)
    assert br.unsupervised == pytest.approx(l_u, abs=1e-12)
    assert br.total == pytest.approx(l_f + lam * (l_s + l_u), abs=1e-12)
    # hard XOR: pair (main, aux1) disagrees at 1 of 4 pixels, others agree
    assert br.sensitivity_hard == pytest.approx((0.25 + 0 + 0.25) / 3, abs=1e-12)
    assert float(br.tensor) == pytest.approx(br.total, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0, 1))
def test_total_decomposition_identity(seed, lam):
    rng = np.random.default_rng(seed)
    lab = [t64(rng.random((2, 1, 8, 8))) for _ in range(4)]
    gt = t64(rng.random((2, 1, 8, 8)) > 0.5)
    unl = [t64(rng.random((2, 1, 8, 8))) for _ in range(4)]
    br = total_loss([(lab, gt)], [unl], lam)
    assert br.total == br.fusion + br.lam * (br.sensitivity_soft + br.unsupervised)
    assert br.total >= br.fusion - 1e-9


def test_total_without_sensitivity():
    rng = np.random.default_rng(0)
    lab = [t64(rng.random((1, 1, 4, 4))) for _ in range(4)]
    gt = t64(rng.random((1, 1, 4, 4)) > 0.5)
    br = total_loss([(lab, gt)], [], 1.0, use_sensitivity=False)
    assert br.sensitivity_soft == 0.0 and br.total == pytest.approx(br.fusion)


def test_total_errors():
    with pytest.raises(ValueError):
        total_loss([], [], 1.0)
    with pytest.raises(ValueError, match="ground truth"):
        total_loss([([torch.rand(4, 4)] * 4, None)], [], 1.0)
