import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from advseg import autodiff as ad
from advseg.autodiff import Tensor
from advseg.cloud import class_histogram
from advseg.decoder import LatentGaussian
from advseg.losses import (DICE_EPS, MarginTable, chamfer, chamfer_to_target,
                           dynamic_margins, key_point_mask, kl_diag_gaussian,
                           kl_gaussian_tensors, kps_loss, one_hot, rlt_loss,
                           soft_dice)
from advseg.util import cross_entropy_per_point, softmax


# -- soft dice ---------------------------------------------------------------


def soft_dice_reference(probs, labels):
    """Independent reimplementation of the per-class dice formula."""
    probs = np.asarray(probs, dtype=float)
    n, c = probs.shape
    g = np.zeros((n, c))
    g[np.arange(n), labels] = 1.0
    dices = []
    for y in range(c):
        if not (np.asarray(labels) == y).any():
            continue
        inter = (probs[:, y] * g[:, y]).sum()
        denom = (probs[:, y] ** 2).sum() + (g[:, y] ** 2).sum()
        dices.append((2 * inter + DICE_EPS) / (denom + DICE_EPS))
    return 1.0 - float(np.mean(dices))


def test_soft_dice_perfect_one_hot_is_zero():
    labels = np.array([0, 1, 2, 1])
    probs = one_hot(labels, 3)
    assert soft_dice(probs, labels) == pytest.approx(0.0, abs=1e-6)


def test_soft_dice_single_point_closed_form():
    # one point, two classes, uniform prediction of the true class:
    # 1 - (2*0.5 + eps) / (0.25 + 1 + eps) = 0.2
    value = soft_dice(np.array([[0.5, 0.5]]), np.array([0]))
    assert value == pytest.approx(0.2, abs=1e-6)


def test_soft_dice_matches_independent_reimplementation(rng):
    for _ in range(20):
        n = int(rng.integers(2, 60))
        c = int(rng.integers(2, 7))
        probs = softmax(rng.normal(size=(n, c)) * 2)
        labels = rng.integers(0, c, n)
        assert soft_dice(probs, labels) == pytest.approx(
            soft_dice_reference(probs, labels), abs=1e-12)


def test_soft_dice_bounded_and_monotone(rng):
    probs = softmax(rng.normal(size=(30, 4)))
    labels = rng.integers(0, 4, 30)
    base = soft_dice(probs, labels)
    assert 0.0 <= base <= 1.0
    # decreasing the true-class probability never decreases the loss
    for j in (0, 7, 21):
        worse = probs.copy()
        y = labels[j]
        stolen = worse[j, y] * 0.5
        worse[j, y] -= stolen
        worse[j, (y + 1) % 4] += stolen
        assert soft_dice(worse, labels) >= base - 1e-12


def test_soft_dice_tensor_gradient_matches_fd(rng):
    z = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, 6)
    t = Tensor(z, requires_grad=True)
    loss = soft_dice(ad.softmax_rows(t), labels)
    loss.backward()
    h = 1e-6
    for idx in [(0, 0), (3, 2), (5, 1)]:
        zp = z.copy()
        zp[idx] += h
        fp = soft_dice(softmax(zp), labels)
        zp[idx] -= 2 * h
        fm = soft_dice(softmax(zp), labels)
        assert t.grad[idx] == pytest.approx((fp - fm) / (2 * h), abs=1e-5)


# -- margins and key points ----------------------------------------------------


def test_dynamic_margins_equal_counts():
    stats = class_histogram([0, 1, 2, 0, 1, 2], 3)
    table = dynamic_margins(stats, max_margin=0.5)
    assert np.allclose(table.margins, 0.5)


def test_dynamic_margins_closed_form():
    stats = class_histogram([0] * 1000 + [1] * 10, 2)
    table = dynamic_margins(stats, exponent=0.25, max_margin=0.5)
    assert table.margins[1] == pytest.approx(0.5)
    assert table.margins[0] == pytest.approx(0.5 * 100 ** -0.25, abs=1e-12)
    assert table.margins[0] == pytest.approx(0.15811388, abs=1e-6)


def test_dynamic_margins_absent_class_gets_max():
    stats = class_histogram([0, 0, 2], 3)
    table = dynamic_margins(stats, max_margin=0.4)
    assert table.margins[1] == pytest.approx(0.4)


def test_dynamic_margins_all_zero_rejected():
    with pytest.raises(ValueError):
        dynamic_margins(class_histogram([], 3))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_margins_anti_monotone_in_counts(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 10_000, size=int(rng.integers(2, 10)))
    labels = np.repeat(np.arange(len(counts)), counts)
    table = dynamic_margins(class_histogram(labels, len(counts)))
    order = np.argsort(counts)
    sorted_margins = table.margins[order]
    assert (np.diff(sorted_margins) <= 1e-12).all()
    assert (table.margins >= 0).all()
    assert table.margins.max() == pytest.approx(0.5)


def test_margins_permutation_equivariant(rng):
    counts = rng.integers(1, 500, size=6)
    labels = np.repeat(np.arange(6), counts)
    base = dynamic_margins(class_histogram(labels, 6)).margins
    perm = rng.permutation(6)
    permuted_labels = perm[labels]
    permuted = dynamic_margins(class_histogram(permuted_labels, 6)).margins
    assert np.allclose(permuted[perm], base)


def test_key_point_mask_all_points_when_fraction_one(rng):
    imp = rng.random(20)
    labels = rng.integers(0, 3, 20)
    assert key_point_mask(imp, labels, 1.0, 3).flags.all()


def test_key_point_mask_top_fraction_exact():
    imp = np.linspace(0, 1, 10)
    labels = np.zeros(10, dtype=int)
    mask = key_point_mask(imp, labels, 0.3, 1)
    assert mask.flags.sum() == 3
    assert set(np.flatnonzero(mask.flags)) == {7, 8, 9}


def test_key_point_mask_singleton_class():
    mask = key_point_mask(np.array([0.1]), np.array([0]), 0.01, 1)
    assert mask.flags[0]


def test_key_point_mask_ties_prefer_lower_ordinal():
    imp = np.array([0.5, 0.5, 0.5, 0.5])
    mask = key_point_mask(imp, np.zeros(4, dtype=int), 0.5, 1)
    assert np.array_equal(np.flatnonzero(mask.flags), [0, 1])


def test_key_point_mask_per_class_fraction(rng):
    labels = np.array([0] * 10 + [1] * 4)
    imp = rng.random(14)
    mask = key_point_mask(imp, labels, 0.3, 2)
    assert mask.flags[:10].sum() == 3
    assert mask.flags[10:].sum() == 2   # ceil(0.3 * 4)


# -- KPS and the blend -----------------------------------------------------------


def zero_margins(c, scale=1.0):
    return MarginTable(margins=np.zeros(c), scale=scale, exponent=0.0, max_margin=0.0)


def test_kps_zero_margins_equals_cross_entropy(rng):
    logits = rng.normal(size=(40, 5))
    labels = rng.integers(0, 5, 40)
    mask = key_point_mask(rng.random(40), labels, 0.4, 5)
    value = kps_loss(logits, labels, mask, zero_margins(5), scale=1.0)
    assert value == pytest.approx(cross_entropy_per_point(logits, labels).mean(),
                                  abs=1e-12)


def test_kps_single_key_point_closed_form():
    logits = np.array([[2.0, 0.0]])
    labels = np.array([0])
    mask = key_point_mask(np.array([1.0]), labels, 1.0, 2)
    table = MarginTable(margins=np.array([0.5, 0.5]), scale=1.0,
                        exponent=0.25, max_margin=0.5)
    value = kps_loss(logits, labels, mask, table)
    assert value == pytest.approx(-np.log(np.exp(1.5) / (np.exp(1.5) + 1)), abs=1e-12)
    assert value == pytest.approx(0.2014133, abs=1e-6)


def test_kps_non_key_points_use_plain_ce(rng):
    logits = rng.normal(size=(10, 3))
    labels = rng.integers(0, 3, 10)
    no_keys = key_point_mask(np.zeros(10), labels, 0.1, 3)
    no_keys.flags[:] = False
    table = MarginTable(margins=np.full(3, 0.4), scale=7.0, exponent=0.25,
                        max_margin=0.4)
    assert kps_loss(logits, labels, no_keys, table) == pytest.approx(
        cross_entropy_per_point(logits, labels).mean(), abs=1e-12)


def test_kps_margin_increase_never_decreases_loss(rng):
    logits = rng.normal(size=(15, 4))
    labels = rng.integers(0, 4, 15)
    mask = key_point_mask(rng.random(15), labels, 0.5, 4)
    prev = -np.inf
    for m in np.linspace(0.0, 1.2, 13):
        table = MarginTable(margins=np.full(4, m), scale=1.0, exponent=0.25,
                            max_margin=m)
        value = kps_loss(logits, labels, mask, table, scale=1.0)
        assert value >= prev - 1e-12
        prev = value


def test_rlt_endpoints_and_blend():
    assert rlt_loss(0.0, 2.0, 0.4) == pytest.approx(0.4, abs=1e-15)
    assert rlt_loss(1.0, 2.0, 0.4) == pytest.approx(2.0, abs=1e-15)
    assert rlt_loss(0.25, 2.0, 0.4) == pytest.approx(0.8, abs=1e-15)


def test_rlt_rejects_lambda_outside_unit_interval():
    with pytest.raises(ValueError):
        rlt_loss(1.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        rlt_loss(-0.1, 1.0, 1.0)


def test_rlt_linear_in_lambda(rng):
    kps, sd = 1.7, 0.3
    lams = rng.random(10)
    vals = [rlt_loss(l, kps, sd) for l in lams]
    for l, v in zip(lams, vals):
        assert v == pytest.approx(sd + l * (kps - sd), abs=1e-12)


# -- chamfer --------------------------------------------------------------------


def chamfer_brute(x, y):
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def test_chamfer_identical_sets_zero(rng):
    x = rng.normal(size=(50, 3))
    assert chamfer(x, x) == 0.0


def test_chamfer_two_points_closed_form():
    assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.ones((3, 3)))


def test_chamfer_symmetric_and_matches_brute_force(rng):
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(1, 40)), 3))
        y = rng.normal(size=(int(rng.integers(1, 40)), 3))
        ab = chamfer(x, y)
        assert ab == pytest.approx(chamfer(y, x), rel=1e-12)
        assert ab == pytest.approx(chamfer_brute(x, y), rel=1e-9)


def test_chamfer_permutation_and_rigid_motion_invariant(rng):
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=(25, 3))
    base = chamfer(x, y)
    assert chamfer(x[rng.permutation(30)], y[rng.permutation(25)]) == pytest.approx(
        base, rel=1e-12)
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
    shift = np.array([5.0, -2.0, 1.0])
    assert chamfer(x @ rot.T + shift, y @ rot.T + shift) == pytest.approx(
        base, abs=1e-9)


def test_chamfer_to_target_value_and_gradient(rng):
    pred = rng.normal(size=(12, 3))
    target = rng.normal(size=(9, 3))
    t = Tensor(pred, requires_grad=True)
    loss = chamfer_to_target(t, target)
    assert loss.item() == pytest.approx(chamfer(pred, target), rel=1e-12)
    loss.backward()
    h = 1e-7
    for idx in [(0, 0), (5, 2), (11, 1)]:
        p = pred.copy()
        p[idx] += h
        fp = chamfer(p, target)
        p[idx] -= 2 * h
        fm = chamfer(p, target)
        assert t.grad[idx] == pytest.approx((fp - fm) / (2 * h), abs=1e-5)


# -- KL divergence ----------------------------------------------------------------


def kl_quadrature_1d(mu_q, sd_q, mu_p, sd_p):
    def integrand(x):
        q = np.exp(-0.5 * ((x - mu_q) / sd_q) ** 2) / (sd_q * np.sqrt(2 * np.pi))
        logq = -0.5 * ((x - mu_q) / sd_q) ** 2 - np.log(sd_q * np.sqrt(2 * np.pi))
        logp = -0.5 * ((x - mu_p) / sd_p) ** 2 - np.log(sd_p * np.sqrt(2 * np.pi))
        return q * (logq - logp)
    lo = min(mu_q - 12 * sd_q, mu_p - 12 * sd_p)
    hi = max(mu_q + 12 * sd_q, mu_p + 12 * sd_p)
    return quad(integrand, lo, hi, limit=200)[0]


def test_kl_identical_is_zero(rng):
    g = LatentGaussian(mean=rng.normal(size=5), deviation=rng.random(5) + 0.1)
    assert kl_diag_gaussian(g, g) == pytest.approx(0.0, abs=1e-12)


def test_kl_unit_shift_closed_form():
    q = LatentGaussian(mean=[1.0], deviation=[1.0])
    p = LatentGaussian(mean=[0.0], deviation=[1.0])
    assert kl_diag_gaussian(q, p) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_quadrature_1d(rng):
    for _ in range(50):
        mu_q, mu_p = rng.normal(size=2) * 2
        sd_q, sd_p = rng.random(2) * 2 + 0.2
        closed = kl_diag_gaussian(LatentGaussian([mu_q], [sd_q]),
                                  LatentGaussian([mu_p], [sd_p]))
        assert closed == pytest.approx(kl_quadrature_1d(mu_q, sd_q, mu_p, sd_p),
                                       abs=1e-3)


def test_kl_wider_posterior_case():
    q = LatentGaussian(mean=[0.0], deviation=[2.0])
    p = LatentGaussian(mean=[0.0], deviation=[1.0])
    assert kl_diag_gaussian(q, p) == pytest.approx(kl_quadrature_1d(0, 2, 0, 1),
                                                   abs=1e-3)


def test_kl_non_negative_on_random_pairs(rng):
    for _ in range(10_000):
        d = int(rng.integers(1, 5))
        q = LatentGaussian(rng.normal(size=d) * 3, rng.random(d) * 3 + 0.05)
        p = LatentGaussian(rng.normal(size=d) * 3, rng.random(d) * 3 + 0.05)
        assert kl_diag_gaussian(q, p) >= 0.0


def test_kl_rejects_non_positive_deviation():
    from types import SimpleNamespace
    degenerate = SimpleNamespace(mean=np.array([0.0]), deviation=np.array([0.0]))
    with pytest.raises(ValueError):
        kl_diag_gaussian(LatentGaussian([0.0], [1.0]), degenerate)
    with pytest.raises(ValueError):
        LatentGaussian(mean=[0.0], deviation=[-1.0])


def test_kl_tensor_matches_closed_form_and_fd(rng):
    mu_q = rng.normal(size=(1, 4))
    sd_q = rng.random((1, 4)) + 0.2
    mu_p = rng.normal(size=(1, 4))
    sd_p = rng.random((1, 4)) + 0.2
    tm = Tensor(mu_q, requires_grad=True)
    loss = kl_gaussian_tensors(tm, Tensor(sd_q), Tensor(mu_p), Tensor(sd_p))
    assert loss.item() == pytest.approx(
        kl_diag_gaussian(LatentGaussian(mu_q[0], sd_q[0]),
                         LatentGaussian(mu_p[0], sd_p[0])), rel=1e-12)
    loss.backward()
    h = 1e-6
    m = mu_q.copy()
    m[0, 2] += h
    fp = kl_diag_gaussian(LatentGaussian(m[0], sd_q[0]), LatentGaussian(mu_p[0], sd_p[0]))
    m[0, 2] -= 2 * h
    fm = kl_diag_gaussian(LatentGaussian(m[0], sd_q[0]), LatentGaussian(mu_p[0], sd_p[0]))
    assert tm.grad[0, 2] == pytest.approx((fp - fm) / (2 * h), rel=1e-4)
