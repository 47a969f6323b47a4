import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headrecon import prior, recon, tape as T
from headrecon.errors import ValidationError


# ---------------------------------------------------------------------------
# prior-stage terms, hand-computed values


def test_loss_surface_hand():
    f = np.array([[0.5], [-1.0], [0.5]])
    assert abs(T.value_of(prior.loss_surface(f)) - 2.0) < 1e-15
    with pytest.raises(ValidationError):
        prior.loss_surface(np.zeros((0, 1)))


def test_loss_eikonal_hand():
    g = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    # (2-1)^2 + (0-1)^2 + (1-1)^2 = 2
    assert abs(T.value_of(prior.loss_eikonal(g)) - 2.0) < 1e-12
    with pytest.raises(ValidationError):
        prior.loss_eikonal(np.zeros((0, 3)))


def test_loss_deform_hand():
    # aligned warps: per-point sum 2, summed-warp norm 2 -> (2+2)/2 = 2
    d_aligned = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert abs(T.value_of(prior.loss_deform(d_aligned)) - 2.0) < 1e-15
    # cancelling warps: per-point sum 2, summed-warp norm 0 -> 1
    d_cancel = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    assert abs(T.value_of(prior.loss_deform(d_cancel)) - 1.0) < 1e-15
    with pytest.raises(ValidationError):
        prior.loss_deform(np.zeros((0, 3)))


def test_loss_landmark_hand():
    # two scenes, one landmark at distance 1: ordered pairs count it twice
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert abs(T.value_of(prior.loss_landmark([a, b])) - 2.0) < 1e-15
    with pytest.raises(ValidationError):
        prior.loss_landmark([a])
    with pytest.raises(ValidationError):
        prior.loss_landmark([a, np.zeros((2, 3))])


@settings(max_examples=30, deadline=None)
@given(m=st.integers(2, 5), L=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_loss_landmark_identity_matches_double_loop(m, L, seed):
    lms = [np.random.default_rng(seed + i).normal(size=(L, 3)) for i in range(m)]
    direct = 0.0
    for i in range(m):
        for j in range(m):
            if i != j:
                direct += float(np.sum((lms[i] - lms[j]) ** 2))
    fast = T.value_of(prior.loss_landmark(lms))
    assert abs(fast - direct) < 1e-9 * max(1.0, abs(direct))


def test_loss_color_hand():
    pred = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    obs = np.array([[1.0, 1.0, 0.0], [0.6, 0.0, 0.8]])
    # row norms: 1 and 1 -> 2
    assert abs(T.value_of(prior.loss_color(pred, obs)) - 2.0) < 1e-12
    assert prior.loss_color(np.zeros((0, 3)), np.zeros((0, 3))) == 0.0


def test_loss_embed_hand():
    z_s = np.array([3.0, 4.0])  # norm 5
    z_r = np.array([0.0, 2.0])  # norm 2
    assert abs(T.value_of(prior.loss_embed(z_s, z_r, 1.0)) - 7.0) < 1e-12
    assert abs(T.value_of(prior.loss_embed(z_s, z_r, 2.0)) - 7.0 / 4.0) < 1e-12
    # stacked rows: one norm per scene
    zs2 = np.array([[3.0, 4.0], [3.0, 4.0]])
    zr2 = np.zeros((2, 2))
    assert abs(T.value_of(prior.loss_embed(zs2, zr2, 1.0)) - 10.0) < 1e-12
    with pytest.raises(ValidationError):
        prior.loss_embed(z_s, z_r, 0.0)


def test_prior_losses_backprop():
    # every term must feed the tape when given Vars
    tp = T.Tape()
    f = tp.var(np.array([[0.3], [-0.2]]))
    g = tp.var(np.array([[1.5, 0.0, 0.0]]))
    d = tp.var(np.array([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]]))
    lma = tp.var(np.array([[0.0, 0.0, 0.0]]))
    lmb = tp.var(np.array([[1.0, 0.0, 0.0]]))
    pred = tp.var(np.array([[0.4, 0.4, 0.4]]))
    zs = tp.var(np.array([[0.5, 0.5]]))
    zr = tp.var(np.array([[0.1, 0.1]]))
    total = prior.loss_surface(f)
    for term in (
        prior.loss_eikonal(g),
        prior.loss_deform(d),
        prior.loss_landmark([lma, lmb]),
        prior.loss_color(pred, np.array([[0.0, 0.0, 0.0]])),
        prior.loss_embed(zs, zr, 1.0),
    ):
        total = T.add(total, term)
    tp.backward(total)
    for v in (f, g, d, lma, lmb, pred, zs, zr):
        assert v.grad is not None and np.all(np.isfinite(v.grad))


def test_zeta_schedule():
    # flat at 0 before the window, linear inside, pinned at L after
    assert prior.zeta_schedule(0, 5, 10, 6) == 0.0
    assert prior.zeta_schedule(4, 5, 10, 6) == 0.0
    assert prior.zeta_schedule(5, 5, 10, 6) == 0.0
    assert abs(prior.zeta_schedule(7, 5, 10, 6) - 6 * 2 / 5) < 1e-15
    assert prior.zeta_schedule(10, 5, 10, 6) == 6.0
    assert prior.zeta_schedule(99, 5, 10, 6) == 6.0
    with pytest.raises(ValidationError):
        prior.zeta_schedule(0, 10, 5, 6)


# ---------------------------------------------------------------------------
# fit-stage terms


def test_loss_rgb_hand():
    pred = np.array([[0.5, 0.5, 0.5]])
    obs = np.array([[0.4, 0.6, 0.5]])
    # L1 over channels = 0.2; batch of 10 rays -> 0.02
    assert abs(T.value_of(recon.loss_rgb(pred, obs, 10)) - 0.02) < 1e-15
    assert recon.loss_rgb(np.zeros((0, 3)), np.zeros((0, 3)), 10) == 0.0
    with pytest.raises(ValidationError):
        recon.loss_rgb(pred, obs, 0)


def test_loss_mask_hand_ln2():
    # silhouette exactly 0.5 against either label costs ln 2
    sil = np.array([[0.5]])
    lam8 = 4.0
    expect = np.log(2.0) / (lam8 * 1)
    assert abs(recon.loss_mask(np.array([1.0]), sil, lam8, 1) - expect) < 1e-12
    assert abs(recon.loss_mask(np.array([0.0]), sil, lam8, 1) - expect) < 1e-12
    assert recon.loss_mask(np.zeros(0), np.zeros((0, 1)), lam8, 5) == 0.0


def test_loss_mask_scales_inverse_lam8():
    sil = np.array([[0.3], [0.9]])
    m = np.array([1.0, 0.0])
    a = recon.loss_mask(m, sil, 10.0, 4)
    b = recon.loss_mask(m, sil, 20.0, 4)
    assert abs(a - 2 * b) < 1e-12


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 6),
    lam8=st.floats(0.5, 8.0),
    seed=st.integers(0, 10**6),
)
def test_mask_logit_form_matches_direct_when_unsaturated(n, lam8, seed):
    # the direct form clips probabilities, so compare only where |u| is small
    rng = np.random.default_rng(seed)
    f_min = rng.uniform(-2.0, 2.0, size=(n, 1))
    m = (rng.uniform(size=n) < 0.5).astype(float)
    u = -lam8 * f_min
    direct = recon.loss_mask(m, recon.silhouette_estimate(f_min, lam8), lam8, n + 3)
    logit = T.value_of(recon.loss_mask_logits(u, m, lam8, n + 3))
    assert abs(direct - logit) < 1e-10 * max(1.0, abs(direct))


def test_loss_mask_logits_backprops():
    tp = T.Tape()
    u = tp.var(np.array([[0.7], [-1.2]]))
    out = recon.loss_mask_logits(u, np.array([1.0, 0.0]), 5.0, 4)
    tp.backward(out)
    # d/du [softplus(u) - m u] = sigmoid(u) - m
    expect = (1 / (1 + np.exp(-u.value)) - np.array([[1.0], [0.0]])) / (5.0 * 4)
    assert np.allclose(u.grad, expect, atol=1e-12)


def test_silhouette_estimate_hand():
    s = T.value_of(recon.silhouette_estimate(np.array([[0.0], [10.0], [-10.0]]), 50.0))
    assert abs(s[0, 0] - 0.5) < 1e-15
    assert s[1, 0] < 1e-12 and s[2, 0] > 1 - 1e-12


def test_lam8_schedule():
    assert recon.lam8_schedule(50.0, 0) == 50.0
    assert recon.lam8_schedule(50.0, 249) == 50.0
    assert recon.lam8_schedule(50.0, 250) == 100.0
    assert recon.lam8_schedule(50.0, 800) == 50.0 * 2**3
    assert recon.lam8_schedule(50.0, 100, double_every=50) == 50.0 * 4
