import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headrecon import nets, tape as T
from headrecon.errors import ValidationError


# ---------------------------------------------------------------------------
# positional encoding


def ref_band_weight(k, zeta):
    """Straight clamp-form of the band mask."""
    return (1.0 - np.cos(np.pi * np.clip(zeta - k, 0.0, 1.0))) / 2.0


@settings(max_examples=60, deadline=None)
@given(k=st.integers(0, 9), zeta=st.floats(0.0, 10.0, allow_nan=False))
def test_band_weight_matches_clamp_form(k, zeta):
    assert abs(nets.pe_band_weight(k, zeta) - ref_band_weight(k, zeta)) < 1e-15


def test_band_weight_boundaries_exact():
    for k in range(6):
        assert nets.pe_band_weight(k, float(k)) == 0.0
        assert nets.pe_band_weight(k, float(k + 1)) == 1.0
        assert abs(nets.pe_band_weight(k, k + 0.5) - 0.5) < 1e-15


def test_pe_out_dim():
    assert nets.PeConfig(6).out_dim(3) == 3 + 2 * 6 * 3
    assert nets.PeConfig(4, include_identity=False).out_dim(3) == 24
    assert nets.PeConfig(0).out_dim(3) == 3


def test_pe_encoding_matches_manual():
    cfg = nets.PeConfig(3, zeta=1.7)
    x = np.array([[0.3, -0.8, 1.1], [0.0, 0.5, -0.25]])
    enc = T.value_of(nets.positional_encode(x, cfg))
    w = [ref_band_weight(k, 1.7) for k in range(3)]
    cols = [x]
    for k in range(3):
        cols.append(w[k] * np.sin(2.0**k * x))
        cols.append(w[k] * np.cos(2.0**k * x))
    assert np.allclose(enc, np.hstack(cols), atol=1e-15)


def test_pe_zeta_defaults_full_and_clamps():
    assert nets.PeConfig(5).zeta == 5.0
    assert nets.PeConfig(5, zeta=99.0).zeta == 5.0
    with pytest.raises(ValidationError):
        nets.PeConfig(-1)


def test_pe_rejects_nonfinite_input():
    with pytest.raises(ValidationError):
        nets.positional_encode(np.array([[np.nan, 0.0, 0.0]]), nets.PeConfig(2))


def test_pe_input_gradient_matches_fd():
    cfg = nets.PeConfig(4, zeta=2.4)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 3))
    # scalar functional: sum of enc @ a
    a = rng.normal(size=(cfg.out_dim(3), 1))

    fwd = nets.positional_encode_full(x0, cfg)
    g_enc = np.tile(a.T, (5, 1))
    g = T.value_of(nets.pe_input_gradient(g_enc, fwd))

    h = 1e-6
    fd = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = float(np.sum(T.value_of(nets.positional_encode(xp, cfg)) @ a))
        fm = float(np.sum(T.value_of(nets.positional_encode(xm, cfg)) @ a))
        fd.flat[i] = (fp - fm) / (2 * h)
    assert np.allclose(g, fd, atol=1e-6)


# ---------------------------------------------------------------------------
# MLP


def test_mlp_spec_validation():
    with pytest.raises(ValidationError):
        nets.MlpSpec(in_dim=0, widths=(8,), out_dim=1)
    with pytest.raises(ValidationError):
        nets.MlpSpec(in_dim=3, widths=(8, 8), out_dim=1, skip_at=0)
    with pytest.raises(ValidationError):
        nets.MlpSpec(in_dim=3, widths=(8, 8), out_dim=1, skip_at=2)
    with pytest.raises(ValidationError):
        nets.MlpSpec(in_dim=3, widths=(8,), out_dim=1, final="tanh")


def test_mlp_spec_layer_dims_with_skip():
    spec = nets.MlpSpec(in_dim=5, widths=(16, 8, 8), out_dim=2, skip_at=2)
    assert spec.layer_dims() == [(5, 16), (16, 8), (8 + 5, 8), (8, 2)]


def test_mlp_spec_json_roundtrip():
    spec = nets.MlpSpec(in_dim=7, widths=(32, 16), out_dim=4, skip_at=1, beta=50.0, final="sigmoid")
    assert nets.MlpSpec.from_json(spec.to_json()) == spec


def test_mlp_apply_known_linear():
    # no hidden layers: straight affine map
    spec = nets.MlpSpec(in_dim=2, widths=(), out_dim=1)
    Ws = [np.array([[2.0], [-1.0]])]
    bs = [np.array([[0.5]])]
    out = nets.mlp_apply(spec, Ws, bs, np.array([[1.0, 3.0]]))
    assert np.allclose(T.value_of(out), [[2.0 - 3.0 + 0.5]])


def test_mlp_apply_shape_check():
    spec = nets.MlpSpec(in_dim=3, widths=(4,), out_dim=1)
    rng = np.random.default_rng(0)
    Ws, bs = nets.init_mlp(spec, rng)
    with pytest.raises(ValidationError):
        nets.mlp_apply(spec, Ws, bs, np.zeros((2, 5)))


def test_mlp_sigmoid_final_bounds():
    spec = nets.MlpSpec(in_dim=3, widths=(8,), out_dim=3, final="sigmoid")
    Ws, bs = nets.init_mlp(spec, np.random.default_rng(1), scale=2.0)
    out = T.value_of(nets.mlp_apply(spec, Ws, bs, np.random.default_rng(2).normal(size=(20, 3))))
    assert np.all(out > 0) and np.all(out < 1)


def test_mlp_input_gradient_matches_fd():
    spec = nets.MlpSpec(in_dim=3, widths=(16, 8, 8), out_dim=2, skip_at=2, beta=30.0)
    rng = np.random.default_rng(3)
    Ws, bs = nets.init_mlp(spec, rng, scale=0.5)
    x0 = rng.normal(size=(4, 3))

    for col in (0, 1):
        fwd = nets.mlp_apply(spec, Ws, bs, x0, full=True)
        g = T.value_of(nets.mlp_input_gradient(spec, Ws, bs, fwd, out_col=col))
        h = 1e-6
        fd = np.zeros_like(x0)
        for i in range(x0.size):
            xp, xm = x0.copy(), x0.copy()
            xp.flat[i] += h
            xm.flat[i] -= h
            fp = T.value_of(nets.mlp_apply(spec, Ws, bs, xp))[i // 3, col]
            fm = T.value_of(nets.mlp_apply(spec, Ws, bs, xm))[i // 3, col]
            fd.flat[i] = (fp - fm) / (2 * h)
        assert np.allclose(g, fd, atol=1e-5)


def test_mlp_input_gradient_rejects_sigmoid_final():
    spec = nets.MlpSpec(in_dim=3, widths=(4,), out_dim=1, final="sigmoid")
    Ws, bs = nets.init_mlp(spec, np.random.default_rng(0))
    fwd = nets.mlp_apply(spec, Ws, bs, np.zeros((1, 3)), full=True)
    with pytest.raises(ValidationError):
        nets.mlp_input_gradient(spec, Ws, bs, fwd)


def test_mlp_input_gradient_differentiable_wrt_weights():
    # the gradient chain is itself made of tape ops, so an eikonal-style loss
    # can backprop into the weights
    spec = nets.MlpSpec(in_dim=3, widths=(8, 8), out_dim=1, skip_at=1)
    Ws0, bs0 = nets.init_mlp(spec, np.random.default_rng(4), scale=0.3)
    x = np.random.default_rng(5).normal(size=(6, 3))

    tp = T.Tape()
    Ws = [tp.var(W.copy()) for W in Ws0]
    bs = [tp.var(b.copy()) for b in bs0]
    fwd = nets.mlp_apply(spec, Ws, bs, x, full=True)
    g = nets.mlp_input_gradient(spec, Ws, bs, fwd)
    loss = T.ssum(T.square(T.sub(T.l2norm_rows(g), 1.0)))
    tp.backward(loss)
    assert any(W.grad is not None and np.any(W.grad != 0) for W in Ws)


def test_init_mlp_zero_last_pins_output():
    spec = nets.MlpSpec(in_dim=3, widths=(16, 16), out_dim=4, skip_at=1)
    Ws, bs = nets.init_mlp(spec, np.random.default_rng(6), zero_last=True)
    out = T.value_of(nets.mlp_apply(spec, Ws, bs, np.random.default_rng(7).normal(size=(10, 3))))
    assert np.array_equal(out, np.zeros((10, 4)))


def test_geometric_init_starts_as_rough_sphere():
    # the init only approximates ||x|| - radius in expectation; what training
    # relies on is a closed sphere-ish zero set: negative at the center,
    # positive well outside, exactly one crossing along rays from the origin
    radius = 0.7
    pe = nets.PeConfig(6)
    spec = nets.MlpSpec(in_dim=pe.out_dim(3), widths=(128,) * 4, out_dim=1, skip_at=2)
    Ws, bs = nets.geometric_init(spec, radius, np.random.default_rng(8))

    def f(pts):
        enc = T.value_of(nets.positional_encode(pts, pe))
        return T.value_of(nets.mlp_apply(spec, Ws, bs, enc)).ravel()

    assert f(np.zeros((1, 3)))[0] < -0.1

    rng = np.random.default_rng(9)
    dirs = rng.normal(size=(30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.all(f(1.6 * dirs) > 0)

    rr = np.linspace(0.01, 1.6, 200)
    for d in dirs:
        vals = f(rr[:, None] * d[None, :])
        crossings = np.where(np.diff(np.sign(vals)) != 0)[0]
        assert len(crossings) == 1
        assert 0.2 < rr[crossings[0]] < 1.2


def test_geometric_init_fourier_columns_start_silent():
    # first-layer and skip weights on the encoded (non-identity) columns are
    # zeroed so the start shape is band-limited
    pe = nets.PeConfig(4)
    spec = nets.MlpSpec(in_dim=pe.out_dim(3), widths=(16, 8, 8), out_dim=1, skip_at=2)
    Ws, _ = nets.geometric_init(spec, 0.5, np.random.default_rng(0))
    assert np.all(Ws[0][3:, :] == 0)
    prev = spec.widths[1]
    assert np.all(Ws[2][prev + 3 :, :] == 0)
    assert np.any(Ws[0][:3, :] != 0)


def test_geometric_init_requires_scalar_output():
    spec = nets.MlpSpec(in_dim=3, widths=(8,), out_dim=2)
    with pytest.raises(ValidationError):
        nets.geometric_init(spec, 0.5, np.random.default_rng(0))


def test_spatial_gradient_fd_fallback():
    g = nets.spatial_gradient(lambda p: (p**2).sum(axis=1), np.array([[1.0, -2.0, 0.5]]))
    assert np.allclose(g, [[2.0, -4.0, 1.0]], atol=1e-6)
