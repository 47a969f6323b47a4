"""Shape-and-appearance decoders: a deformation field conditioned on a shape
latent, a shared reference SDF evaluated at deformed coordinates, and a
view-dependent renderer. The composed field is

    f(x) = f_ref(x + delta(x, z_sdf))

and its spatial gradient is assembled explicitly from the networks' input
gradients so that gradient-dependent losses stay differentiable in everything.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import nets
from . import tape as T
from .errors import DegenerateNormalError, ValidationError


@dataclass
class LatentPair:
    """Per-scene shape latent and appearance latent."""

    z_sdf: np.ndarray
    z_r: np.ndarray

    def __post_init__(self):
        self.z_sdf = np.asarray(self.z_sdf, dtype=np.float64).ravel()
        self.z_r = np.asarray(self.z_r, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.z_sdf)) and np.all(np.isfinite(self.z_r))):
            raise ValidationError("latents must be finite")


def interpolate_latents(a: LatentPair, b: LatentPair, alpha: float, beta: float) -> LatentPair:
    """Linear blend: alpha moves the shape latent, beta the appearance latent."""
    if a.z_sdf.shape != b.z_sdf.shape or a.z_r.shape != b.z_r.shape:
        raise ValidationError("latent dimensions do not match")
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValidationError("interpolation weights must lie in [0, 1]")
    return LatentPair(
        (1.0 - alpha) * a.z_sdf + alpha * b.z_sdf,
        (1.0 - beta) * a.z_r + beta * b.z_r,
    )


@dataclass
class FieldParams:
    """All decoder weights plus the encoding configuration.

    The (def, ref) split is explicit so the reference SDF can be frozen on its
    own: fitting updates theta_def/theta_r while theta_ref stays fixed.
    """

    ref_spec: nets.MlpSpec
    def_spec: nets.MlpSpec
    rend_spec: nets.MlpSpec
    ref_W: list
    ref_b: list
    def_W: list
    def_b: list
    rend_W: list
    rend_b: list
    pe_x: nets.PeConfig
    pe_ref: nets.PeConfig
    pe_view: nets.PeConfig
    d_s: int = 32
    d_r: int = 32
    n_gamma: int = 16

    GROUPS = ("ref", "def", "rend")

    def group(self, name):
        if name == "ref":
            return self.ref_W, self.ref_b
        if name == "def":
            return self.def_W, self.def_b
        if name == "rend":
            return self.rend_W, self.rend_b
        raise ValidationError(f"unknown parameter group {name!r}")

    def named_arrays(self):
        """Stable name -> array view over every weight/bias, checkpoint order."""
        out = {}
        for g in self.GROUPS:
            Ws, bs = self.group(g)
            for i, (W, b) in enumerate(zip(Ws, bs)):
                out[f"{g}.W.{i}"] = W
                out[f"{g}.b.{i}"] = b
        return out

    def clone(self):
        return copy.deepcopy(self)


def init_field_params(
    seed,
    d_s=32,
    d_r=32,
    n_gamma=16,
    ref_widths=(128, 128, 128, 128),
    def_widths=(128, 128, 128, 128),
    rend_widths=(128, 128, 128),
    pe_x_freqs=6,
    pe_ref_freqs=6,
    pe_view_freqs=4,
    radius=1.0,
) -> FieldParams:
    """Build the three decoders.

    Reference SDF: geometric (sphere-like) init. Deformation and renderer:
    tiny Gaussian hidden layers with an exactly-zero output layer, so at start
    delta = 0, gamma = 0 and the composed field IS the reference sphere.
    """
    rng = np.random.default_rng(seed)
    pe_x = nets.PeConfig(pe_x_freqs)
    pe_ref = nets.PeConfig(pe_ref_freqs)
    pe_view = nets.PeConfig(pe_view_freqs)

    ref_spec = nets.MlpSpec(pe_ref.out_dim(3), tuple(ref_widths), 1, skip_at=len(ref_widths) // 2)
    def_spec = nets.MlpSpec(
        pe_x.out_dim(3) + d_s, tuple(def_widths), 3 + n_gamma, skip_at=len(def_widths) // 2
    )
    rend_in = 3 + 3 + pe_view.out_dim(3) + n_gamma + d_r
    rend_spec = nets.MlpSpec(
        rend_in, tuple(rend_widths), 3, skip_at=len(rend_widths) // 2, final="sigmoid"
    )

    ref_W, ref_b = nets.geometric_init(ref_spec, radius, rng)
    def_W, def_b = nets.init_mlp(def_spec, rng, scale=1e-2, zero_last=True)
    rend_W, rend_b = nets.init_mlp(rend_spec, rng, scale=1e-2, zero_last=True)
    return FieldParams(
        ref_spec, def_spec, rend_spec,
        ref_W, ref_b, def_W, def_b, rend_W, rend_b,
        pe_x, pe_ref, pe_view, d_s, d_r, n_gamma,
    )


class ModelPass:
    """One evaluation context over possibly-taped parameters.

    ``train`` names the groups wrapped as tape Vars this step ("ref", "def",
    "rend"); everything else stays a plain array and receives no gradient.
    With no tape at all this is a pure numpy forward pass.
    """

    def __init__(self, fp: FieldParams, tp=None, train=()):
        self.fp = fp
        self.tape = tp
        self.vars = {}
        self.p = {}
        for g in FieldParams.GROUPS:
            Ws, bs = fp.group(g)
            if tp is not None and g in train:
                Wv = [tp.var(W) for W in Ws]
                bv = [tp.var(b) for b in bs]
                self.vars[g] = (Wv, bv)
                self.p[g] = (Wv, bv)
            else:
                self.p[g] = (Ws, bs)

    def grads(self, group):
        """(weight grads, bias grads) after backward; None entries for unreached."""
        Wv, bv = self.vars[group]
        return [w.grad for w in Wv], [b.grad for b in bv]

    # -- decoders ----------------------------------------------------------

    def deform(self, x, z_rows, full=False):
        """delta, gamma at points (n,3) with per-row shape latents (n, d_s)."""
        pef = nets.positional_encode_full(x, self.fp.pe_x)
        inp = T.concat([pef.enc, z_rows], axis=1)
        Ws, bs = self.p["def"]
        fwd = nets.mlp_apply(self.fp.def_spec, Ws, bs, inp, full=True)
        delta = T.cols(fwd.out, 0, 3)
        gamma = T.cols(fwd.out, 3, 3 + self.fp.n_gamma)
        if full:
            return delta, gamma, pef, fwd
        return delta, gamma

    def ref_sdf(self, x_ref, full=False):
        pef = nets.positional_encode_full(x_ref, self.fp.pe_ref)
        Ws, bs = self.p["ref"]
        fwd = nets.mlp_apply(self.fp.ref_spec, Ws, bs, pef.enc, full=True)
        if full:
            return fwd.out, pef, fwd
        return fwd.out

    def composed(self, x, z_rows, want_grad=False, want_parts=False):
        """f(x) as (n,1); optionally also d f/d x (n,3) and (delta, gamma, x_ref).

        The gradient is built from tape primitives, so downstream losses on it
        (eikonal) backpropagate into parameters and latents.
        """
        delta, gamma, pe_x_fwd, def_fwd = self.deform(x, z_rows, full=True)
        x_ref = T.add(x, delta)
        f, pe_ref_fwd, ref_fwd = self.ref_sdf(x_ref, full=True)
        if not want_grad:
            return (f, delta, gamma, x_ref) if want_parts else f

        Ws_r, bs_r = self.p["ref"]
        g_enc = nets.mlp_input_gradient(self.fp.ref_spec, Ws_r, bs_r, ref_fwd, 0)
        g_ref = nets.pe_input_gradient(g_enc, pe_ref_fwd)  # df/dx_ref, (n,3)

        # chain through the deformation jacobian: df/dx_c = g_ref_c + sum_j g_ref_j dδ_j/dx_c
        Ws_d, bs_d = self.p["def"]
        enc_dim = self.fp.pe_x.out_dim(3)
        grad = g_ref
        for j in range(3):
            gj_in = nets.mlp_input_gradient(self.fp.def_spec, Ws_d, bs_d, def_fwd, j)
            gj_enc = T.cols(gj_in, 0, enc_dim)
            j_row = nets.pe_input_gradient(gj_enc, pe_x_fwd)  # dδ_j/dx, (n,3)
            grad = T.add(grad, T.mul(T.cols(g_ref, j, j + 1), j_row))
        if want_parts:
            return f, grad, delta, gamma, x_ref
        return f, grad

    def render(self, x_ref, n, v, gamma, zr_rows):
        """RGB in [0,1] for surface points with unit normals and view directions."""
        enc_v = nets.positional_encode(v, self.fp.pe_view)
        inp = T.concat([x_ref, n, enc_v, gamma, zr_rows], axis=1)
        Ws, bs = self.p["rend"]
        return nets.mlp_apply(self.fp.rend_spec, Ws, bs, inp)


# ---------------------------------------------------------------------------
# value-only views (tracer / meshing / evaluation)


class SdfField:
    """Callable composed-SDF handle for one latent: (n,3) -> (n,) raw numpy.

    ``gradient`` is the exact reverse-mode spatial gradient (no tape recorded,
    everything dispatches to plain numpy)."""

    def __init__(self, fp: FieldParams, z_sdf):
        self.fp = fp
        self.z_sdf = np.asarray(z_sdf, dtype=np.float64).ravel()
        if self.z_sdf.shape != (fp.d_s,):
            raise ValidationError(f"z_sdf must have dim {fp.d_s}")

    def _rows(self, n):
        return np.broadcast_to(self.z_sdf, (n, self.fp.d_s))

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mp = ModelPass(self.fp)
        return T.value_of(mp.composed(x, self._rows(x.shape[0])))[:, 0]

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mp = ModelPass(self.fp)
        _, g = mp.composed(x, self._rows(x.shape[0]), want_grad=True)
        return T.value_of(g)


def deform(fp: FieldParams, z_sdf, x):
    """delta, gamma at points (n,3) for a single latent, raw numpy."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z_rows = np.broadcast_to(np.asarray(z_sdf, dtype=np.float64).ravel(), (x.shape[0], fp.d_s))
    d, g = ModelPass(fp).deform(x, z_rows)
    return T.value_of(d), T.value_of(g)


def composed_sdf(fp: FieldParams, z_sdf, x):
    """f(x) values, shape (n,)."""
    return SdfField(fp, z_sdf)(x)


def surface_normal(fp: FieldParams, z_sdf, x):
    """Unit outward normal(s) of the composed field at x."""
    g = SdfField(fp, z_sdf).gradient(x)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(nrm < 1e-8):
        raise DegenerateNormalError("gradient norm below 1e-8; no well-defined normal")
    return g / nrm


def render_color(fp: FieldParams, z_r, x_ref, n, v, gamma):
    """RGB values at surface samples, raw numpy, shape (n,3)."""
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=np.float64))
    z_r = np.asarray(z_r, dtype=np.float64).ravel()
    if z_r.shape != (fp.d_r,):
        raise ValidationError(f"z_r must have dim {fp.d_r}")
    zr_rows = np.broadcast_to(z_r, (x_ref.shape[0], fp.d_r))
    out = ModelPass(fp).render(
        x_ref, np.atleast_2d(n), np.atleast_2d(v), np.atleast_2d(gamma), zr_rows
    )
    return T.value_of(out)
