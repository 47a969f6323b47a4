"""Coordinate-network building blocks: positional encoding with coarse-to-fine
frequency masking, softplus MLPs with one input skip connection, exact input
gradients built from tape primitives, and sphere-like geometric initialization.

All batch interfaces are row-major: points/features are (n, d) arrays (or taped
Vars); parameters may be a mix of Vars (trainable this step) and plain arrays
(frozen). Everything routes through :mod:`headrecon.tape` ops, so the same code
serves taped training passes and raw numpy inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .errors import ValidationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


# ---------------------------------------------------------------------------
# positional encoding


@dataclass
class PeConfig:
    """Fourier feature encoding with a progress parameter for frequency masking.

    ``num_freqs`` octaves with frequencies 2^k, k = 0..L-1. ``zeta`` in [0, L]
    controls the per-band mask weight (``pe_band_weights``); identity channels
    are never masked. ``zeta`` defaults to fully unmasked.
    """

    num_freqs: int
    include_identity: bool = True
    zeta: float = field(default=-1.0)

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValidationError("num_freqs must be >= 0")
        if self.zeta < 0.0:
            self.zeta = float(self.num_freqs)
        self.zeta = float(np.clip(self.zeta, 0.0, self.num_freqs))

    def out_dim(self, in_dim: int) -> int:
        base = in_dim if self.include_identity else 0
        return base + 2 * self.num_freqs * in_dim


def pe_band_weight(k: int, zeta: float) -> float:
    """Mask weight for frequency band k at progress zeta.

    0 below the band, a half-cosine ramp across one unit of progress, 1 above.
    """
    d = zeta - k
    if d <= 0.0:
        return 0.0
    if d >= 1.0:
        return 1.0
    return (1.0 - np.cos(d * np.pi)) / 2.0


def pe_band_weights(cfg: PeConfig) -> np.ndarray:
    return np.array([pe_band_weight(k, cfg.zeta) for k in range(cfg.num_freqs)])


@dataclass
class PeForward:
    """Encoding output plus the per-band sin/cos values needed for input-gradient
    pushback. ``sin[k]``/``cos[k]`` are the unmasked band values of sin(2^k x)."""

    enc: object  # (n, out_dim) Var or ndarray
    sin: list
    cos: list
    weights: np.ndarray
    cfg: PeConfig
    in_dim: int


def positional_encode(x, cfg: PeConfig):
    """Encode points (n, d) -> (n, d(1+2L)) with band masking. Value-only output."""
    return positional_encode_full(x, cfg).enc


def positional_encode_full(x, cfg: PeConfig) -> PeForward:
    xv = T.value_of(x)
    if not np.all(np.isfinite(xv)):
        raise ValidationError("positional encoding input must be finite")
    d = xv.shape[1]
    w = pe_band_weights(cfg)
    parts = [x] if cfg.include_identity else []
    sins, coss = [], []
    for k in range(cfg.num_freqs):
        arg = T.mul(x, float(2.0**k))
        s, c = T.sin(arg), T.cos(arg)
        sins.append(s)
        coss.append(c)
        parts.append(T.mul(s, float(w[k])))
        parts.append(T.mul(c, float(w[k])))
    enc = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    return PeForward(enc, sins, coss, w, cfg, d)


def pe_input_gradient(g_enc, fwd: PeForward):
    """Push a gradient w.r.t. the encoding back to the raw coordinates.

    d(enc)/dx per band is w_k 2^k (cos, -sin); identity passes through.
    Works on taped values, so the result stays differentiable w.r.t. anything
    upstream (parameters, latents, the points themselves).
    """
    d = fwd.in_dim
    off = 0
    if fwd.cfg.include_identity:
        g_x = T.cols(g_enc, 0, d)
        off = d
    else:
        g_x = None
    for k in range(fwd.cfg.num_freqs):
        g_sin = T.cols(g_enc, off, off + d)
        g_cos = T.cols(g_enc, off + d, off + 2 * d)
        off += 2 * d
        scale = float(fwd.weights[k] * 2.0**k)
        if scale == 0.0:
            continue
        band = T.mul(T.sub(T.mul(g_sin, fwd.cos[k]), T.mul(g_cos, fwd.sin[k])), scale)
        g_x = band if g_x is None else T.add(g_x, band)
    if g_x is None:
        g_x = np.zeros((T.value_of(g_enc).shape[0], d))
    return g_x


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    """Layer plan: ``widths`` hidden layers (softplus), then a linear output.

    ``skip_at`` names the hidden layer whose input is concat(h, input)/sqrt(2);
    the decoders always use exactly one skip, but plain feed-forward stacks
    (skip_at=None) are allowed for small utility nets.
    """

    in_dim: int
    widths: tuple
    out_dim: int
    skip_at: int | None = None
    beta: float = 100.0
    final: str = "linear"  # or "sigmoid"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ValidationError("MlpSpec dimensions must be positive")
        if self.skip_at is not None and not (0 < self.skip_at < len(self.widths)):
            raise ValidationError("skip_at must name an interior hidden layer")
        if self.final not in ("linear", "sigmoid"):
            raise ValidationError(f"unknown final activation {self.final!r}")

    def layer_dims(self):
        """(fan_in, fan_out) per layer, including the output layer."""
        dims = []
        prev = self.in_dim
        for i, w in enumerate(self.widths):
            fan_in = prev + self.in_dim if i == self.skip_at else prev
            dims.append((fan_in, w))
            prev = w
        dims.append((prev, self.out_dim))
        return dims

    def to_json(self):
        return {
            "in_dim": self.in_dim,
            "widths": list(self.widths),
            "out_dim": self.out_dim,
            "skip_at": self.skip_at,
            "beta": self.beta,
            "final": self.final,
        }

    @staticmethod
    def from_json(d):
        return MlpSpec(
            in_dim=int(d["in_dim"]),
            widths=tuple(int(w) for w in d["widths"]),
            out_dim=int(d["out_dim"]),
            skip_at=None if d["skip_at"] is None else int(d["skip_at"]),
            beta=float(d["beta"]),
            final=str(d["final"]),
        )


@dataclass
class MlpForward:
    """Forward result with the per-layer pre-activations needed to rebuild the
    input-gradient chain without a second forward pass."""

    out: object
    pre: list  # hidden-layer pre-activation values (Var or ndarray)


def mlp_apply(spec: MlpSpec, Ws, bs, x, full=False):
    """Evaluate the MLP on a batch. ``Ws``/``bs`` are per-layer weight (in, out)
    and bias (1, out) arrays or Vars; ``x`` is (n, in_dim)."""
    xv = T.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != spec.in_dim:
        raise ValidationError(f"mlp input has shape {xv.shape}, expected (n, {spec.in_dim})")
    h = x
    pre = []
    for i in range(len(spec.widths)):
        if i == spec.skip_at:
            h = T.mul(T.concat([h, x], axis=1), _INV_SQRT2)
        z = T.add(T.matmul(h, Ws[i]), bs[i])
        pre.append(z)
        h = T.softplus(z, beta=spec.beta)
    out = T.add(T.matmul(h, Ws[-1]), bs[-1])
    if spec.final == "sigmoid":
        out = T.sigmoid(out)
    if full:
        return MlpForward(out, pre)
    return out


def mlp_input_gradient(spec: MlpSpec, Ws, bs, fwd: MlpForward, out_col: int = 0):
    """d(out[:, out_col])/d(input) as a (n, in_dim) value, built from tape ops so
    it remains differentiable w.r.t. the weights. Requires a linear final layer."""
    if spec.final != "linear":
        raise ValidationError("input gradients are only defined for linear outputs")
    n = T.value_of(fwd.pre[0]).shape[0] if spec.widths else None
    g = T.transpose(T.cols(Ws[-1], out_col, out_col + 1))  # (1, last_width_or_in)
    if not spec.widths:
        return T.broadcast_rows(g, T.value_of(fwd.out).shape[0])
    g = T.broadcast_rows(g, n)
    g_x = None
    for i in reversed(range(len(spec.widths))):
        g = T.mul(g, T.sigmoid(T.mul(fwd.pre[i], spec.beta)))  # through softplus
        g = T.matmul(g, T.transpose(Ws[i]))
        if i == spec.skip_at:
            g = T.mul(g, _INV_SQRT2)
            prev_w = spec.widths[i - 1]
            skip_part = T.cols(g, prev_w, prev_w + spec.in_dim)
            g_x = skip_part if g_x is None else T.add(g_x, skip_part)
            g = T.cols(g, 0, prev_w)
    g_x = g if g_x is None else T.add(g_x, g)
    return g_x


# ---------------------------------------------------------------------------
# initialization


def init_mlp(spec: MlpSpec, rng, scale=1e-2, zero_last=False):
    """Gaussian init. ``zero_last`` zeroes the output layer exactly, which pins
    the network's output to 0 at start regardless of the hidden layers."""
    Ws, bs = [], []
    dims = spec.layer_dims()
    for i, (fin, fout) in enumerate(dims):
        last = i == len(dims) - 1
        if last and zero_last:
            W = np.zeros((fin, fout))
        else:
            W = rng.normal(0.0, scale, size=(fin, fout))
        Ws.append(W)
        bs.append(np.zeros((1, fout)))
    return Ws, bs


def geometric_init(spec: MlpSpec, radius: float, rng, pe_identity_dim: int = 3):
    """Initialize so the net approximates f(x) = ||x|| - radius.

    Hidden weights ~ N(0, 2/fan_out); bias 0. Where the input is a positional
    encoding, only the first ``pe_identity_dim`` input columns (the raw
    coordinates) get nonzero first-layer/skip weights — Fourier columns start
    at zero. The output layer is ~N(sqrt(pi/fan_in), 1e-4) with bias -radius.
    """
    if spec.out_dim != 1:
        raise ValidationError("geometric init is defined for scalar fields")
    Ws, bs = [], []
    dims = spec.layer_dims()
    for i, (fin, fout) in enumerate(dims):
        if i == len(dims) - 1:
            W = rng.normal(np.sqrt(np.pi) / np.sqrt(fin), 1e-4, size=(fin, fout))
            b = np.full((1, fout), -float(radius))
        else:
            W = rng.normal(0.0, np.sqrt(2.0 / fout), size=(fin, fout))
            b = np.zeros((1, fout))
            if i == 0 and spec.in_dim > pe_identity_dim:
                W[pe_identity_dim:, :] = 0.0
            if i == spec.skip_at and spec.in_dim > pe_identity_dim:
                prev = dims[i - 1][1]
                W[prev + pe_identity_dim :, :] = 0.0
        Ws.append(W)
        bs.append(b)
    return Ws, bs


# ---------------------------------------------------------------------------
# generic spatial gradient (finite differences for opaque callables)


def spatial_gradient(fld, x, h=1e-5):
    """Gradient of a scalar field at points (n, 3) (or a single 3-vector).

    Fields exposing an exact ``gradient`` method (the MLP-backed ones) use it;
    opaque callables fall back to central differences.
    """
    if hasattr(fld, "gradient"):
        return fld.gradient(x)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.empty_like(x)
    for c in range(x.shape[1]):
        xp = x.copy()
        xm = x.copy()
        xp[:, c] += h
        xm[:, c] -= h
        g[:, c] = (np.ravel(fld(xp)) - np.ravel(fld(xm))) / (2.0 * h)
    return g[0] if g.shape[0] == 1 and np.asarray(x).ndim == 1 else g
