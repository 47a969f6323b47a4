"""Analytic head-and-shoulders scenes: a parametric SDF family with exact-ish
distances, landmark extraction by root-finding, and a Lambertian-plus-view-tint
shading model. Every quantity is a pure function of the spec, so ground truth
is reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ValidationError

SCENE_LO = np.array([-1.5, -1.5, -1.5])
SCENE_HI = np.array([1.5, 1.5, 1.5])


@dataclass(frozen=True)
class HeadSpec:
    """Low-dimensional shape + appearance parameters of one synthetic subject.

    Geometry: an ellipsoidal skull blended with a chin sphere, a nose sphere on
    the +z face, a neck capsule and a shoulder capsule. Appearance: base skin
    albedo, a second hair tone above ``hair_y``, and a view-tint strength.
    """

    skull: tuple = (0.62, 0.78, 0.66)
    skull_center_y: float = 0.25
    nose_r: float = 0.10
    nose_out: float = 0.02
    chin_r: float = 0.24
    chin_y: float = -0.33
    chin_z: float = 0.12
    neck_r: float = 0.21
    shoulder_r: float = 0.20
    shoulder_w: float = 0.62
    blend_k: float = 0.12
    albedo: tuple = (0.76, 0.57, 0.48)
    hair_albedo: tuple = (0.22, 0.15, 0.10)
    hair_y: float = 0.55
    tint: float = 0.12

    def to_json(self):
        d = asdict(self)
        d["skull"] = list(self.skull)
        d["albedo"] = list(self.albedo)
        d["hair_albedo"] = list(self.hair_albedo)
        return d

    @staticmethod
    def from_json(d):
        d = dict(d)
        d["skull"] = tuple(d["skull"])
        d["albedo"] = tuple(d["albedo"])
        d["hair_albedo"] = tuple(d["hair_albedo"])
        return HeadSpec(**d)


def headspec_hash(spec: HeadSpec) -> int:
    """Stable integer digest of the spec; seeds all geometry-derived sampling."""
    blob = json.dumps(spec.to_json(), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def random_headspec(rng) -> HeadSpec:
    """Draw a subject from the family's parameter bounds."""
    u = lambda a, b: float(rng.uniform(a, b))
    return HeadSpec(
        skull=(u(0.54, 0.70), u(0.70, 0.86), u(0.58, 0.74)),
        skull_center_y=u(0.20, 0.30),
        nose_r=u(0.07, 0.13),
        nose_out=u(0.0, 0.05),
        chin_r=u(0.18, 0.28),
        chin_y=u(-0.40, -0.26),
        chin_z=u(0.06, 0.18),
        neck_r=u(0.17, 0.25),
        shoulder_r=u(0.16, 0.24),
        shoulder_w=u(0.50, 0.72),
        blend_k=u(0.09, 0.16),
        albedo=(u(0.55, 0.85), u(0.42, 0.66), u(0.35, 0.58)),
        hair_albedo=(u(0.08, 0.35), u(0.06, 0.28), u(0.05, 0.22)),
        hair_y=u(0.45, 0.65),
        tint=u(0.05, 0.2),
    )


# ---------------------------------------------------------------------------
# SDF primitives (vectorized over (n,3))


def _sd_ellipsoid(p, r):
    # Quilez approximation: exact on axes, small error elsewhere for mild aspect
    k0 = np.linalg.norm(p / r, axis=1)
    k1 = np.linalg.norm(p / (r * r), axis=1)
    return np.where(k1 > 1e-12, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12), -np.min(r))


def _sd_sphere(p, c, r):
    return np.linalg.norm(p - c, axis=1) - r


def _sd_capsule(p, a, b, r):
    pa = p - a
    ba = b - a
    h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba[None, :], axis=1) - r


def _smin(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1.0 - h) + a * h - k * h * (1.0 - h)


def head_sdf(spec: HeadSpec, x) -> np.ndarray:
    """Signed distance of the full figure at points (n,3) (or a 3-vector)."""
    p = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c0 = np.array([0.0, spec.skull_center_y, 0.0])
    r = np.asarray(spec.skull)
    d = _sd_ellipsoid(p - c0, r)
    nose_c = np.array([0.0, spec.skull_center_y - 0.12, r[2] + spec.nose_out])
    d = _smin(d, _sd_sphere(p, nose_c, spec.nose_r), spec.blend_k * 0.6)
    chin_c = np.array([0.0, spec.chin_y, spec.chin_z])
    d = _smin(d, _sd_sphere(p, chin_c, spec.chin_r), spec.blend_k)
    neck_a = np.array([0.0, spec.chin_y, 0.0])
    neck_b = np.array([0.0, -1.0, 0.0])
    d = _smin(d, _sd_capsule(p, neck_a, neck_b, spec.neck_r), spec.blend_k)
    sh_a = np.array([-spec.shoulder_w, -1.02, 0.0])
    sh_b = np.array([spec.shoulder_w, -1.02, 0.0])
    d = _smin(d, _sd_capsule(p, sh_a, sh_b, spec.shoulder_r), spec.blend_k)
    return d


def head_normal(spec: HeadSpec, x, h=1e-6):
    """Unit outward normal(s) via central differences on the analytic field."""
    p = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.empty_like(p)
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        g[:, c] = (head_sdf(spec, p + e) - head_sdf(spec, p - e)) / (2.0 * h)
    return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)


def project_to_surface(spec: HeadSpec, x, iters=6):
    """Newton-project points onto the zero level set (for near-surface points)."""
    p = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    for _ in range(iters):
        f = head_sdf(spec, p)
        n = head_normal(spec, p)
        p -= f[:, None] * n
    return p


# ---------------------------------------------------------------------------
# landmarks

LANDMARK_NAMES = ("nose_tip", "chin", "ear_left", "ear_right", "crown", "nape")


def landmarks(spec: HeadSpec) -> np.ndarray:
    """Six anatomical points, each the surface crossing along a fixed probe ray.

    Probes start inside the figure and bisect the inside→outside crossing, so
    the result is deterministic in the spec alone.
    """
    c0 = np.array([0.0, spec.skull_center_y, 0.0])
    probes = [
        (np.array([0.0, spec.skull_center_y - 0.12, 0.0]), np.array([0.0, 0.0, 1.0])),  # nose
        (np.array([0.0, spec.chin_y, spec.chin_z]), np.array([0.0, -0.6, 0.8])),  # chin
        (c0, np.array([-1.0, 0.0, 0.0])),  # ear_left
        (c0, np.array([1.0, 0.0, 0.0])),  # ear_right
        (c0, np.array([0.0, 1.0, 0.0])),  # crown
        (c0, np.array([0.0, 0.0, -1.0])),  # nape
    ]
    out = np.empty((6, 3))
    for i, (org, d) in enumerate(probes):
        d = d / np.linalg.norm(d)
        if head_sdf(spec, org)[0] >= 0:
            raise ValidationError("landmark probe must start inside the figure")
        lo, hi = 0.0, 3.0
        if head_sdf(spec, org + hi * d)[0] <= 0:
            raise ValidationError("landmark probe never exits the figure")
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if head_sdf(spec, org + mid * d)[0] < 0:
                lo = mid
            else:
                hi = mid
        out[i] = org + 0.5 * (lo + hi) * d
    return out


# ---------------------------------------------------------------------------
# shading

_LIGHTS = (
    (np.array([0.45, 0.72, 0.53]), 0.55),
    (np.array([-0.60, 0.25, 0.35]), 0.30),
)
_AMBIENT = 0.34
BACKGROUND_RGB = np.array([0.13, 0.13, 0.15])


def shade(spec: HeadSpec, x, n, v):
    """RGB at surface points: two-light Lambertian on a two-tone albedo with a
    view-dependent rim tint. ``v`` points from the camera toward the surface."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    albedo = np.where(
        (x[:, 1] > spec.hair_y)[:, None],
        np.asarray(spec.hair_albedo)[None, :],
        np.asarray(spec.albedo)[None, :],
    )
    lam = np.full(x.shape[0], _AMBIENT)
    for ldir, lw in _LIGHTS:
        ld = ldir / np.linalg.norm(ldir)
        lam = lam + lw * np.maximum(n @ ld, 0.0)
    facing = np.maximum(-np.sum(n * v, axis=1), 0.0)
    rim = (1.0 - facing) ** 2
    c = albedo * lam[:, None] * (1.0 + spec.tint * (rim - 0.5))[:, None]
    return np.clip(c, 0.0, 1.0)
