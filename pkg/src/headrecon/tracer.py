"""Batched ray-surface intersection for implicit SDFs.

Coarse/fine sign-flip search with secant refinement, a dynamic voxel cache for
far-field SDF values, the background-ray drop schedule, and the first-order
implicit-differentiation expression that makes converged hit points
differentiable in field parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import tape as T
from .errors import ValidationError


class GrazingRayError(ValueError):
    """The ray is tangent to the surface: gradient-direction denominator ~ 0."""


@dataclass
class Rays:
    """A batch of rays; all fields are per-row arrays."""

    t: np.ndarray  # origins (n,3)
    v: np.ndarray  # unit directions (n,3)
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        self.t = np.atleast_2d(np.asarray(self.t, dtype=np.float64))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        self.near = np.atleast_1d(np.asarray(self.near, dtype=np.float64))
        self.far = np.atleast_1d(np.asarray(self.far, dtype=np.float64))
        norms = np.linalg.norm(self.v, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("ray directions must be unit vectors")
        if np.any(self.near >= self.far) or np.any(self.near < 0):
            raise ValidationError("rays need 0 <= near < far")

    def __len__(self):
        return self.t.shape[0]

    def at(self, k):
        """Points t + k v for per-ray depths k (n,) -> (n,3)."""
        return self.t + np.asarray(k)[:, None] * self.v


@dataclass
class Hits:
    """Intersection results. Non-converged rows keep NaN position/depth but
    always carry the sampled SDF minimum (and where it occurred) for the
    silhouette loss."""

    x: np.ndarray
    depth: np.ndarray
    converged: np.ndarray
    min_sdf: np.ndarray
    min_pt: np.ndarray


def trace_rays(field, rays: Rays, n_coarse=75, n_fine=25, fine_tol=1e-3, refine_iters=8):
    """Find the first +→− sign flip along each ray, refine it, return Hits.

    ``field`` maps (m,3) -> (m,); every search stage batches all active rays
    into a single field call.
    """
    if n_coarse < 2 or n_fine < 2:
        raise ValidationError("need at least 2 samples per search stage")
    n = len(rays)
    u = np.linspace(0.0, 1.0, n_coarse)
    depths = rays.near[:, None] + (rays.far - rays.near)[:, None] * u[None, :]  # (n, Nc)
    pts = rays.t[:, None, :] + depths[:, :, None] * rays.v[:, None, :]
    f = np.asarray(field(pts.reshape(-1, 3))).reshape(n, n_coarse)

    amin = np.argmin(f, axis=1)
    rows = np.arange(n)
    min_sdf = f[rows, amin]
    min_pt = pts[rows, amin]

    flips = (f[:, :-1] >= 0.0) & (f[:, 1:] < 0.0)
    has = flips.any(axis=1)
    first = np.argmax(flips, axis=1)

    x = np.full((n, 3), np.nan)
    depth = np.full(n, np.nan)
    converged = np.zeros(n, dtype=bool)
    if not has.any():
        return Hits(x, depth, converged, min_sdf, min_pt)

    h = np.flatnonzero(has)
    lo = depths[h, first[h]]
    hi = depths[h, first[h] + 1]

    # fine stage: same equally-spaced scan inside the bracketing interval
    uf = np.linspace(0.0, 1.0, n_fine)
    fdep = lo[:, None] + (hi - lo)[:, None] * uf[None, :]
    fpts = rays.t[h, None, :] + fdep[:, :, None] * rays.v[h, None, :]
    ff = np.asarray(field(fpts.reshape(-1, 3))).reshape(len(h), n_fine)
    fflips = (ff[:, :-1] >= 0.0) & (ff[:, 1:] < 0.0)
    # fresh evaluation normally confirms the bracket; a stale persisted cache
    # can retract it, in which case the ray is treated as a miss
    refinable = fflips.any(axis=1)
    fmin = np.argmin(ff, axis=1)
    sub = ff[np.arange(len(h)), fmin] < min_sdf[h]
    min_sdf[h[sub]] = ff[np.arange(len(h)), fmin][sub]
    min_pt[h[sub]] = fpts[np.arange(len(h)), fmin][sub]
    if not refinable.all():
        keep = np.flatnonzero(refinable)
        h, fdep, ff, fflips = h[keep], fdep[keep], ff[keep], fflips[keep]
        if h.size == 0:
            return Hits(x, depth, converged, min_sdf, min_pt)
    fi = np.argmax(fflips, axis=1)
    hr = np.arange(len(h))
    a = fdep[hr, fi]
    b = fdep[hr, fi + 1]
    fa = ff[hr, fi]
    fb = ff[hr, fi + 1]

    # secant (false position) with bisection interleave, early exit on |f| <= tol
    best_k = a.copy()
    best_f = fa.copy()
    active = np.ones(len(h), dtype=bool)
    for it in range(refine_iters):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        if it % 3 == 2:
            k_new = 0.5 * (a[ia] + b[ia])
        else:
            den = fa[ia] - fb[ia]
            frac = np.where(np.abs(den) > 1e-300, fa[ia] / np.where(den == 0, 1.0, den), 0.5)
            k_new = a[ia] + np.clip(frac, 0.0, 1.0) * (b[ia] - a[ia])
        p_new = rays.t[h[ia]] + k_new[:, None] * rays.v[h[ia]]
        f_new = np.asarray(field(p_new))
        better = np.abs(f_new) < np.abs(best_f[ia])
        best_f[ia[better]] = f_new[better]
        best_k[ia[better]] = k_new[better]
        go_left = f_new >= 0.0
        a[ia[go_left]] = k_new[go_left]
        fa[ia[go_left]] = f_new[go_left]
        b[ia[~go_left]] = k_new[~go_left]
        fb[ia[~go_left]] = f_new[~go_left]
        active[ia] = np.abs(best_f[ia]) > fine_tol

    depth[h] = best_k
    x[h] = rays.t[h] + best_k[:, None] * rays.v[h]
    converged[h] = np.abs(best_f) <= fine_tol
    # refined point may sit a hair below the sampled minima
    sub = best_f < min_sdf[h]
    min_sdf[h[sub]] = best_f[sub]
    min_pt[h[sub]] = x[h[sub]]
    return Hits(x, depth, converged, min_sdf, min_pt)


def trace_ray(field, origin, direction, near, far, n_coarse=75, n_fine=25, fine_tol=1e-3):
    """Single-ray convenience wrapper; returns a Hits with one row."""
    r = Rays(np.asarray(origin)[None, :], np.asarray(direction)[None, :], [near], [far])
    return trace_rays(field, r, n_coarse, n_fine, fine_tol)


class CountingField:
    """Wraps a field callable and counts evaluated rows (for benchmarks/tests)."""

    def __init__(self, field):
        self.field = field
        self.rows = 0
        self.calls = 0

    def __call__(self, x):
        x = np.atleast_2d(x)
        self.rows += x.shape[0]
        self.calls += 1
        return self.field(x)


# ---------------------------------------------------------------------------
# dynamic voxel cache


class VoxelCache:
    """Memoizes far-field SDF values on a voxel grid.

    A query hits only when its voxel holds a valid value >= eps and the
    per-query random forcing (probability p_force) did not trigger; every
    other query evaluates the field at the query point, stores the result in
    the voxel, and returns it fresh. Points outside the box bypass the cache.
    """

    def __init__(self, lo, hi, resolution=64, eps=0.1, p_force=0.2, rng=None):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if resolution < 1 or np.any(self.hi <= self.lo):
            raise ValidationError("cache needs a positive box and resolution")
        self.res = int(resolution)
        self.eps = float(eps)
        self.p_force = float(p_force)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.values = np.zeros(self.res**3)
        self.valid = np.zeros(self.res**3, dtype=bool)
        self.queries = 0
        self.hits = 0
        self.field_evals = 0

    def _voxel_of(self, x):
        ijk = np.floor((x - self.lo) / (self.hi - self.lo) * self.res).astype(np.int64)
        ijk = np.clip(ijk, 0, self.res - 1)
        return (ijk[:, 0] * self.res + ijk[:, 1]) * self.res + ijk[:, 2]

    def query(self, field, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        self.queries += n
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=1)
        flat = self._voxel_of(x)
        cand = inside & self.valid[flat] & (self.values[flat] >= self.eps)
        if self.p_force > 0.0:
            forced = self.rng.random(n) < self.p_force
            cand &= ~forced
        out = np.empty(n)
        out[cand] = self.values[flat[cand]]
        self.hits += int(cand.sum())
        miss = ~cand
        if miss.any():
            fresh = np.asarray(field(x[miss]))
            self.field_evals += int(miss.sum())
            out[miss] = fresh
            store = miss & inside
            if store.any():
                self.values[flat[store]] = out[store]
                self.valid[flat[store]] = True
        return out

    def bind(self, field):
        """Field-shaped callable routing every evaluation through the cache."""
        return lambda pts: self.query(field, pts)

    def invalidate(self):
        self.valid[:] = False


def cached_query(cache: VoxelCache, field, x):
    """SDF value(s) at x through the cache; scalar in, scalar out."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = cache.query(field, np.atleast_2d(x))
    return float(out[0]) if single else out


def invalidate_cache(cache: VoxelCache):
    cache.invalidate()


# ---------------------------------------------------------------------------
# selective background-ray sampling


def background_keep_ratio(epoch, drop_frac=0.12, interval=250, horizon=1000):
    """Fraction of background rays kept at a given epoch.

    One multiplicative (1 - drop_frac) event at each interval boundary up to
    the horizon; constant afterwards.
    """
    events = min(int(epoch) // interval, horizon // interval)
    return (1.0 - drop_frac) ** max(events, 0)


class PixelSampler:
    """Uniform pixel batches over a pool with scheduled background dropping.

    The background pool is permuted once (seeded); the kept set at any epoch is
    a prefix, so drop events nest and the keep count follows the schedule
    exactly up to rounding. Foreground pixels are never dropped.
    """

    def __init__(self, fg_mask_flat, rng, drop_frac=0.12, interval=250, horizon=1000):
        fg_mask_flat = np.asarray(fg_mask_flat, dtype=bool)
        if fg_mask_flat.size == 0:
            raise ValidationError("empty pixel pool")
        self.fg = np.flatnonzero(fg_mask_flat)
        bg = np.flatnonzero(~fg_mask_flat)
        self.bg = rng.permutation(bg)
        self.drop_frac = drop_frac
        self.interval = interval
        self.horizon = horizon

    def keep_ratio(self, epoch):
        return background_keep_ratio(epoch, self.drop_frac, self.interval, self.horizon)

    def kept_pixels(self, epoch):
        n_keep = int(round(len(self.bg) * self.keep_ratio(epoch)))
        return np.concatenate([self.fg, self.bg[:n_keep]])

    def batch(self, epoch, batch_size, rng):
        kept = self.kept_pixels(epoch)
        if batch_size >= len(kept):
            return kept
        return rng.choice(kept, size=batch_size, replace=False)


def next_pixel_batch(sampler: PixelSampler, epoch, batch_size, rng):
    """Draw a pixel batch for this epoch under the drop schedule."""
    return sampler.batch(epoch, batch_size, rng)


# ---------------------------------------------------------------------------
# differentiable intersection


def differentiable_intersection(eval_f, grad_f, x0, v, grazing_tol=1e-6):
    """Re-expresses converged hit points so gradients reach field parameters.

        x_s = x0 - v * f(x0; theta) / (grad f(x0) . v)

    x0 and the denominator are constants of differentiation; only f(x0; theta)
    carries gradients. ``eval_f`` evaluates the field under the live tape,
    ``grad_f`` is the value-only spatial gradient. Raises GrazingRayError if
    any denominator is smaller than ``grazing_tol`` (callers filter first).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    g = np.asarray(grad_f(x0))
    denom = np.sum(g * v, axis=1)
    if np.any(np.abs(denom) < grazing_tol):
        raise GrazingRayError("|grad f . v| below tolerance; exclude ray from the RGB loss")
    fvar = eval_f(x0)  # (n,1), possibly taped
    return T.sub(x0, T.mul(v, T.div(fvar, denom[:, None])))


def grazing_mask(grad, v, grazing_tol=1e-6):
    """Rows where the intersection denominator is too small to invert."""
    denom = np.sum(np.asarray(grad) * np.asarray(v), axis=1)
    return np.abs(denom) < grazing_tol
