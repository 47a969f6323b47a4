"""Few-shot scene fitting on top of a trained prior: optimize a latent pair
(and later the deformation/renderer weights) against photometric, silhouette,
and eikonal terms,

    L = L_RGB + lam6 * L_Mask + lam7 * L_Eik,

with the reference SDF frozen bitwise throughout. Hit points are re-expressed
with the implicit-differentiation correction so color gradients can move the
geometry.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, asdict

import numpy as np

from . import data as datamod
from . import fields, mesh as meshmod, optim, prior, tracer
from . import tape as T
from .errors import DivergenceError, ValidationError

SCENE_LO = datamod.SCENE_LO
SCENE_HI = datamod.SCENE_HI

FIT_HISTORY_FIELDS = ("epoch", "rgb", "mask", "eik", "total", "lam8", "lr", "n_hit", "phase")


# ---------------------------------------------------------------------------
# loss pieces


def silhouette_estimate(min_sdf, lam8):
    """sigmoid(-lam8 * min_sdf): ~1 for rays whose minimum field value is well
    inside, ~0 for rays that stay far outside."""
    return T.sigmoid(T.mul(min_sdf, -lam8))


def loss_rgb(pred, observed, n_total):
    """L1 photometric error over hitting foreground rays, normalized by the
    FULL batch size (misses count in the denominator, not the sum)."""
    if n_total <= 0:
        raise ValidationError("empty pixel batch")
    if _rows(pred) == 0:
        return 0.0
    return T.mul(T.ssum(T.absval(T.sub(pred, observed))), 1.0 / n_total)


def loss_mask(m, silhouettes, lam8, n_total):
    """Binary cross-entropy between mask labels and silhouette estimates over
    the non-RGB rays, scaled by 1/(lam8 |P|)."""
    if n_total <= 0:
        raise ValidationError("empty pixel batch")
    if _rows(silhouettes) == 0:
        return 0.0
    s = np.clip(np.asarray(T.value_of(silhouettes), dtype=np.float64), 1e-12, 1 - 1e-12)
    m = np.asarray(m, dtype=np.float64).reshape(s.shape)
    ce = -(m * np.log(s) + (1.0 - m) * np.log(1.0 - s))
    return float(ce.sum() / (lam8 * n_total))


def loss_mask_logits(u, m, lam8, n_total):
    """Same cross-entropy written in the silhouette logit u = -lam8 * f_min,
    the numerically stable form used during optimization:
    CE = softplus(u) - m u."""
    if _rows(u) == 0:
        return 0.0
    m = np.asarray(m, dtype=np.float64).reshape(-1, 1)
    ce = T.sub(T.softplus(u, 1.0), T.mul(u, m))
    return T.mul(T.ssum(ce), 1.0 / (lam8 * n_total))


def _rows(a):
    return np.asarray(T.value_of(a)).shape[0]


def lam8_schedule(lam8_init, epoch, double_every=250):
    """Silhouette sharpness: doubles every ``double_every`` epochs."""
    return float(lam8_init) * 2.0 ** (int(epoch) // int(double_every))


# ---------------------------------------------------------------------------
# configuration / results


@dataclass
class FitConfig:
    lam_mask: float = 100.0  # lam6
    lam_eikonal: float = 0.1  # lam7
    lam8_init: float = 50.0
    lam8_double_every: int = 250
    epochs: int = 2000
    unfreeze_epoch: int = 100
    lr: float = 1e-4
    latent_lr: float = 1e-3  # codes travel much farther than weights
    lr_decay: float = 0.5
    lr_milestones: tuple = (1000, 1500)
    pixels_per_batch: int = 256
    latent_init_std: float = 0.01
    eik_uniform: int = 512
    eik_surface: int = 256
    eik_noise: float = 0.05
    n_coarse: int = 75
    n_fine: int = 25
    fine_tol: float = 1e-3
    use_cache: bool = True
    cache_persist: bool = False
    cache_resolution: int = 64
    selective_sampling: bool = True
    use_implicit_grad: bool = True
    grazing_tol: float = 1e-6
    warmup_epochs: int = 20

    def __post_init__(self):
        if not (0 <= self.unfreeze_epoch < self.epochs):
            raise ValidationError("unfreeze epoch must precede the final epoch")
        self.lr_milestones = tuple(self.lr_milestones)

    def to_json(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @staticmethod
    def from_json(d):
        return FitConfig(**d)


@dataclass
class FittedModel:
    fp: fields.FieldParams  # fitted def/rend decoders + untouched reference
    z: fields.LatentPair
    theta_ref_hash: str
    history: list
    config: FitConfig

    def sdf(self) -> fields.SdfField:
        return fields.SdfField(self.fp, self.z.z_sdf)

    def save(self, path):
        arrays = dict(self.fp.named_arrays())
        arrays["z_sdf"] = self.z.z_sdf
        arrays["z_r"] = self.z.z_r
        meta = {
            "fp": datamod.fieldparams_meta(self.fp),
            "config": self.config.to_json(),
            "theta_ref_hash": self.theta_ref_hash,
            "history": self.history,
        }
        datamod.save_checkpoint(path, "fit", meta, arrays)

    @staticmethod
    def load(path) -> "FittedModel":
        kind, meta, arrays = datamod.load_checkpoint(path)
        if kind != "fit":
            raise ValidationError(f"{path} is a '{kind}' checkpoint, expected 'fit'")
        fp = datamod.fieldparams_from_meta(meta["fp"], arrays)
        return FittedModel(
            fp,
            fields.LatentPair(arrays["z_sdf"], arrays["z_r"]),
            meta["theta_ref_hash"],
            meta.get("history", []),
            FitConfig.from_json(meta["config"]),
        )


def theta_ref_hash(fp) -> str:
    return datamod.array_hash(*fp.ref_W, *fp.ref_b)


# ---------------------------------------------------------------------------
# camera perturbation


def _rodrigues(axis, angle):
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def perturb_cameras(scene, sigma, seed=0):
    """Scene with noisy camera poses: position noise N(0, sigma^2) per axis and
    a random-axis rotation with angle ~ N(0, sigma), re-orthonormalized.
    sigma = 0 returns an identical copy."""
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    out = copy.deepcopy(scene)
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    for i, cam in enumerate(out.cameras):
        center = cam.center + rng.normal(0.0, sigma, size=3)
        axis = rng.normal(size=3)
        angle = rng.normal(0.0, sigma)
        R = _rodrigues(axis, angle) @ cam.R
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] *= -1
            R = u @ vt
        out.cameras[i] = datamod.Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            R=R, t=-R @ center, width=cam.width, height=cam.height,
        )
    return out


# ---------------------------------------------------------------------------
# fitting


class _PixelPool:
    """All pixels of the fitted views flattened into one ray pool."""

    def __init__(self, scene):
        origins, dirs, colors, fg = [], [], [], []
        for img, msk, cam in zip(scene.images, scene.masks, scene.cameras):
            o, d = cam.pixel_rays()
            origins.append(o)
            dirs.append(d)
            colors.append(img.reshape(-1, 3))
            fg.append(msk.ravel())
        self.origins = np.vstack(origins)
        self.dirs = np.vstack(dirs)
        self.colors = np.vstack(colors)
        self.fg = np.concatenate(fg)
        self.near, self.far, self.valid = datamod.box_near_far(self.origins, self.dirs)


def fit_scene(
    scene, prior_result, cfg: FitConfig = None, seed=0, views=None, log_path=None, on_epoch=None
) -> FittedModel:
    """Two-phase fit of one scene against a trained prior.

    Phase 1 (epoch < unfreeze): only the latent pair moves. Phase 2: the
    deformation and renderer weights join with a fresh optimizer; the
    reference SDF stays untouched either way. ``on_epoch(epoch, fp, z_sdf, z_r)``
    runs after each update (snapshotting, early inspection).
    """
    cfg = cfg or FitConfig()
    if views is not None:
        scene = scene.subset(datamod.spread_view_indices(scene.n_views, views))
    rng = np.random.default_rng(seed)

    fp = prior_result.fp.clone()
    fp.pe_ref.zeta = float(fp.pe_ref.num_freqs)  # prior is trained; no masking
    ref_hash = theta_ref_hash(fp)

    z_sdf = rng.normal(0.0, cfg.latent_init_std, size=(1, fp.d_s))
    z_r = rng.normal(0.0, cfg.latent_init_std, size=(1, fp.d_r))

    pool = _PixelPool(scene)
    sampler = tracer.PixelSampler(
        pool.fg, rng, drop_frac=0.12 if cfg.selective_sampling else 0.0
    )
    cache = (
        tracer.VoxelCache(
            SCENE_LO, SCENE_HI, resolution=cfg.cache_resolution,
            rng=np.random.default_rng(rng.integers(2**63)),
        )
        if cfg.use_cache
        else None
    )

    opt_z = optim.Adam([z_sdf, z_r], lr=cfg.latent_lr)
    opt_net = None
    phase = 1
    history = []
    hits_since_warmup = 0
    for epoch in range(cfg.epochs):
        if phase == 1 and epoch >= cfg.unfreeze_epoch:
            phase = 2
            opt_net = optim.Adam(fp.def_W + fp.def_b + fp.rend_W + fp.rend_b, lr=cfg.lr)
        opt_z.lr = optim.decay_at(cfg.latent_lr, epoch, cfg.lr_milestones, cfg.lr_decay)
        if opt_net is not None:
            opt_net.lr = optim.decay_at(cfg.lr, epoch, cfg.lr_milestones, cfg.lr_decay)
        lam8 = lam8_schedule(cfg.lam8_init, epoch, cfg.lam8_double_every)

        row = _fit_step(
            fp, z_sdf, z_r, pool, sampler, cache, cfg, rng, opt_z, opt_net, epoch, lam8, phase
        )
        if not np.isfinite(row["total"]):
            raise DivergenceError(f"non-finite fitting loss at epoch {epoch}: {row}")
        if epoch >= cfg.warmup_epochs:
            hits_since_warmup += row["n_hit"]
            if epoch >= cfg.warmup_epochs + 10 and hits_since_warmup == 0:
                raise DivergenceError(
                    "no ray intersected the surface after warm-up; "
                    "the prior did not initialize a head in front of the cameras"
                )
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, fp, z_sdf, z_r)

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=FIT_HISTORY_FIELDS)
            w.writeheader()
            w.writerows(history)

    fitted = FittedModel(fp, fields.LatentPair(z_sdf[0], z_r[0]), ref_hash, history, cfg)
    assert theta_ref_hash(fp) == ref_hash  # freeze contract
    return fitted


def _fit_step(fp, z_sdf, z_r, pool, sampler, cache, cfg, rng, opt_z, opt_net, epoch, lam8, phase):
    batch = sampler.batch(epoch, cfg.pixels_per_batch, rng)
    n_total = len(batch)
    in_box = pool.valid[batch]
    rows = batch[in_box]

    field = fields.SdfField(fp, z_sdf[0])
    if cache is not None:
        if not cfg.cache_persist:
            cache.invalidate()
        field_eval = cache.bind(field)
    else:
        field_eval = field

    rays = tracer.Rays(pool.origins[rows], pool.dirs[rows], pool.near[rows], pool.far[rows])
    hits = tracer.trace_rays(field_eval, rays, cfg.n_coarse, cfg.n_fine, cfg.fine_tol)

    fg = pool.fg[rows]
    is_rgb = hits.converged & fg
    is_mask = ~is_rgb

    tp = T.Tape()
    mp = fields.ModelPass(fp, tp, train=("def", "rend") if phase == 2 else ())
    zs_var = tp.var(z_sdf)
    zr_var = tp.var(z_r)

    def composed_at(x, n, **kw):
        return mp.composed(x, T.broadcast_rows(zs_var, n), **kw)

    # photometric term on hitting foreground rays (grazing ones excluded)
    l_rgb = 0.0
    n_hit = int(is_rgb.sum())
    if n_hit:
        idx = np.flatnonzero(is_rgb)
        x0 = hits.x[idx]
        v = pool.dirs[rows][idx]
        g0 = field.gradient(x0)
        keep = ~tracer.grazing_mask(g0, v, cfg.grazing_tol)
        idx, x0, v, g0 = idx[keep], x0[keep], v[keep], g0[keep]
        if len(idx):
            if cfg.use_implicit_grad:
                x_s = tracer.differentiable_intersection(
                    lambda p: composed_at(p, len(p)), lambda p: g0, x0, v, cfg.grazing_tol
                )
            else:
                x_s = x0
            n = len(idx)
            _, grad_s, _, gamma, x_ref = composed_at(x_s, n, want_grad=True, want_parts=True)
            n_unit = T.mul(grad_s, T.div(1.0, T.l2norm_rows(grad_s)))
            pred = mp.render(x_ref, n_unit, v, gamma, T.broadcast_rows(zr_var, n))
            l_rgb = loss_rgb(pred, pool.colors[rows][idx], n_total)

    # silhouette term on everything else that crosses the scene box
    l_mask = 0.0
    if is_mask.any():
        midx = np.flatnonzero(is_mask)
        f_min = composed_at(hits.min_pt[midx], len(midx))
        u = T.mul(f_min, -lam8)
        l_mask = loss_mask_logits(u, fg[midx].astype(np.float64), lam8, n_total)

    # eikonal regularizer on uniform + near-surface samples
    xu = rng.uniform(SCENE_LO, SCENE_HI, size=(cfg.eik_uniform, 3))
    xs = hits.x[hits.converged]
    if len(xs):
        take = min(len(xs), cfg.eik_surface)
        sel = rng.choice(len(xs), size=take, replace=False)
        xs = xs[sel] + rng.normal(0.0, cfg.eik_noise, size=(take, 3))
        xe = np.vstack([xu, xs])
    else:
        xe = xu
    _, g_e = composed_at(xe, len(xe), want_grad=True)
    l_eik = T.mul(prior.loss_eikonal(g_e), 1.0 / len(xe))

    total = T.add(T.add(l_rgb, T.mul(l_mask, cfg.lam_mask)), T.mul(l_eik, cfg.lam_eikonal))
    tp.backward(total)

    opt_z.step([zs_var.grad, zr_var.grad])
    if phase == 2:
        grads = []
        for g in ("def", "rend"):
            gw, gb = mp.grads(g)
            grads.extend(gw)
            grads.extend(gb)
        opt_net.step(grads)

    row = dict(
        zip(
            FIT_HISTORY_FIELDS,
            [
                epoch,
                float(np.asarray(T.value_of(l_rgb)).squeeze()),
                float(np.asarray(T.value_of(l_mask)).squeeze()),
                float(np.asarray(T.value_of(l_eik)).squeeze()),
                float(np.asarray(T.value_of(total)).squeeze()),
                lam8,
                optim.decay_at(cfg.lr, epoch, cfg.lr_milestones, cfg.lr_decay),
                n_hit,
                phase,
            ],
        )
    )
    tp.release()
    return row


# ---------------------------------------------------------------------------
# evaluation


def extract_mesh(fp, z_sdf_vec, resolution=64):
    """Marching-cubes mesh of the composed field over the scene box."""
    return meshmod.marching_cubes(
        fields.SdfField(fp, z_sdf_vec), SCENE_LO, SCENE_HI, resolution
    )


def eikonal_abs_residual(fp, z_sdf_vec, points):
    """Mean |  ||grad f|| - 1 | (the fitting-time regularity check)."""
    g = fields.SdfField(fp, z_sdf_vec).gradient(points)
    return float(np.mean(np.abs(np.linalg.norm(g, axis=1) - 1.0)))


def evaluate_fit(fitted: FittedModel, scene, mc_resolution=64, seed=0):
    """Chamfer to scene ground truth plus field-regularity numbers."""
    if scene.gt_points is None:
        raise ValidationError("scene has no ground truth to evaluate against")
    m = extract_mesh(fitted.fp, fitted.z.z_sdf, mc_resolution)
    gt = meshmod.PointCloud(scene.gt_points, scene.gt_normals)
    chamfer = meshmod.chamfer_unidirectional(gt, m)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(SCENE_LO, SCENE_HI, size=(1000, 3))
    return {
        "chamfer": float(chamfer),
        "eikonal_abs": eikonal_abs_residual(fitted.fp, fitted.z.z_sdf, pts),
        "mesh_vertices": int(len(m.vertices)),
        "mesh_components": meshmod.connected_component_count(m),
    }
