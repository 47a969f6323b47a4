"""Multi-subject auto-decoder training: per-scene latent pairs plus shared
decoder weights, fit jointly to surface samples, volume samples, landmarks,
and color observations.

Loss terms (weights lam1..lam5 in the total objective):

    L_surf  = sum_j |f(x_j)|                       surface adherence
    L_eik   = sum_k (||grad f(x_k)|| - 1)^2        eikonal regularity
    L_def   = (1/|P_s|)(sum_j ||d_j|| + ||sum_j d_j||)   small, zero-mean warp
    L_lm    = sum_{i != j} sum_l ||xr_l^i - xr_l^j||^2   landmark consistency
    L_col   = sum_obs ||render - c||_2             appearance
    L_emb   = (1/sigma^2)(||z_sdf|| + ||z_r||)     latent prior
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import data as datamod
from . import fields, optim
from . import tape as T
from .errors import DivergenceError, ValidationError

SCENE_LO = datamod.SCENE_LO
SCENE_HI = datamod.SCENE_HI


# ---------------------------------------------------------------------------
# loss terms (value level: work on plain arrays or tape Vars alike)


def loss_surface(f):
    """Sum of absolute field values over surface samples."""
    if _nrows(f) == 0:
        raise ValidationError("empty surface batch")
    return T.ssum(T.absval(f))


def loss_eikonal(grads):
    """Sum of squared unit-norm violations of field gradients."""
    if _nrows(grads) == 0:
        raise ValidationError("empty volume batch")
    return T.ssum(T.square(T.sub(T.l2norm_rows(grads), 1.0)))


def loss_deform(delta):
    """Mean per-point magnitude plus magnitude of the batch-summed warp."""
    n = _nrows(delta)
    if n == 0:
        raise ValidationError("empty deformation batch")
    per_point = T.ssum(T.l2norm_rows(delta))
    mean_term = T.l2norm_rows(T.ssum(delta, axis=0, keepdims=True))
    return T.mul(T.add(per_point, T.ssum(mean_term)), 1.0 / n)


def loss_landmark(ref_landmarks):
    """Sum over ordered scene pairs of squared landmark distances.

    ``ref_landmarks``: list of (L, 3) reference-space landmark arrays, one per
    scene. Uses the identity sum_{i != j} ||a_i - a_j||^2 =
    2 M sum_i ||a_i||^2 - 2 ||sum_i a_i||^2 evaluated per landmark.
    """
    m = len(ref_landmarks)
    if m < 2:
        raise ValidationError("landmark loss needs at least two scenes")
    counts = {np.asarray(T.value_of(a)).shape for a in ref_landmarks}
    if len(counts) != 1:
        raise ValidationError("landmark counts differ across scenes")
    total_sq = None
    acc = None
    for a in ref_landmarks:
        sq = T.ssum(T.square(a))
        total_sq = sq if total_sq is None else T.add(total_sq, sq)
        acc = a if acc is None else T.add(acc, a)
    return T.sub(T.mul(total_sq, 2.0 * m), T.mul(T.ssum(T.square(acc)), 2.0))


def loss_color(pred, observed):
    """Sum of L2 color errors over (observation) rows."""
    if _nrows(pred) == 0:
        return 0.0
    return T.ssum(T.l2norm_rows(T.sub(pred, observed)))


def loss_embed(z_sdf, z_r, sigma):
    """Gaussian-prior pull on latent norms (norms, not squared norms).

    Accepts single latent vectors (1D) or stacked per-scene rows (2D); 2D
    input contributes one norm per row.
    """
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    return T.mul(
        T.add(T.ssum(T.l2norm_rows(_as_rows(z_sdf))), T.ssum(T.l2norm_rows(_as_rows(z_r)))),
        1.0 / sigma**2,
    )


def _nrows(a):
    return np.asarray(T.value_of(a)).shape[0]


def _as_rows(z):
    if isinstance(z, np.ndarray) and z.ndim == 1:
        return z[None, :]
    return z


# ---------------------------------------------------------------------------
# schedule


def zeta_schedule(epoch, start, end, num_freqs):
    """Frequency-mask progress: 0 before ``start``, linear up to ``num_freqs``
    across [start, end], constant after."""
    if end < start:
        raise ValidationError("unmask window must have start <= end")
    if epoch < start:
        return 0.0
    if epoch >= end:
        return float(num_freqs)
    return float(num_freqs) * (epoch - start) / (end - start)


# ---------------------------------------------------------------------------
# training data


@dataclass
class PriorScene:
    """Per-subject training payload: surface samples with color observations
    grouped per point (CSR layout), plus landmark coordinates."""

    points: np.ndarray
    landmarks: np.ndarray
    obs_offsets: np.ndarray
    obs_rgb: np.ndarray
    obs_dir: np.ndarray

    @staticmethod
    def from_scene(scene) -> "PriorScene":
        if scene.gt_points is None or scene.landmarks is None:
            raise ValidationError("prior training needs scenes with ground truth")
        obs = datamod.build_color_observations(scene)
        order = np.argsort(obs.point_idx, kind="stable")
        idx = obs.point_idx[order]
        n = len(scene.gt_points)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(offsets, idx + 1, 1)
        offsets = np.cumsum(offsets)
        return PriorScene(
            scene.gt_points, scene.landmarks, offsets, obs.rgb[order], obs.viewdir[order]
        )


@dataclass
class PriorConfig:
    lam_eikonal: float = 0.1
    lam_deform: float = 1e-3
    lam_landmark: float = 1e-3
    lam_color: float = 1.0
    lam_embed: float = 1e-3
    sigma_embed: float = 1.0
    epochs: int = 100
    lr: float = 1e-4
    latent_lr: float = 1e-3  # auto-decoder codes learn faster than the nets
    lr_decay: float = 0.5
    lr_decay_interval: int = 15
    unmask_start: int = 5
    unmask_end: int = 10
    surface_batch: int = 512
    volume_batch: int = 512
    eik_surface_frac: float = 0.5  # share of volume batch drawn near the surface
    eik_noise: float = 0.05
    max_obs_per_point: int = 4
    steps_per_epoch: int = 4
    d_s: int = 32
    d_r: int = 32
    init_radius: float = 0.8

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return PriorConfig(**d)


@dataclass
class PriorResult:
    fp: fields.FieldParams
    z_sdf: np.ndarray  # (M, d_s)
    z_r: np.ndarray  # (M, d_r)
    history: list
    config: PriorConfig

    def latents(self, i) -> fields.LatentPair:
        return fields.LatentPair(self.z_sdf[i], self.z_r[i])

    def save(self, path):
        arrays = dict(self.fp.named_arrays())
        arrays["z_sdf"] = self.z_sdf
        arrays["z_r"] = self.z_r
        meta = {
            "fp": datamod.fieldparams_meta(self.fp),
            "config": self.config.to_json(),
            "history": self.history,
        }
        datamod.save_checkpoint(path, "prior", meta, arrays)

    @staticmethod
    def load(path) -> "PriorResult":
        kind, meta, arrays = datamod.load_checkpoint(path)
        if kind != "prior":
            raise ValidationError(f"{path} is a '{kind}' checkpoint, expected 'prior'")
        fp = datamod.fieldparams_from_meta(meta["fp"], arrays)
        return PriorResult(
            fp, arrays["z_sdf"], arrays["z_r"], meta.get("history", []),
            PriorConfig.from_json(meta["config"]),
        )


# ---------------------------------------------------------------------------
# training


HISTORY_FIELDS = ("epoch", "surf", "eik", "def", "lm", "col", "emb", "total", "zeta", "lr")


def train_prior(scenes, cfg: PriorConfig = None, seed=0, log_path=None) -> PriorResult:
    """Fit shared decoders plus one latent pair per scene.

    ``scenes`` is a list of PriorScene (or Scene, converted on entry). Every
    optimizer step draws fresh surface/volume batches from all scenes, fuses
    them into single network evaluations, and applies one Adam update to all
    weights and latents jointly.
    """
    cfg = cfg or PriorConfig()
    scenes = [s if isinstance(s, PriorScene) else PriorScene.from_scene(s) for s in scenes]
    m = len(scenes)
    if m < 2:
        raise ValidationError("prior training needs at least two scenes")
    lm_counts = {len(s.landmarks) for s in scenes}
    if len(lm_counts) != 1:
        raise ValidationError("landmark counts differ across scenes")
    n_lm = lm_counts.pop()

    rng = np.random.default_rng(seed)
    fp = fields.init_field_params(seed=seed, d_s=cfg.d_s, d_r=cfg.d_r, radius=cfg.init_radius)
    z_sdf = np.zeros((m, cfg.d_s))
    z_r = np.zeros((m, cfg.d_r))

    params = fp.ref_W + fp.ref_b + fp.def_W + fp.def_b + fp.rend_W + fp.rend_b
    opt = optim.Adam(params, lr=cfg.lr)
    opt_z = optim.Adam([z_sdf, z_r], lr=cfg.latent_lr)

    bs = cfg.surface_batch
    bv = cfg.volume_batch + int(round(cfg.volume_batch * cfg.eik_surface_frac))
    seg = np.kron(np.eye(m), np.ones((1, bs)))  # per-scene row-sum selector
    scene_of_surface = np.repeat(np.arange(m), bs)
    scene_of_volume = np.repeat(np.arange(m), bv)
    scene_of_lm = np.repeat(np.arange(m), n_lm)
    lm_x = np.vstack([s.landmarks for s in scenes])

    history = []
    for epoch in range(cfg.epochs):
        fp.pe_ref.zeta = zeta_schedule(epoch, cfg.unmask_start, cfg.unmask_end, fp.pe_ref.num_freqs)
        opt.lr = optim.step_decay(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_interval)
        opt_z.lr = optim.step_decay(cfg.latent_lr, epoch, cfg.lr_decay, cfg.lr_decay_interval)
        terms = np.zeros(7)
        for _ in range(cfg.steps_per_epoch):
            step_terms = _prior_step(
                fp, z_sdf, z_r, scenes, cfg, rng, opt, opt_z,
                seg, scene_of_surface, scene_of_volume, scene_of_lm, lm_x,
            )
            if not np.all(np.isfinite(step_terms)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: "
                    + ", ".join(f"{k}={v:.3g}" for k, v in zip(HISTORY_FIELDS[1:8], step_terms))
                )
            terms += step_terms
        terms /= cfg.steps_per_epoch
        row = dict(zip(HISTORY_FIELDS, [epoch, *terms, fp.pe_ref.zeta, opt.lr]))
        history.append(row)
    # leave the artifact at the schedule's end state (fully unmasked for any
    # run that reached the window end), not at the last epoch's interim value
    fp.pe_ref.zeta = zeta_schedule(cfg.epochs, cfg.unmask_start, cfg.unmask_end, fp.pe_ref.num_freqs)
    if log_path is not None:
        write_history_csv(history, log_path)
    return PriorResult(fp, z_sdf, z_r, history, cfg)


def _prior_step(fp, z_sdf, z_r, scenes, cfg, rng, opt, opt_z, seg, sof_s, sof_v, sof_lm, lm_x):
    m = len(scenes)
    bs, bv = cfg.surface_batch, cfg.volume_batch

    # assemble fused batches (scene-major row blocks)
    xs = np.empty((m * bs, 3))
    obs_rgb_parts, obs_dir_parts, obs_scene, obs_of_row = [], [], [], []
    for i, sc in enumerate(scenes):
        pick = rng.choice(len(sc.points), size=bs, replace=len(sc.points) < bs)
        xs[i * bs : (i + 1) * bs] = sc.points[pick]
        sel_parts, row_parts = [], []
        for r, p in enumerate(pick):
            lo, hi = sc.obs_offsets[p], sc.obs_offsets[p + 1]
            cnt = hi - lo
            if cnt == 0:
                continue
            k = min(cnt, cfg.max_obs_per_point)
            sel = lo + (rng.choice(cnt, size=k, replace=False) if cnt > k else np.arange(cnt))
            sel_parts.append(sel)
            row_parts.append(np.full(k, i * bs + r))
        if sel_parts:
            sel_all = np.concatenate(sel_parts)
            obs_rgb_parts.append(sc.obs_rgb[sel_all])
            obs_dir_parts.append(sc.obs_dir[sel_all])
            obs_scene.append(np.full(len(sel_all), i))
            obs_of_row.append(np.concatenate(row_parts))
    # eikonal points: uniform box samples plus appended jittered surface
    # samples; the near-surface share keeps |grad f| honest where the zero
    # set lives without thinning coverage of the rest of the volume
    n_shell = int(round(bv * cfg.eik_surface_frac))
    bvt = bv + n_shell
    xv = rng.uniform(SCENE_LO, SCENE_HI, size=(m * bvt, 3))
    if n_shell:
        for i, sc in enumerate(scenes):
            pick = rng.choice(len(sc.points), size=n_shell, replace=len(sc.points) < n_shell)
            xv[i * bvt + bv : (i + 1) * bvt] = sc.points[pick] + rng.normal(
                0.0, cfg.eik_noise, size=(n_shell, 3)
            )

    tp = T.Tape()
    mp = fields.ModelPass(fp, tp, train=("ref", "def", "rend"))
    zs_var = tp.var(z_sdf)
    zr_var = tp.var(z_r)

    # one fused pass over surface + volume points (values, gradients, parts)
    x_all = np.vstack([xs, xv])
    scene_rows = np.concatenate([sof_s, sof_v])
    f, grad, delta, gamma, x_ref = mp.composed(
        x_all, T.take_rows(zs_var, scene_rows), want_grad=True, want_parts=True
    )
    ns = len(xs)
    f_s = T.take_rows(f, np.arange(ns))
    g_v = T.take_rows(grad, np.arange(ns, ns + len(xv)))
    d_s = T.take_rows(delta, np.arange(ns))

    l_surf = loss_surface(f_s)
    l_eik = loss_eikonal(g_v)

    # per-scene deformation loss, then summed over scenes
    per_pt = T.matmul(seg, T.l2norm_rows(d_s))  # (m,1) sums of ||delta||
    per_sum = T.l2norm_rows(T.matmul(seg, d_s))  # (m,1) ||sum delta||
    l_def = T.mul(T.ssum(T.add(per_pt, per_sum)), 1.0 / bs)

    # landmark consistency on this step's reference-space landmarks
    d_lm, _ = mp.deform(lm_x, T.take_rows(zs_var, sof_lm))
    xr_lm = T.add(lm_x, d_lm)
    n_lm = len(scenes[0].landmarks)
    l_lm = loss_landmark([T.take_rows(xr_lm, np.arange(i * n_lm, (i + 1) * n_lm)) for i in range(m)])

    # color loss over sampled observations
    if obs_of_row:
        obs_of_row = np.concatenate(obs_of_row)
        c_obs = np.vstack(obs_rgb_parts)
        v_obs = np.vstack(obs_dir_parts)
        scene_of_obs = np.concatenate(obs_scene)
        g_s = T.take_rows(grad, obs_of_row)
        n_unit = T.mul(g_s, T.div(1.0, T.l2norm_rows(g_s)))
        pred = mp.render(
            T.take_rows(x_ref, obs_of_row),
            n_unit,
            v_obs,
            T.take_rows(gamma, obs_of_row),
            T.take_rows(zr_var, scene_of_obs),
        )
        l_col = loss_color(pred, c_obs)
    else:
        l_col = None

    l_emb = loss_embed(zs_var, zr_var, cfg.sigma_embed)

    total = T.add(l_surf, T.mul(l_eik, cfg.lam_eikonal))
    total = T.add(total, T.mul(l_def, cfg.lam_deform))
    total = T.add(total, T.mul(l_lm, cfg.lam_landmark))
    if l_col is not None:
        total = T.add(total, T.mul(l_col, cfg.lam_color))
    total = T.add(total, T.mul(l_emb, cfg.lam_embed))

    tp.backward(total)
    grads = []
    for g in ("ref", "def", "rend"):
        gw, gb = mp.grads(g)
        grads.extend(gw)
        grads.extend(gb)
    opt.step(grads)
    opt_z.step([zs_var.grad, zr_var.grad])

    vals = [T.value_of(t) if t is not None else 0.0 for t in (l_surf, l_eik, l_def, l_lm, l_col)]
    vals.append(T.value_of(l_emb))
    vals.append(T.value_of(total))
    out = np.array([float(np.asarray(v).squeeze()) for v in vals])
    tp.release()
    return out


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow(row)


# ---------------------------------------------------------------------------
# evaluation helpers


def surface_error(fp, z_sdf_vec, points):
    """Mean |f| over points (held-out surface adherence)."""
    fld = fields.SdfField(fp, z_sdf_vec)
    return float(np.mean(np.abs(fld(points))))


def eikonal_residual(fp, z_sdf_vec, points):
    """Mean squared unit-norm violation of the composed gradient."""
    fld = fields.SdfField(fp, z_sdf_vec)
    g = fld.gradient(points)
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))
