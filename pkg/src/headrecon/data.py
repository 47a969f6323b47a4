"""Scenes on disk and in memory: pinhole cameras, synthetic scene generation
with analytic ground truth, PNG/JSON/PLY persistence, and the versioned
checkpoint container shared by prior training and scene fitting.

Scene directory layout::

    scene/cameras.json      per-view intrinsics + world-to-camera 3x4
    scene/image_0000.png    8-bit sRGB
    scene/mask_0000.png     8-bit, >127 = foreground
    scene/gt/points.ply     surface samples with normals (binary LE)
    scene/gt/landmarks.json six named points
    scene/gt/headspec.json  analytic-field parameters (synthetic scenes)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from . import mesh as meshmod
from . import synth, tracer
from .errors import DataIOError, SceneFormatError, ValidationError

CHECKPOINT_MAGIC = b"NHF1"
CHECKPOINT_VERSION = "1.0.0"

SCENE_LO = synth.SCENE_LO
SCENE_HI = synth.SCENE_HI


def array_hash(*arrays) -> str:
    """SHA-256 over the raw bytes of arrays (order-sensitive)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """Pinhole camera with world-to-camera extrinsics (x_cam = R x + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(self.R) < 0:
            raise SceneFormatError("camera rotation must be orthonormal with det +1")

    @property
    def center(self):
        return -self.R.T @ self.t

    def pixel_rays(self, pixels=None):
        """Unit world-space directions through pixel centers.

        ``pixels`` is (k,2) integer (col, row); default is the full grid in
        row-major order. Returns (origins (k,3), dirs (k,3)).
        """
        if pixels is None:
            u, v = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="xy")
            pixels = np.stack([u.ravel(), v.ravel()], axis=1)
        pixels = np.asarray(pixels)
        d = np.stack(
            [
                (pixels[:, 0] + 0.5 - self.cx) / self.fx,
                (pixels[:, 1] + 0.5 - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            axis=1,
        )
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        dirs = d @ self.R  # rows: R^T @ d
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def project(self, points):
        """(u, v) pixel coordinates and camera-space depth for world points."""
        pc = np.atleast_2d(points) @ self.R.T + self.t
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def to_json(self, view_id):
        w2c = np.hstack([self.R, self.t[:, None]])
        return {
            "id": view_id,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_to_camera": w2c.tolist(),
        }

    @staticmethod
    def from_json(d):
        w2c = np.asarray(d["world_to_camera"], dtype=np.float64)
        if w2c.shape != (3, 4):
            raise SceneFormatError("world_to_camera must be 3x4")
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            R=w2c[:, :3], t=w2c[:, 3], width=int(d["width"]), height=int(d["height"]),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    Camera convention: +z forward, +x right, +y down (so rendered images are
    upright for a y-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValidationError("view direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def box_near_far(origins, dirs, lo=SCENE_LO, hi=SCENE_HI):
    """Slab-test entry/exit depths against an AABB. Returns (near, far, valid);
    near is clamped to 0, valid is False where the ray misses the box."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    near = np.maximum(tmin, 0.0)
    valid = (tmax > near) & (tmax > 0)
    return near, tmax, valid


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """Posed images with masks; synthetic scenes carry analytic ground truth."""

    images: list  # (H,W,3) float64 in [0,1], dequantized from 8-bit
    masks: list  # (H,W) bool
    cameras: list
    gt_points: np.ndarray | None = None
    gt_normals: np.ndarray | None = None
    landmarks: np.ndarray | None = None
    headspec: synth.HeadSpec | None = None

    def __post_init__(self):
        if len(self.images) < 1 or not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise ValidationError("scene needs n >= 1 consistent views")
        for img, msk, cam in zip(self.images, self.masks, self.cameras):
            if img.shape[:2] != msk.shape or img.shape[:2] != (cam.height, cam.width):
                raise ValidationError("image/mask/camera shapes disagree")

    @property
    def n_views(self):
        return len(self.images)

    def subset(self, indices) -> "Scene":
        """A scene view of selected cameras; ground truth is shared."""
        idx = list(indices)
        return Scene(
            [self.images[i] for i in idx],
            [self.masks[i] for i in idx],
            [self.cameras[i] for i in idx],
            self.gt_points,
            self.gt_normals,
            self.landmarks,
            self.headspec,
        )


def spread_view_indices(n_total, k):
    """k indices spread evenly around an n-view ring."""
    if k > n_total:
        raise ValidationError(f"asked for {k} views of {n_total}")
    return [int(round(i * n_total / k)) % n_total for i in range(k)]


def ring_cameras(n_views, resolution, rng, target=(0.0, 0.05, 0.0), radius=2.3, fov_deg=60.0):
    """Cameras on an azimuth ring with jittered elevation/radius, facing the head."""
    cams = []
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2.0)
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views + rng.normal(0.0, 0.06)
        el = 0.10 + rng.normal(0.0, 0.10)
        r = radius + rng.normal(0.0, 0.08)
        eye = np.array([r * np.cos(el) * np.sin(az), r * np.sin(el) + 0.05, r * np.cos(el) * np.cos(az)])
        R, t = look_at(eye, target)
        cams.append(
            Camera(fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
                   R=R, t=t, width=resolution, height=resolution)
        )
    return cams


def render_view(field_fn, shade_fn, cam: Camera, n_coarse=75, n_fine=25, fine_tol=1e-5):
    """Trace every pixel of a camera against an analytic field and shade hits."""
    origins, dirs = cam.pixel_rays()
    near, far, valid = box_near_far(origins, dirs)
    h, w = cam.height, cam.width
    img = np.tile(synth.BACKGROUND_RGB, (h * w, 1))
    msk = np.zeros(h * w, dtype=bool)
    if valid.any():
        rays = tracer.Rays(origins[valid], dirs[valid], near[valid], far[valid])
        hits = tracer.trace_rays(field_fn, rays, n_coarse, n_fine, fine_tol)
        vi = np.flatnonzero(valid)[hits.converged]
        if len(vi):
            x = hits.x[hits.converged]
            img[vi] = shade_fn(x, dirs[vi])
            msk[vi] = True
    return img.reshape(h, w, 3), msk.reshape(h, w)


def _quantize(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_scene(spec: synth.HeadSpec, n_views, resolution, seed, gt_samples=8000, gt_mc_res=96) -> Scene:
    """Render a synthetic subject from ring cameras with analytic ground truth.

    The seed drives only camera jitter; all geometry-derived data (surface
    samples, landmarks) is seeded from the spec itself, so two seeds with the
    same spec share identical ground truth.
    """
    if n_views < 1:
        raise ValidationError("need at least one view")
    rng = np.random.default_rng(seed)
    cams = ring_cameras(n_views, resolution, rng)
    field_fn = lambda p: synth.head_sdf(spec, p)

    def shade_fn(x, v):
        n = synth.head_normal(spec, x)
        return synth.shade(spec, x, n, v)

    images, masks = [], []
    for cam in cams:
        img, msk = render_view(field_fn, shade_fn, cam)
        images.append(_quantize(img).astype(np.float64) / 255.0)
        masks.append(msk)

    grng = np.random.default_rng(synth.headspec_hash(spec))
    gt_mesh = meshmod.marching_cubes(field_fn, SCENE_LO, SCENE_HI, gt_mc_res)
    pc = meshmod.sample_surface(gt_mesh, gt_samples, grng)
    pts = synth.project_to_surface(spec, pc.points)
    normals = synth.head_normal(spec, pts)
    lms = synth.landmarks(spec)
    return Scene(images, masks, cams, pts, normals, lms, spec)


# ---------------------------------------------------------------------------
# color observations for prior training


def bilinear_sample(img, u, v):
    """Sample (H,W,C) at continuous pixel coords (u: col, v: row), clamped."""
    h, w = img.shape[:2]
    x = np.clip(np.asarray(u) - 0.5, 0.0, w - 1.0)
    y = np.clip(np.asarray(v) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def visible_in_view(scene: Scene, view, points, normals, depth_tol=2e-3):
    """Visibility of surface points in one view: normal faces the camera, the
    projection lands on a foreground pixel, and the analytic ray from the
    camera reaches the point first (no occluder)."""
    if scene.headspec is None:
        raise ValidationError("visibility test needs the analytic field")
    cam = scene.cameras[view]
    cam_pos = cam.center
    to_cam = cam_pos - points
    dist = np.linalg.norm(to_cam, axis=1)
    facing = np.sum(normals * to_cam, axis=1) > 0.0
    u, v, z = cam.project(points)
    in_img = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    ok = facing & in_img
    if ok.any():
        col = np.clip(u[ok].astype(int), 0, cam.width - 1)
        row = np.clip(v[ok].astype(int), 0, cam.height - 1)
        idx = np.flatnonzero(ok)
        ok[idx] = scene.masks[view][row, col]
    if ok.any():
        idx = np.flatnonzero(ok)
        dirs = -to_cam[idx] / dist[idx][:, None]
        near, far, valid = box_near_far(np.broadcast_to(cam_pos, dirs.shape), dirs)
        hit_ok = np.zeros(len(idx), dtype=bool)
        if valid.any():
            rays = tracer.Rays(
                np.broadcast_to(cam_pos, dirs.shape)[valid], dirs[valid], near[valid], far[valid]
            )
            hits = tracer.trace_rays(lambda p: synth.head_sdf(scene.headspec, p), rays, 75, 25, 1e-5)
            sub = np.zeros(int(valid.sum()), dtype=bool)
            conv = hits.converged
            sub[conv] = np.abs(hits.depth[conv] - dist[idx][valid][conv]) < depth_tol
            hit_ok[valid] = sub
        ok[idx] = hit_ok
    return ok, u, v


@dataclass
class ColorObservations:
    """Flattened (point, view) color observations: for row k, surface point
    ``point_idx[k]`` was seen from direction ``viewdir[k]`` with color ``rgb[k]``."""

    point_idx: np.ndarray
    rgb: np.ndarray
    viewdir: np.ndarray


def build_color_observations(scene: Scene) -> ColorObservations:
    """Project GT samples into every view where they are visible and collect
    bilinear image colors with the matching view directions."""
    if scene.gt_points is None:
        raise ValidationError("scene has no ground-truth samples")
    idx_all, rgb_all, dir_all = [], [], []
    for vi, cam in enumerate(scene.cameras):
        ok, u, v = visible_in_view(scene, vi, scene.gt_points, scene.gt_normals)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        c = bilinear_sample(scene.images[vi], u[idx], v[idx])
        d = scene.gt_points[idx] - cam.center
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        idx_all.append(idx)
        rgb_all.append(c)
        dir_all.append(d)
    if not idx_all:
        return ColorObservations(np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3)))
    return ColorObservations(
        np.concatenate(idx_all), np.vstack(rgb_all), np.vstack(dir_all)
    )


# ---------------------------------------------------------------------------
# scene persistence


def save_scene(scene: Scene, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        views = [cam.to_json(i) for i, cam in enumerate(scene.cameras)]
        (out / "cameras.json").write_text(json.dumps({"views": views}, indent=1))
        for i, (img, msk) in enumerate(zip(scene.images, scene.masks)):
            Image.fromarray(_quantize(img)).save(out / f"image_{i:04d}.png")
            Image.fromarray((msk.astype(np.uint8)) * 255).save(out / f"mask_{i:04d}.png")
        if scene.gt_points is not None:
            gt = out / "gt"
            gt.mkdir(exist_ok=True)
            meshmod.save_ply_points(
                meshmod.PointCloud(scene.gt_points, scene.gt_normals), gt / "points.ply"
            )
            if scene.landmarks is not None:
                (gt / "landmarks.json").write_text(
                    json.dumps(
                        {n: list(p) for n, p in zip(synth.LANDMARK_NAMES, scene.landmarks.tolist())},
                        indent=1,
                    )
                )
            if scene.headspec is not None:
                (gt / "headspec.json").write_text(json.dumps(scene.headspec.to_json(), indent=1))
    except OSError as e:
        raise DataIOError(f"cannot write scene to {out}: {e}") from e


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    cam_path = d / "cameras.json"
    if not cam_path.exists():
        raise DataIOError(f"missing {cam_path}")
    try:
        doc = json.loads(cam_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneFormatError(f"unreadable cameras.json in {d}: {e}") from e
    cams, images, masks = [], [], []
    for view in doc["views"]:
        vid = int(view["id"])
        cams.append(Camera.from_json(view))
        img_path = d / f"image_{vid:04d}.png"
        msk_path = d / f"mask_{vid:04d}.png"
        if not img_path.exists():
            raise DataIOError(f"missing image for view {vid}: {img_path}")
        if not msk_path.exists():
            raise DataIOError(f"missing mask for view {vid}: {msk_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        msk = np.asarray(Image.open(msk_path).convert("L")) > 127
        images.append(img)
        masks.append(msk)
    gt_points = gt_normals = lms = spec = None
    gtd = d / "gt"
    if (gtd / "points.ply").exists():
        pc = meshmod.load_ply_points(gtd / "points.ply")
        gt_points, gt_normals = pc.points, pc.normals
    if (gtd / "landmarks.json").exists():
        lmdoc = json.loads((gtd / "landmarks.json").read_text())
        lms = np.array([lmdoc[n] for n in synth.LANDMARK_NAMES])
    if (gtd / "headspec.json").exists():
        spec = synth.HeadSpec.from_json(json.loads((gtd / "headspec.json").read_text()))
    return Scene(images, masks, cams, gt_points, gt_normals, lms, spec)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, kind, meta: dict, arrays: dict):
    """Versioned container: magic, JSON header, then a canonical little-endian
    float64 blob with every array in header order."""
    names = list(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    hjson = json.dumps(header).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(hjson)))
            fh.write(hjson)
            for n in names:
                fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Returns (kind, meta, arrays). Rejects bad magic and version mismatches."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SceneFormatError(f"{path}: bad magic bytes (not a checkpoint)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    ver = header.get("version", "?")
    if ver.split(".")[0] != CHECKPOINT_VERSION.split(".")[0]:
        raise SceneFormatError(
            f"{path}: checkpoint version {ver} incompatible with {CHECKPOINT_VERSION}"
        )
    arrays = {}
    off = 8 + hlen
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[item["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        )
        off += 8 * n
    return header["kind"], header["meta"], arrays


def fieldparams_meta(fp) -> dict:
    return {
        "ref_spec": fp.ref_spec.to_json(),
        "def_spec": fp.def_spec.to_json(),
        "rend_spec": fp.rend_spec.to_json(),
        "pe_x": {"num_freqs": fp.pe_x.num_freqs, "zeta": fp.pe_x.zeta},
        "pe_ref": {"num_freqs": fp.pe_ref.num_freqs, "zeta": fp.pe_ref.zeta},
        "pe_view": {"num_freqs": fp.pe_view.num_freqs, "zeta": fp.pe_view.zeta},
        "d_s": fp.d_s,
        "d_r": fp.d_r,
        "n_gamma": fp.n_gamma,
    }


def fieldparams_from_meta(meta, arrays):
    from . import nets
    from .fields import FieldParams

    specs = {k: nets.MlpSpec.from_json(meta[k]) for k in ("ref_spec", "def_spec", "rend_spec")}
    pes = {
        k: nets.PeConfig(meta[k]["num_freqs"], zeta=meta[k]["zeta"])
        for k in ("pe_x", "pe_ref", "pe_view")
    }
    groups = {}
    for g, spec in (("ref", specs["ref_spec"]), ("def", specs["def_spec"]), ("rend", specs["rend_spec"])):
        n_layers = len(spec.widths) + 1
        groups[f"{g}_W"] = [arrays[f"{g}.W.{i}"] for i in range(n_layers)]
        groups[f"{g}_b"] = [arrays[f"{g}.b.{i}"] for i in range(n_layers)]
    return FieldParams(
        specs["ref_spec"], specs["def_spec"], specs["rend_spec"],
        groups["ref_W"], groups["ref_b"], groups["def_W"], groups["def_b"],
        groups["rend_W"], groups["rend_b"],
        pes["pe_x"], pes["pe_ref"], pes["pe_view"],
        d_s=int(meta["d_s"]), d_r=int(meta["d_r"]), n_gamma=int(meta["n_gamma"]),
    )
