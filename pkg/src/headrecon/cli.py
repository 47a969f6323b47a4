"""Command-line entry point: dataset generation, prior training, scene
fitting, evaluation, and tracer benchmarking as subcommands.

Every run takes an optional YAML config plus flag overrides; the fully
resolved configuration is written next to the outputs so a log determines a
rerun. Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(path):
    if path is None:
        return {}
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        from .errors import ValidationError

        raise ValidationError(f"config {path} must be a mapping")
    return doc


def _apply_overrides(cfg, file_values, flag_values):
    """defaults < config file < explicit flags; unknown keys rejected."""
    from .errors import ValidationError

    for src in (file_values, flag_values):
        for k, v in src.items():
            if v is None:
                continue
            if not hasattr(cfg, k):
                raise ValidationError(f"unknown config key: {k}")
            setattr(cfg, k, v)
    return cfg


def _write_run_log(out_dir, payload):
    import yaml

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(payload, sort_keys=True)
    (out_dir / "run_config.yaml").write_text(text)
    print(f"resolved config -> {out_dir / 'run_config.yaml'}")
    print(text.rstrip())


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    import numpy as np

    from . import data, synth

    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    payload = {
        "command": "gen-data",
        "seed": args.seed,
        "scenes": args.scenes,
        "views": args.views,
        "resolution": args.resolution,
        "gt_samples": args.gt_samples,
        "out": str(out),
    }
    _write_run_log(out, payload)
    for i in range(args.scenes):
        spec = synth.random_headspec(rng)
        scene = data.generate_scene(
            spec, args.views, args.resolution, seed=int(rng.integers(2**31)),
            gt_samples=args.gt_samples,
        )
        scene_dir = out / f"scene_{i:04d}"
        data.save_scene(scene, scene_dir)
        print(f"wrote {scene_dir} ({args.views} views, {args.resolution}px)")
    return 0


def _discover_scenes(data_dir):
    from .errors import DataIOError

    dirs = sorted(p for p in Path(data_dir).glob("scene_*") if p.is_dir())
    if not dirs:
        raise DataIOError(f"no scene_* directories under {data_dir}")
    return dirs


def cmd_train_prior(args):
    from . import data, prior

    cfg = _apply_overrides(
        prior.PriorConfig(),
        _load_config(args.config),
        {
            "epochs": args.epochs,
            "surface_batch": args.surface_batch,
            "volume_batch": args.volume_batch,
            "steps_per_epoch": args.steps_per_epoch,
        },
    )
    out = Path(args.out)
    scene_dirs = _discover_scenes(args.data)
    _write_run_log(
        out,
        {
            "command": "train-prior",
            "seed": args.seed,
            "data": str(args.data),
            "scenes": [str(p) for p in scene_dirs],
            "config": cfg.to_json(),
        },
    )
    scenes = [prior.PriorScene.from_scene(data.load_scene(p)) for p in scene_dirs]
    t0 = time.time()
    result = prior.train_prior(scenes, cfg, seed=args.seed, log_path=out / "loss_log.csv")
    ckpt = out / "prior.nhf"
    result.save(ckpt)
    last = result.history[-1]
    print(f"trained {len(scenes)} scenes x {cfg.epochs} epochs in {time.time() - t0:.0f}s")
    print(f"final total loss {last['total']:.4f}; checkpoint -> {ckpt}")
    return 0


def cmd_fit(args):
    from . import data, mesh, prior, recon

    flag_values = {
        "epochs": args.epochs,
        "pixels_per_batch": args.pixels,
        "unfreeze_epoch": args.unfreeze_epoch,
    }
    if args.no_cache:
        flag_values["use_cache"] = False
    if args.no_selective_sampling:
        flag_values["selective_sampling"] = False
    if args.cache_persist:
        flag_values["cache_persist"] = True
    if args.no_implicit_grad:
        flag_values["use_implicit_grad"] = False
    cfg = _apply_overrides(recon.FitConfig(), _load_config(args.config), flag_values)

    out = Path(args.out)
    _write_run_log(
        out,
        {
            "command": "fit",
            "seed": args.seed,
            "scene": str(args.scene),
            "prior": str(args.prior),
            "views": args.views,
            "mesh_resolution": args.mesh_resolution,
            "config": cfg.to_json(),
        },
    )
    scene = data.load_scene(args.scene)
    pri = prior.PriorResult.load(args.prior)
    t0 = time.time()
    fitted = recon.fit_scene(
        scene, pri, cfg, seed=args.seed, views=args.views, log_path=out / "loss_log.csv"
    )
    fitted.save(out / "fitted.nhf")
    m = recon.extract_mesh(fitted.fp, fitted.z.z_sdf, args.mesh_resolution)
    mesh.save_obj(m, out / "mesh.obj")
    mesh.save_ply_mesh(m, out / "mesh.ply")
    print(f"fit in {time.time() - t0:.0f}s; final loss {fitted.history[-1]['total']:.4f}")
    print(f"mesh: {len(m.vertices)} vertices -> {out / 'mesh.obj'}")
    if scene.gt_points is not None:
        report = recon.evaluate_fit(fitted, scene, mc_resolution=args.mesh_resolution)
        (out / "eval.json").write_text(json.dumps(report, indent=1))
        print(f"chamfer to gt: {report['chamfer']:.5f} scene units")
    return 0


def _load_pred(path):
    from . import mesh
    from .errors import SceneFormatError

    path = Path(path)
    if path.suffix.lower() == ".obj":
        return mesh.load_obj(path)
    if path.suffix.lower() == ".ply":
        head = path.read_bytes()[:512]
        if b"element face" in head:
            raise SceneFormatError(
                f"{path}: PLY meshes are written, not read; evaluate the OBJ instead"
            )
        return mesh.load_ply_points(path)
    raise SceneFormatError(f"{path}: expected .obj mesh or .ply point cloud")


def cmd_evaluate(args):
    from . import data, mesh

    pred = _load_pred(args.pred)
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        gt_path = gt_path / "gt" / "points.ply"
    gt = mesh.load_ply_points(gt_path)
    d = mesh.chamfer_unidirectional(gt, pred)
    report = {
        "chamfer": float(d),
        "gt_points": int(len(gt.points)),
        "pred": str(args.pred),
        "units": "scene units",
    }
    print(f"unidirectional chamfer (gt -> pred): {report['chamfer']:.6f} scene units")
    print(f"ground-truth points: {report['gt_points']}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1))
        print(f"report -> {args.json}")
    return 0


def bench_rows(scene, fp, z_vec, epochs=8, batch=512, repeats=3, seed=0):
    """Wall time and field-eval counts for the cache x sampling grid.

    Traces ``epochs`` pixel batches per mode, repeated ``repeats`` times;
    returns one dict per mode.
    """
    import numpy as np

    from . import fields, recon, tracer

    pool = recon._PixelPool(scene)
    rows_out = []
    for use_cache in (False, True):
        for selective in (False, True):
            times = []
            evals = hits_n = 0
            for rep in range(repeats):
                rng = np.random.default_rng(seed + rep)
                base = fields.SdfField(fp, z_vec)
                field = tracer.CountingField(base)
                cache = (
                    tracer.VoxelCache(
                        recon.SCENE_LO, recon.SCENE_HI,
                        rng=np.random.default_rng(seed + 100 + rep),
                    )
                    if use_cache
                    else None
                )
                sampler = tracer.PixelSampler(
                    pool.fg, rng, drop_frac=0.12 if selective else 0.0, interval=1
                )
                t0 = time.perf_counter()
                for epoch in range(epochs):
                    sel = sampler.batch(epoch, batch, rng)
                    sel = sel[pool.valid[sel]]
                    rays = tracer.Rays(
                        pool.origins[sel], pool.dirs[sel], pool.near[sel], pool.far[sel]
                    )
                    hits = tracer.trace_rays(cache.bind(field) if cache else field, rays)
                    hits_n += int(hits.converged.sum())
                times.append(time.perf_counter() - t0)
                evals += field.rows
            times = np.asarray(times)
            rows_out.append(
                {
                    "cache": int(use_cache),
                    "selective_sampling": int(selective),
                    "field_evals": int(evals // repeats),
                    "wall_mean_s": float(times.mean()),
                    "wall_var_s2": float(times.var()),
                    "hits": int(hits_n // repeats),
                }
            )
    return rows_out


def cmd_bench_tracer(args):
    import csv

    from . import data, prior

    scene = data.load_scene(args.scene)
    pri = prior.PriorResult.load(args.prior)
    rows = bench_rows(
        scene, pri.fp, pri.z_sdf[args.subject], epochs=args.epochs,
        batch=args.pixels, repeats=args.repeats, seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    base = rows[0]["wall_mean_s"]
    for r in rows:
        print(
            f"cache={r['cache']} ss={r['selective_sampling']}: "
            f"{r['wall_mean_s']:.2f}s (x{base / max(r['wall_mean_s'], 1e-9):.2f}), "
            f"{r['field_evals']} evals"
        )
    print(f"grid -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry


def build_parser():
    p = argparse.ArgumentParser(prog="headrecon", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="worker/thread cap")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic scenes with ground truth")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=3)
    g.add_argument("--views", type=int, default=6)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--gt-samples", type=int, default=8000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-prior", help="train the multi-subject prior")
    t.add_argument("--data", required=True, help="directory of scene_* folders")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--surface-batch", type=int, default=None)
    t.add_argument("--volume-batch", type=int, default=None)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_prior)

    f = sub.add_parser("fit", help="fit one scene against a trained prior")
    f.add_argument("--scene", required=True)
    f.add_argument("--prior", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--views", type=int, default=None, help="use N evenly spread views")
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--pixels", type=int, default=None)
    f.add_argument("--unfreeze-epoch", type=int, default=None)
    f.add_argument("--mesh-resolution", type=int, default=64)
    f.add_argument("--no-cache", action="store_true")
    f.add_argument("--no-selective-sampling", action="store_true")
    f.add_argument("--cache-persist", action="store_true")
    f.add_argument("--no-implicit-grad", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="unidirectional chamfer against ground truth")
    e.add_argument("--pred", required=True, help=".obj mesh or .ply point cloud")
    e.add_argument("--gt", required=True, help="gt points.ply or a scene directory")
    e.add_argument("--json", default=None, help="also write the report as JSON")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench-tracer", help="cache x sampling timing grid")
    b.add_argument("--scene", required=True)
    b.add_argument("--prior", required=True)
    b.add_argument("--out", required=True, help="CSV path")
    b.add_argument("--subject", type=int, default=0, help="prior subject latent to trace")
    b.add_argument("--epochs", type=int, default=8)
    b.add_argument("--pixels", type=int, default=512)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_tracer)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .errors import DataIOError, DivergenceError, ValidationError

    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 4
    except (DataIOError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
