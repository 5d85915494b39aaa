"""voxpart: dataset -> fit -> train -> sample/interp/mix/eval pipeline.

Every command works inside a run directory (--out): the dataset, fitted
fields, checkpoints, and renders all live there, indexed by manifest.json.
Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ae as AEM
from . import config as CONF
from . import decoder as DECM
from . import diffusion as DIFF
from . import fields as F
from . import metrics as MET
from . import synth as SY
from . import training as TR
from .checkpoint import load_tensors, save_tensors
from .errors import DataError, NumericError, VoxpartError
from .imgio import read_pgm, read_ppm, write_pgm, write_ppm
from .optim import Adam
from .render import format_psnr, load_cameras
from .tensor import NonFiniteError
from .unet import UNet

TRAIN_DTYPE = np.float32


# ---------------------------------------------------------------------------
# run-directory plumbing


def _run_manifest_path(out):
    return Path(out) / "manifest.json"


def _load_run_manifest(out):
    path = _run_manifest_path(out)
    if not path.exists():
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read run manifest {path}: {e}") from e


def _update_run_manifest(out, key, value):
    manifest = _load_run_manifest(out)
    manifest[key] = value
    path = _run_manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _resolve_seed(args):
    if args.seed is not None:
        return int(args.seed)
    seed = int(np.random.SeedSequence().entropy % (2 ** 63))
    print(f"seed not given; using {seed}")
    return seed


def _dataset_views(out, manifest, obj, split):
    data_dir = Path(out) / "dataset"
    cams = load_cameras(data_dir / manifest["cameras"])
    sel = [v for v in obj["views"] if v["split"] == split]
    cameras = [cams[v["camera"]] for v in sel]
    images = [read_ppm(data_dir / v["rgb"]) for v in sel]
    parts = [read_pgm(data_dir / v["part"]) for v in sel]
    return cameras, images, parts


def _train_objects(manifest):
    return [o for o in manifest["objects"] if o["split"] == "train"]


def _field_path(out, obj_id):
    return Path(out) / "fields" / f"{obj_id}.vxf"


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args, cfg, seed):
    out = Path(args.out)
    manifest = SY.make_dataset(
        out / "dataset",
        n_objects=cfg["data.objects"], n_views=cfg["data.views"],
        size=cfg["data.image_size"], seed=seed,
        n_test_views=cfg["data.test_views"],
        n_test_objects=cfg["data.test_objects"])
    _update_run_manifest(out, "dataset", {
        "path": "dataset", "seed": seed,
        "objects": [o["id"] for o in manifest["objects"]]})
    print(f"dataset: {len(manifest['objects'])} objects -> {out / 'dataset'}")
    return 0


def cmd_fit(args, cfg, seed):
    out = Path(args.out)
    manifest = SY.load_manifest(out / "dataset")
    (out / "fields").mkdir(parents=True, exist_ok=True)
    extents = (cfg["fit.extents"],) * 3
    samples = cfg["fit.samples_per_ray"] or None
    failures = []
    rows = _read_psnr_csv(out / "fields" / "psnr.csv")
    for oi, obj in enumerate(manifest["objects"]):
        path = _field_path(out, obj["id"])
        if path.exists() and not args.force:
            print(f"{obj['id']}: exists, skipping (--force to refit)")
            continue
        cams, images, _ = _dataset_views(out, manifest, obj, "train")
        held_c, held_i, _ = _dataset_views(out, manifest, obj, "test")
        try:
            res = TR.fit_field(
                cams, images, extents,
                iterations=cfg["fit.iterations"],
                rays_per_step=cfg["fit.rays_per_step"],
                samples_per_ray=samples, lr=cfg["fit.lr"],
                tv_weight=cfg["fit.tv"], sparsity_weight=cfg["fit.sparsity"],
                seed=seed * 100003 + oi, heldout_cameras=held_c,
                heldout_images=held_i, dtype=TRAIN_DTYPE)
        except TR.FitDivergence as e:
            print(f"error: {obj['id']}: {e}")
            failures.append(obj["id"])
            continue
        F.save_vxf(path, res.bundle)
        rows[obj["id"]] = format_psnr(res.psnr)
        print(f"{obj['id']}  psnr {format_psnr(res.psnr)}")
    with open(out / "fields" / "psnr.csv", "w") as fh:
        fh.write("object,psnr\n")
        for oid in sorted(rows):
            fh.write(f"{oid},{rows[oid]}\n")
    _update_run_manifest(out, "fields", {
        "extents": list(extents),
        "objects": sorted(rows), "failed": failures})
    return 4 if failures else 0


def _read_psnr_csv(path):
    if not Path(path).exists():
        return {}
    with open(path) as fh:
        lines = fh.read().splitlines()[1:]
    return dict(line.split(",", 1) for line in lines if line)


def _build_model(cfg, latent_extents, seed):
    k, d = cfg["decoder.k_parts"], cfg["decoder.d_model"]
    ae = AEM.AutoEncoder(widths=tuple(cfg["ae.widths"]), latent_channels=4,
                         seed=seed, dtype=TRAIN_DTYPE)
    unet = UNet(latent_channels=4, extents=latent_extents,
                base_width=cfg["unet.base_width"],
                mults=tuple(cfg["unet.mults"]),
                time_dim=cfg["unet.time_dim"], z_dim=k * d, seed=seed + 1,
                dtype=TRAIN_DTYPE)
    dec = DECM.PartDecoder(k_parts=k, d_model=d, heads=cfg["decoder.heads"],
                           sa_window=cfg["decoder.sa_window"],
                           head_hidden=cfg["decoder.head_hidden"],
                           seed=seed + 2, dtype=TRAIN_DTYPE)
    return ae, unet, dec


def cmd_train(args, cfg, seed):
    out = Path(args.out)
    manifest = SY.load_manifest(out / "dataset")
    train_objs = _train_objects(manifest)
    fields = []
    for obj in train_objs:
        path = _field_path(out, obj["id"])
        if not path.exists():
            raise DataError(f"missing fitted field {path}; run fit first")
        fields.append(F.load_vxf(path))
    extents = fields[0].shape[1:]
    latent_extents = tuple(n // AEM.LATENT_STRIDE for n in extents)
    ae, unet, dec = _build_model(cfg, latent_extents, seed)

    # stage 1: autoencoder pretraining on the fitted fields
    rng = np.random.default_rng(seed + 101)
    opt = Adam(ae.params, lr=cfg["ae.lr"])
    field32 = [f.astype(TRAIN_DTYPE) for f in fields]
    ae_rows = []
    for it in range(cfg["ae.iterations"]):
        stats = AEM.pretrain_step(ae, opt, field32, rng, beta=cfg["ae.beta"])
        ae_rows.append(stats)
        if (it + 1) % 200 == 0:
            print(f"ae step {it + 1}/{cfg['ae.iterations']} "
                  f"recon {stats['recon']:.5f} kl {stats['kl']:.3f}")
    with open(out / "ae_loss.csv", "w") as fh:
        fh.write("step,recon,kl,total,grad_norm\n")
        for it, s in enumerate(ae_rows):
            fh.write(f"{it},{s['recon']!r},{s['kl']!r},{s['total']!r},"
                     f"{s['grad_norm']!r}\n")

    # stage 2: joint denoiser + part decoder training (AE frozen)
    objects = []
    for obj in train_objs:
        cams, images, parts = _dataset_views(out, manifest, obj, "train")
        objects.append(TR.ObjectData(name=obj["id"],
                                     field=F.load_vxf(_field_path(out, obj["id"])),
                                     cameras=cams, images=images,
                                     part_maps=parts))
    tcfg = TR.TrainConfig(iterations=cfg["train.iterations"],
                          warmup_iters=cfg["train.warmup"],
                          rays_per_step=cfg["train.rays_per_step"],
                          samples_per_ray=cfg["train.samples_per_ray"],
                          lr_unet=cfg["train.lr_unet"],
                          lr_decoder=cfg["train.lr_decoder"],
                          tv_weight=cfg["train.tv"],
                          t_min=cfg["diffusion.t_min"], seed=seed)
    trainer = TR.JointTrainer(ae, unet, dec, objects, tcfg)
    (out / "checkpoints").mkdir(exist_ok=True)
    snap_cam = objects[0].cameras[0]
    step_rng = np.random.default_rng(seed + 202)
    reports = []
    for step in range(tcfg.iterations):
        rep = trainer.train_step(step_rng)
        reports.append(rep)
        if rep.aborted:
            print(f"warning: non-finite loss at step {rep.step}; "
                  f"update skipped (t={rep.t:.4f})")
        every = cfg["train.checkpoint_every"]
        if every and (step + 1) % every == 0:
            _save_checkpoint(out / "checkpoints" / f"step_{step + 1:05d}.tnsr",
                             trainer)
        snap = cfg["train.snapshot_every"]
        if snap and (step + 1) % snap == 0:
            field, z = trainer.reconstruction(0)
            rgb, labels = TR.render_decoded(field, dec, z, snap_cam,
                                            m=cfg["sample.ray_samples"])
            (out / "snapshots").mkdir(exist_ok=True)
            write_ppm(out / "snapshots" / f"step_{step + 1:05d}.ppm", rgb)
            write_pgm(out / "snapshots" / f"step_{step + 1:05d}.pgm", labels)
        if (step + 1) % 100 == 0:
            print(f"step {step + 1}/{tcfg.iterations} "
                  f"diff {rep.diff_loss:.5f} rend {rep.rend_loss:.5f}")
    final = out / "checkpoints" / "final.tnsr"
    _save_checkpoint(final, trainer)
    TR.write_loss_csv(out / "loss.csv", reports)
    _update_run_manifest(out, "train", {
        "checkpoint": str(final.relative_to(out)),
        "latent_extents": list(latent_extents),
        "field_extents": list(extents),
        "image_size": manifest["image_size"],
        "objects": [o.name for o in objects],
        "latent_scale": trainer.latent_scale,
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in cfg.values.items()},
    })
    print(f"trained {tcfg.iterations} steps -> {final}")
    return 0


def _save_checkpoint(path, trainer):
    tensors = {}
    tensors.update(trainer.ae.state_dict())
    tensors.update(trainer.unet.state_dict())
    tensors.update(trainer.decoder.state_dict())
    for i, z in enumerate(trainer.z_codes):
        tensors[f"z.{i}"] = z.data
    tensors["latent_scale"] = np.array([trainer.latent_scale])
    save_tensors(path, tensors)


class _Sampler:
    """Trained model reloaded for inference commands."""

    def __init__(self, out, cfg, checkpoint=None):
        info = _load_run_manifest(out).get("train")
        if info is None:
            raise DataError(f"no trained model under {out}; run train first")
        saved = dict(info["config"])
        for key in ("ae.widths", "unet.mults"):
            saved[key] = tuple(saved[key])
        # architecture always comes from the run that trained the checkpoint
        for key in ("ae.widths", "unet.base_width", "unet.mults",
                    "unet.time_dim", "decoder.k_parts", "decoder.d_model",
                    "decoder.heads", "decoder.sa_window",
                    "decoder.head_hidden"):
            cfg.values[key] = saved[key]
        self.latent_extents = tuple(info["latent_extents"])
        self.image_size = info["image_size"]
        self.ae, self.unet, self.decoder = _build_model(
            cfg, self.latent_extents, seed=0)
        path = Path(checkpoint) if checkpoint else Path(out) / info["checkpoint"]
        tensors = load_tensors(path)
        self.ae.load_state(tensors)
        self.unet.load_state(tensors)
        self.decoder.load_state(tensors)
        self.z_codes = []
        for i in range(len(info["objects"])):
            key = f"z.{i}"
            if key not in tensors:
                raise DataError(f"checkpoint missing {key}")
            self.z_codes.append(tensors[key].astype(TRAIN_DTYPE))
        self.latent_scale = float(tensors["latent_scale"][0])
        self.t_min = cfg["diffusion.t_min"]

    def decode(self, latent):
        return self.ae.decode(np.asarray(latent, dtype=TRAIN_DTYPE)
                              * self.latent_scale).data

    def sample_latent(self, rng, steps, z, init=None):
        dcfg = DIFF.DiffusionConfig(steps=steps, t_min=self.t_min)
        return DIFF.run_sampler(self.unet.predictor(), z, dcfg, rng,
                                init=init,
                                shape=(4,) + self.latent_extents)


def _render_views(sampler, cfg, field, z, out_dir, stem, n_views):
    cams = SY.ring_cameras(n_views, sampler.image_size)
    for vi, cam in enumerate(cams):
        rgb, labels = TR.render_decoded(field, sampler.decoder, z, cam,
                                        m=cfg["sample.ray_samples"])
        write_ppm(out_dir / f"{stem}_view_{vi}.ppm", rgb)
        write_pgm(out_dir / f"{stem}_view_{vi}_parts.pgm", labels)


def cmd_sample(args, cfg, seed):
    out = Path(args.out)
    sampler = _Sampler(out, cfg, args.checkpoint)
    sdir = out / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    steps = cfg["diffusion.steps"]
    names = []
    for i in range(args.count):
        z = sampler.z_codes[rng.integers(len(sampler.z_codes))]
        latent = sampler.sample_latent(rng, steps, z)
        field = sampler.decode(latent)
        stem = f"sample_{i:03d}"
        F.save_vxf(sdir / f"{stem}.vxf", field)
        save_tensors(sdir / f"{stem}_z.tnsr", {"z": z})
        _render_views(sampler, cfg, field, z, sdir, stem,
                      cfg["sample.views"])
        names.append(stem)
        print(f"{stem}: {steps} steps -> {sdir / (stem + '.vxf')}")
    _update_run_manifest(out, "samples", {"steps": steps, "seed": seed,
                                          "names": names})
    return 0


def _parse_levels(raw):
    try:
        levels = [float(p) for p in raw.split(",") if p != ""]
    except ValueError as e:
        raise DataError(f"invalid interpolation levels: {raw!r}") from e
    if not levels or any(s < 0.0 or s > 1.0 for s in levels):
        raise DataError("interpolation levels must lie in [0, 1]")
    return levels


def cmd_interp(args, cfg, seed):
    out = Path(args.out)
    sampler = _Sampler(out, cfg, args.checkpoint)
    idir = out / "interp"
    idir.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.object < len(sampler.z_codes):
        raise DataError(f"no part code for object {args.object}")
    z = sampler.z_codes[args.object]
    steps = cfg["diffusion.steps"]
    shape = (4,) + sampler.latent_extents
    eps_a = np.random.default_rng(seed).standard_normal(shape)
    eps_b = np.random.default_rng(seed + 1).standard_normal(shape)
    jobs = [("endpoint_a", eps_a), ("endpoint_b", eps_b)]
    jobs += [(f"interp_{int(round(s * 100)):03d}", TR.slerp(eps_a, eps_b, s))
             for s in _parse_levels(args.levels)]
    for stem, init in jobs:
        # one shared noise stream per job keeps s=0/1 equal to the endpoints
        latent = sampler.sample_latent(np.random.default_rng(seed + 2),
                                       steps, z, init=init)
        field = sampler.decode(latent)
        F.save_vxf(idir / f"{stem}.vxf", field)
        _render_views(sampler, cfg, field, z, idir, stem, 1)
        print(f"{stem} -> {idir / (stem + '.vxf')}")
    return 0


def _parse_assignment(raw, scene_path, k_parts):
    names = {}
    if scene_path:
        scene = SY.load_scene(scene_path)
        names = {p.name: p.index for p in scene.parts}
    assignment = {}
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        part, _, source = token.partition("=")
        part = part.strip()
        if part.isdigit():
            idx = int(part)
        elif part in names:
            idx = names[part]
        else:
            raise DataError(f"unknown part {part!r} in --assign"
                            + ("" if names else " (pass --scene for names)"))
        assignment[idx] = source.strip()
    return assignment


def cmd_mix(args, cfg, seed):
    out = Path(args.out)
    sampler = _Sampler(out, cfg, args.checkpoint)
    field_a = F.load_vxf(args.field_a)
    field_b = F.load_vxf(args.field_b)
    if not 0 <= args.z_object < len(sampler.z_codes):
        raise DataError(f"no part code for object {args.z_object}")
    z = sampler.z_codes[args.z_object]
    assignment = _parse_assignment(args.assign, args.scene,
                                   cfg["decoder.k_parts"])
    mixed = TR.mix(field_a, field_b, assignment, sampler.decoder, z,
                   tau=args.tau)
    mdir = out / "mix"
    mdir.mkdir(parents=True, exist_ok=True)
    F.save_vxf(mdir / "mix.vxf", mixed)
    _render_views(sampler, cfg, mixed, z, mdir, "mix", 1)
    print(f"mix -> {mdir / 'mix.vxf'}")
    return 0


def _load_cloud_set(directory, n_points, tau, seed, salt):
    paths = sorted(Path(directory).glob("*.vxf"))
    if not paths:
        raise DataError(f"no .vxf fields under {directory}")
    clouds = []
    for i, path in enumerate(paths):
        rng = np.random.default_rng([seed, salt, i])
        clouds.append(MET.extract_points(F.load_vxf(path), n=n_points,
                                         rng=rng, tau=tau))
    return clouds


def cmd_eval(args, cfg, seed):
    out = Path(args.out)
    tau = cfg["eval.tau"] or None
    n = cfg["eval.points"]
    gen = _load_cloud_set(args.gen, n, tau, seed, 0)
    ref = _load_cloud_set(args.ref, n, tau, seed, 0)
    mmd, cov = MET.mmd_cov(gen, ref)
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    path = edir / "metrics.csv"
    kept = []
    if path.exists():
        with open(path) as fh:
            kept = [ln for ln in fh.read().splitlines()[1:]
                    if ln and ln.split(",", 1)[0] != args.name]
    with open(path, "w") as fh:
        fh.write("set_name,mmd_x100,cov_x100,n_gen,n_ref\n")
        for ln in kept:
            fh.write(ln + "\n")
        fh.write(f"{args.name},{100.0 * mmd!r},{100.0 * cov!r},"
                 f"{len(gen)},{len(ref)}\n")
    print(f"{args.name}: mmd_x100 {100 * mmd:.6g} cov_x100 {100 * cov:.6g} "
          f"({len(gen)} gen vs {len(ref)} ref)")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _base_flags(sub):
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=1,
                     help="worker cap (this build is single-threaded)")
    sub.add_argument("--out", default="run", help="run directory")


# per-command flag -> config key
_FLAG_KEYS = {
    "make-data": {"objects": "data.objects", "views": "data.views",
                  "test_views": "data.test_views",
                  "test_objects": "data.test_objects",
                  "image_size": "data.image_size"},
    "fit": {"extents": "fit.extents", "iterations": "fit.iterations",
            "rays": "fit.rays_per_step", "lr": "fit.lr", "tv": "fit.tv",
            "sparsity": "fit.sparsity"},
    "train": {"iterations": "train.iterations", "warmup": "train.warmup",
              "rays": "train.rays_per_step",
              "checkpoint_every": "train.checkpoint_every",
              "snapshot_every": "train.snapshot_every",
              "ae_iterations": "ae.iterations",
              "sa_window": "decoder.sa_window"},
    "sample": {"steps": "diffusion.steps", "views": "sample.views"},
    "interp": {"steps": "diffusion.steps"},
    "mix": {},
    "eval": {"points": "eval.points", "tau": "eval.tau"},
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxpart",
        description="part-aware shape generation over neural voxel fields")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("make-data", help="generate the synthetic dataset")
    _base_flags(p)
    for flag in _FLAG_KEYS["make-data"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.set_defaults(func=cmd_make_data)

    p = subs.add_parser("fit", help="fit voxel fields to the dataset views")
    _base_flags(p)
    for flag in _FLAG_KEYS["fit"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.add_argument("--force", action="store_true",
                   help="refit even when the .vxf exists")
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("train", help="pretrain the AE, then joint training")
    _base_flags(p)
    for flag in _FLAG_KEYS["train"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("sample", help="draw shapes from the trained model")
    _base_flags(p)
    for flag in _FLAG_KEYS["sample"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("interp", help="interpolate between two noise draws")
    _base_flags(p)
    for flag in _FLAG_KEYS["interp"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.add_argument("--levels", default="0,0.25,0.5,0.75,1")
    p.add_argument("--object", type=int, default=0,
                   help="whose part code conditions the model")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_interp)

    p = subs.add_parser("mix", help="compose parts from two fields")
    _base_flags(p)
    p.add_argument("--field-a", required=True)
    p.add_argument("--field-b", required=True)
    p.add_argument("--assign", required=True,
                   help="part=source list, e.g. seat=a,legs=b or 0=a,1=b")
    p.add_argument("--scene", default=None,
                   help="scene.json that names the parts")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--z-object", dest="z_object", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_mix)

    p = subs.add_parser("eval", help="MMD/COV of generated vs reference")
    _base_flags(p)
    for flag in _FLAG_KEYS["eval"]:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
    p.add_argument("--gen", required=True, help="directory of generated .vxf")
    p.add_argument("--ref", required=True, help="directory of reference .vxf")
    p.add_argument("--name", default="eval")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        flags = {key: getattr(args, flag)
                 for flag, key in _FLAG_KEYS[args.command].items()}
        cfg = CONF.build(config_path=args.config, flags=flags)
        seed = _resolve_seed(args)
        return args.func(args, cfg, seed)
    except NonFiniteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (VoxpartError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
