"""Command-line pipeline: dataset generation, autodecoder fitting,
diffusion training, sampling, rendering, and evaluation.

Exit codes are a stable scripting contract: 0 success, 2 configuration
error, 3 I/O or artifact format error, 4 numerical failure. Every
command stamps the resolved config hash and seed into a run.json in its
output directory; outputs are byte-identical across reruns with the
same seed and config. One process owns an output directory at a time
(lockfile).

NPDIFF_THREADS caps the BLAS thread count; it must be read before numpy
loads, which is why the heavy imports below happen after the
environment block.
"""

import argparse
import csv
import hashlib
import json
import os
import sys

_threads = os.environ.get("NPDIFF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np

from . import autodecoder as adc
from . import autodiff as ad
from . import diffusion as df
from . import metrics as mt
from . import rng as rngmod
from . import sampler as sp
from . import toydata as td
from .config import RunConfig
from .errors import ConfigError, FormatError, NumericalError
from .images import load_ppm, save_ppm
from .pointcloud import (NeuralPointCloud, NormalizationStats,
                         compute_normalization, load_npcd, normalize,
                         normalized_clip_bounds, save_npcd)
from .renderer import (DecoderConfig, RenderConfig, init_decoder, render_image,
                       suggested_radius)

LOCK_NAME = ".lock"


# ---------------------------------------------------------------------------
# shared plumbing


class output_dir:
    """Creates the directory and holds an exclusive lockfile for the
    duration of the command."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.lock = os.path.join(self.path, LOCK_NAME)

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"output directory {self.path} is locked by another "
                          f"process (remove {self.lock} if stale)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self.path

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass


def write_json(path, document):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def run_meta(command, cfg, seed, **extra):
    document = {"command": command, "config_hash": cfg.hash, "seed": seed}
    document.update(extra)
    return document


def write_run_meta(out, command, cfg, seed, **extra):
    write_json(os.path.join(out, "run.json"), run_meta(command, cfg, seed, **extra))


def write_loss_csv(path, rows, columns):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})
    os.replace(tmp, path)


def save_state(stores, path):
    tmp = path + ".tmp"
    ad.save_training_state(stores, tmp)
    os.replace(tmp, path)


def read_loss_csv(path, columns):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        parsed = {"step": int(row["step"])}
        for k in columns:
            if k != "step":
                parsed[k] = float(row[k])
        out.append(parsed)
    return out


def load_config(args, overrides=None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def check_resume(out, cfg, step_store: str, columns):
    """Load a run directory for --resume.

    Returns (stores, completed_steps, prior_history). The step counter of
    `step_store` inside resume.state is authoritative: the state file is
    replaced atomically, while run.json and loss.csv may trail it by one
    checkpoint interval after a crash. loss.csv is written before the
    state, so it always covers at least `completed_steps` rows.
    """
    run_path = os.path.join(out, "run.json")
    state_path = os.path.join(out, "resume.state")
    if not (os.path.exists(run_path) and os.path.exists(state_path)):
        raise FormatError(f"cannot resume: {out} has no run.json/resume.state")
    meta = read_json(run_path)
    if meta.get("config_hash") != cfg.hash:
        raise ConfigError(
            f"resume config mismatch: directory was produced with config hash "
            f"{meta.get('config_hash')}, current config hashes to {cfg.hash}"
        )
    stores = ad.load_training_state(state_path)
    start = stores[step_store].step
    history = read_loss_csv(os.path.join(out, "loss.csv"), columns)
    if len(history) < start:
        raise FormatError(f"loss.csv has {len(history)} rows but the state "
                          f"is at step {start}")
    return stores, start, history[:start]


def make_checkpointer(out, every, columns, prior, stores_of, meta_of):
    """Periodic checkpoint callback for the training loops: loss.csv first,
    then resume.state, then run.json, each atomically."""
    def on_step(result, row):
        if every and result.steps % every == 0:
            write_loss_csv(os.path.join(out, "loss.csv"),
                           prior + result.history, columns)
            save_state(stores_of(result), os.path.join(out, "resume.state"))
            write_json(os.path.join(out, "run.json"), meta_of(result))
    return on_step


def derived_seed(seed: int, *tags) -> int:
    return int(rngmod.stream(seed, *tags).integers(2**31))


def cloud_files(directory):
    """Sorted NPCD files in a directory, excluding log-variance sidecars."""
    names = sorted(n for n in os.listdir(directory)
                   if n.endswith(".npcd") and not n.endswith(".logvar.npcd"))
    return [os.path.join(directory, n) for n in names]


def find_stats_digest(directory):
    """stats digest recorded in run.json of the directory or its parent."""
    for candidate in (directory, os.path.dirname(os.path.abspath(directory))):
        path = os.path.join(candidate, "run.json")
        if os.path.exists(path):
            return read_json(path).get("stats_digest")
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = load_config(args)
    ds = cfg.section("dataset")
    with output_dir(args.out) as out:
        records, manifest = td.build_dataset(
            out, ds["n_objects"], ds["views_per_object"], ds["m_points"],
            ds["image_size"], args.seed,
            test_views_per_object=ds["test_views_per_object"],
            classes=tuple(ds["classes"]), n_dense=ds["n_dense"], radius=ds["radius"],
        )
        write_run_meta(out, "gen-data", cfg, args.seed,
                       objects=manifest["object_ids"])
    print(f"dataset: {len(manifest['object_ids'])} objects, "
          f"{ds['views_per_object']} train + {ds['test_views_per_object']} test views, "
          f"{ds['m_points']} points, {ds['image_size']}x{ds['image_size']} -> {args.out}")
    return 0


AD_LOSS_COLUMNS = ("step", "recon", "tv", "kl", "total")


def cmd_train_autodecoder(args):
    overrides = {}
    if args.lambda_tv is not None:
        overrides["autodecoder.lambda_tv"] = args.lambda_tv
    if args.lambda_kl is not None:
        overrides["autodecoder.lambda_kl"] = args.lambda_kl
    cfg = load_config(args, overrides)
    sec = cfg.section("autodecoder")

    records, manifest = td.load_dataset(args.data, "train")
    clouds = [r.cloud for r in records]
    decoder_cfg = DecoderConfig(sec["feature_dim"], sec["hidden"], sec["agg_width"])
    radius = sec["neighbor_radius"] or suggested_radius(clouds)
    render_cfg = RenderConfig(shading_points=sec["shading_points"],
                              neighbors_k=sec["neighbors_k"], neighbor_radius=radius,
                              ray_chunk=sec["ray_chunk"])
    auto_cfg = adc.AutodecoderConfig(
        lr=sec["lr"], epochs=sec["epochs"], rays_per_view=sec["rays_per_view"],
        init_mode=sec["init_mode"], variational=sec["variational"],
        lambda_tv=sec["lambda_tv"], lambda_kl=sec["lambda_kl"],
        tv_neighbors=sec["tv_neighbors"], init_logvar=sec["init_logvar"],
    )

    with output_dir(args.out) as out:
        if args.resume:
            state, start, history = check_resume(out, cfg, "features",
                                                 AD_LOSS_COLUMNS)
            decoder_store, feature_store = state["decoder"], state["features"]
        else:
            decoder_store = init_decoder(
                decoder_cfg, rngmod.stream(args.seed, "autodecoder", "decoder-init"))
            feature_store, start, history = None, 0, []

        checkpoint = make_checkpointer(
            out, sec["checkpoint_every"], AD_LOSS_COLUMNS, history,
            lambda r: {"decoder": r.decoder_store, "features": r.feature_store},
            lambda r: run_meta("train-autodecoder", cfg, args.seed, steps=r.steps,
                               objects=[rec.object_id for rec in records]))
        result = adc.fit(records, decoder_store, decoder_cfg, render_cfg, auto_cfg,
                         args.seed, start_step=start, feature_store=feature_store,
                         on_step=checkpoint)

        ad.save_params(result.decoder_store, os.path.join(out, "decoder.params"))
        decoder_cfg.save(os.path.join(out, "decoder.json"))
        write_json(os.path.join(out, "render.json"), {
            "shading_points": sec["shading_points"], "neighbors_k": sec["neighbors_k"],
            "neighbor_radius": radius, "ray_chunk": sec["ray_chunk"],
        })
        clouds_dir = os.path.join(out, "clouds")
        os.makedirs(clouds_dir, exist_ok=True)
        fitted = []
        for rec in records:
            cloud = result.cloud_of(records, rec.object_id)
            path = os.path.join(clouds_dir, f"{rec.object_id}.npcd")
            save_npcd(cloud, path)
            if auto_cfg.variational:
                save_npcd(NeuralPointCloud(rec.cloud.positions,
                                           result.logvar_of(rec.object_id)),
                          os.path.join(clouds_dir, f"{rec.object_id}.logvar.npcd"))
            fitted.append(load_npcd(path))
        # stats describe the saved (quantized) clouds that diffusion loads
        stats = compute_normalization(fitted)
        stats.save(os.path.join(out, "stats.json"))

        write_loss_csv(os.path.join(out, "loss.csv"), history + result.history,
                       AD_LOSS_COLUMNS)
        save_state({"decoder": result.decoder_store,
                    "features": result.feature_store},
                   os.path.join(out, "resume.state"))
        write_run_meta(out, "train-autodecoder", cfg, args.seed, steps=result.steps,
                       objects=[r.object_id for r in records],
                       stats_digest=file_sha256(os.path.join(out, "stats.json")))
    rows = history + result.history
    final = f", final loss {rows[-1]['total']:.6f}" if rows else ""
    print(f"autodecoder: {result.steps} steps over {len(records)} objects"
          f"{final} -> {args.out}")
    return 0


DIFF_LOSS_COLUMNS = ("step", "loss")


def cmd_train_diffusion(args):
    cfg = load_config(args)
    sec = cfg.section("diffusion")

    stats_path = os.path.join(args.clouds, "stats.json")
    stats = NormalizationStats.load(stats_path)
    files = cloud_files(os.path.join(args.clouds, "clouds"))
    if not files:
        raise FormatError(f"no point cloud files under {args.clouds}")
    clouds = [load_npcd(p) for p in files]
    shapes = {(c.m, c.d) for c in clouds}
    if len(shapes) > 1:
        raise ConfigError(f"clouds mix sizes {sorted(shapes)}; the denoiser needs "
                          f"uniform M and D")
    normalized = [normalize(c, stats) for c in clouds]
    bounds = normalized_clip_bounds(clouds, stats)

    schedule = df.NoiseSchedule(sec["timesteps"], sec["beta_start"], sec["beta_end"])
    den_cfg = df.DenoiserConfig(m=clouds[0].m, d=clouds[0].d, layers=sec["layers"],
                                model_dim=sec["model_dim"], heads=sec["heads"],
                                time_embedding_dim=sec["time_embedding_dim"])
    train_cfg = df.DiffusionTrainConfig(steps=sec["steps"], lr=sec["lr"],
                                        batch_size=sec["batch_size"],
                                        ema_decay=sec["ema_decay"])

    with output_dir(args.out) as out:
        if args.resume:
            state, start, history = check_resume(out, cfg, "model",
                                                 DIFF_LOSS_COLUMNS)
            store, ema_store = state["model"], state["ema"]
        else:
            store, ema_store, start, history = None, None, 0, []

        checkpoint = make_checkpointer(
            out, sec["checkpoint_every"], DIFF_LOSS_COLUMNS, history,
            lambda r: {"model": r.store, "ema": r.ema_store},
            lambda r: run_meta("train-diffusion", cfg, args.seed, steps=r.steps,
                               clouds=len(clouds)))
        result = df.train_denoiser(normalized, den_cfg, schedule, train_cfg, args.seed,
                                   store=store, ema_store=ema_store, start_step=start,
                                   on_step=checkpoint)

        ad.save_params(result.store, os.path.join(out, "denoiser.params"))
        ad.save_params(result.ema_store, os.path.join(out, "denoiser-ema.params"))
        den_cfg.save(os.path.join(out, "denoiser.json"))
        write_json(os.path.join(out, "schedule.json"), schedule.to_json())
        write_json(os.path.join(out, "bounds.json"), {
            "position_low": bounds[0].tolist(), "position_high": bounds[1].tolist(),
            "feature_low": bounds[2].tolist(), "feature_high": bounds[3].tolist(),
        })
        stats.save(os.path.join(out, "stats.json"))
        write_loss_csv(os.path.join(out, "loss.csv"), history + result.history,
                       DIFF_LOSS_COLUMNS)
        save_state({"model": result.store, "ema": result.ema_store},
                   os.path.join(out, "resume.state"))
        write_run_meta(out, "train-diffusion", cfg, args.seed, steps=result.steps,
                       clouds=len(clouds), stats_digest=file_sha256(stats_path))
    rows = history + result.history
    final = f", final loss {rows[-1]['loss']:.6f}" if rows else ""
    print(f"diffusion: {result.steps} steps on {len(clouds)} clouds"
          f"{final} -> {args.out}")
    return 0


def load_bounds(path):
    doc = read_json(path)
    try:
        return tuple(np.asarray(doc[k], dtype=np.float64)
                     for k in ("position_low", "position_high",
                               "feature_low", "feature_high"))
    except KeyError as e:
        raise FormatError(f"bounds file missing field {e.args[0]!r}") from e


def load_decoder_bundle(directory):
    decoder_cfg = DecoderConfig.load(os.path.join(directory, "decoder.json"))
    decoder_store = ad.load_params(os.path.join(directory, "decoder.params"))
    rj = read_json(os.path.join(directory, "render.json"))
    render_cfg = RenderConfig(shading_points=rj["shading_points"],
                              neighbors_k=rj["neighbors_k"],
                              neighbor_radius=rj["neighbor_radius"],
                              ray_chunk=rj["ray_chunk"])
    return decoder_store, decoder_cfg, render_cfg


def render_cloud_views(cloud, decoder_bundle, n_views, radius, image_size, out_dir):
    decoder_store, decoder_cfg, render_cfg = decoder_bundle
    bound = float(np.linalg.norm(cloud.positions, axis=1).max())
    if bound >= radius:
        raise ConfigError(f"cloud extends to radius {bound:.3f}; raise "
                          f"sampler.render_radius above it")
    cams = td.spiral_camera_poses(n_views, radius, bound, image_size)
    os.makedirs(out_dir, exist_ok=True)
    for v, cam in enumerate(cams):
        image = render_image(decoder_store, decoder_cfg, cloud, cam, render_cfg)
        save_ppm(image, os.path.join(out_dir, f"{v:03d}.ppm"))


def cmd_sample(args):
    overrides = {}
    if args.preset:
        if args.preset not in sp.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; "
                              f"choose from {sorted(sp.PRESETS)}")
        knobs = sp.PRESETS[args.preset]
        overrides = {"sampler.n_rev": knobs.n_rev,
                     "sampler.n_repaint": knobs.n_repaint,
                     "sampler.n_resample": knobs.n_resample}
    cfg = load_config(args, overrides)
    sec = cfg.section("sampler")

    ckpt = args.checkpoint
    den_cfg = df.DenoiserConfig.load(os.path.join(ckpt, "denoiser.json"))
    schedule = df.NoiseSchedule.from_json(read_json(os.path.join(ckpt, "schedule.json")))
    stats = NormalizationStats.load(os.path.join(ckpt, "stats.json"))
    bounds = load_bounds(os.path.join(ckpt, "bounds.json"))
    weights = "denoiser-ema.params" if sec["use_ema"] else "denoiser.params"
    store = ad.load_params(os.path.join(ckpt, weights))

    pin = None
    if args.mode != "unconditional":
        if not args.input:
            raise ConfigError(f"{args.mode} sampling requires --input with the "
                              f"conditioning point cloud")
        conditioning = normalize(load_npcd(args.input), stats)
        pin = (conditioning.positions if args.mode == "appearance-only"
               else conditioning.features)
    sampler_cfg = sp.SamplerConfig(sec["n_rev"], sec["n_repaint"], sec["n_resample"])

    decoder_bundle = None
    if args.render_from and sec["render_views"] > 0:
        decoder_bundle = load_decoder_bundle(args.render_from)

    with output_dir(args.out) as out:
        samples_dir = os.path.join(out, "samples")
        os.makedirs(samples_dir, exist_ok=True)
        total_calls = 0
        for k in range(sec["n_samples"]):
            seed_k = derived_seed(args.seed, "cli-sample", k)
            instr = sp.Instrumentation(record_every=100 if args.trajectory else 0)
            if args.mode == "unconditional":
                cloud = sp.sample_unconditional(store, den_cfg, schedule, stats,
                                                bounds, seed_k, instr=instr)
            elif args.mode == "appearance-only":
                cloud = sp.appearance_only_sample(pin, store, den_cfg, schedule,
                                                  sampler_cfg, stats, bounds, seed_k,
                                                  instr=instr)
            else:
                cloud = sp.shape_only_sample(pin, store, den_cfg, schedule,
                                             sampler_cfg, stats, bounds, seed_k,
                                             instr=instr)
            total_calls += instr.denoiser_calls
            save_npcd(cloud, os.path.join(samples_dir, f"{k:03d}.npcd"))
            if args.trajectory:
                traj_dir = os.path.join(out, "trajectory", f"{k:03d}")
                os.makedirs(traj_dir, exist_ok=True)
                for level, state in instr.trajectory:
                    snapshot = sp._finish(state, stats)
                    save_npcd(snapshot,
                              os.path.join(traj_dir, f"level-{level:04d}.npcd"))
            if decoder_bundle is not None:
                render_cloud_views(cloud, decoder_bundle, sec["render_views"],
                                   sec["render_radius"], sec["render_image_size"],
                                   os.path.join(out, "renders", f"{k:03d}"))
        write_run_meta(out, "sample", cfg, args.seed, mode=args.mode,
                       n_samples=sec["n_samples"], denoiser_calls=total_calls,
                       stats_digest=file_sha256(os.path.join(ckpt, "stats.json")))
    print(f"sample: {sec['n_samples']} {args.mode} draws "
          f"({total_calls} denoiser calls) -> {args.out}")
    return 0


def cmd_render(args):
    cfg = load_config(args)
    sec = cfg.section("sampler")
    n_views = args.views if args.views is not None else sec["render_views"]
    if n_views < 1:
        raise ConfigError("render needs --views >= 1 (or sampler.render_views)")
    decoder_bundle = load_decoder_bundle(args.decoder)

    if os.path.isdir(args.clouds):
        files = cloud_files(args.clouds)
        if not files:
            raise ConfigError(f"no point cloud files in {args.clouds}")
    else:
        files = [args.clouds]

    with output_dir(args.out) as out:
        for path in files:
            cloud = load_npcd(path)
            stem = os.path.splitext(os.path.basename(path))[0]
            render_cloud_views(cloud, decoder_bundle, n_views,
                               sec["render_radius"], sec["render_image_size"],
                               os.path.join(out, stem))
        write_run_meta(out, "render", cfg, args.seed, views=n_views,
                       clouds=len(files))
    print(f"render: {len(files)} clouds x {n_views} views -> {args.out}")
    return 0


EVAL_METRICS = ("one_nn_chamfer", "one_nn_emd")


def cmd_eval(args):
    cfg = load_config(args)
    sec = cfg.section("eval")
    for name in sec["metrics"]:
        if name not in EVAL_METRICS:
            raise ConfigError(f"unknown eval metric {name!r}; "
                              f"choose from {list(EVAL_METRICS)}")

    gen_files = cloud_files(args.generated)
    ref_files = cloud_files(args.reference)
    if not gen_files or not ref_files:
        raise ConfigError("both --generated and --reference must contain "
                          "point cloud files")
    gen_digest = find_stats_digest(args.generated)
    ref_digest = find_stats_digest(args.reference)
    if gen_digest and ref_digest and gen_digest != ref_digest:
        raise ConfigError("normalization stats mismatch between generated and "
                          "reference artifacts; refusing to compare")

    gen_sets = [load_npcd(p).positions for p in gen_files]
    ref_sets = [load_npcd(p).positions for p in ref_files]
    sizes = {"generated": len(gen_sets), "reference": len(ref_sets)}

    reports = []
    for name in sec["metrics"]:
        distance = "chamfer" if name == "one_nn_chamfer" else "emd"
        convention = (mt.CHAMFER_CONVENTION if distance == "chamfer"
                      else mt.EMD_CONVENTION)
        value = mt.one_nn_accuracy(gen_sets, ref_sets, distance)
        reports.append(mt.MetricReport(
            "one_nn_accuracy", value, f"leave-one-out 1-nn over {convention}",
            dict(sizes, distance=distance)).to_json())

    if args.psnr_pairs:
        dir_a, dir_b = args.psnr_pairs
        names = sorted(set(os.listdir(dir_a)) & set(os.listdir(dir_b)))
        names = [n for n in names if n.endswith(".ppm")]
        if not names:
            raise ConfigError("no common PPM files between the PSNR directories")
        values = [mt.psnr(load_ppm(os.path.join(dir_a, n)),
                          load_ppm(os.path.join(dir_b, n))) for n in names]
        finite = [v for v in values if np.isfinite(v)]
        mean = float(np.mean(finite)) if finite else float("inf")
        reports.append(mt.MetricReport("psnr", mean, mt.PSNR_CONVENTION,
                                       {"pairs": len(names)}).to_json())

    if args.retrieval:
        query_dir, corpus_dir = args.retrieval
        corpus = [(n, load_ppm(os.path.join(corpus_dir, n)))
                  for n in sorted(os.listdir(corpus_dir)) if n.endswith(".ppm")]
        queries = sorted(n for n in os.listdir(query_dir) if n.endswith(".ppm"))
        if not corpus or not queries:
            raise ConfigError("retrieval needs PPM files in both directories")
        matches = {q: mt.pixel_retrieval(load_ppm(os.path.join(query_dir, q)), corpus)
                   for q in queries}
        reports.append({"metric": "pixel_retrieval",
                        "convention": "pixel-space L2, lowest index on ties",
                        "matches": matches})

    document = {"config_hash": cfg.hash, "sizes": sizes, "reports": reports}
    with output_dir(args.out) as out:
        write_json(os.path.join(out, "eval.json"), document)
        write_run_meta(out, "eval", cfg, args.seed, stats_digest=gen_digest)
    for rep in reports:
        if "value" in rep:
            print(f"{rep['metric']} [{rep['sizes'].get('distance', '-')}]: "
                  f"{rep['value']}")
        else:
            print(f"{rep['metric']}: {len(rep['matches'])} queries matched")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npdiff",
        description="Neural point cloud diffusion pipeline at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the procedural dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-autodecoder", help="fit decoder and per-object features")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--lambda-tv", type=float, default=None,
                   help="override autodecoder.lambda_tv")
    p.add_argument("--lambda-kl", type=float, default=None,
                   help="override autodecoder.lambda_kl")
    p.add_argument("--resume", action="store_true",
                   help="continue from resume.state in --out")
    p.set_defaults(func=cmd_train_autodecoder)

    p = sub.add_parser("train-diffusion", help="train the denoiser on fitted clouds")
    common(p)
    p.add_argument("--clouds", required=True,
                   help="train-autodecoder output directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from resume.state in --out")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="draw point clouds from a trained denoiser")
    common(p)
    p.add_argument("--checkpoint", required=True,
                   help="train-diffusion output directory")
    p.add_argument("--mode", default="unconditional",
                   choices=("unconditional", "appearance-only", "shape-only"))
    p.add_argument("--input", help="conditioning NPCD file for pinned modes")
    p.add_argument("--preset",
                   help=f"named sampler settings: {', '.join(sorted(sp.PRESETS))}")
    p.add_argument("--trajectory", action="store_true",
                   help="dump intermediate states every 100 timesteps")
    p.add_argument("--render-from",
                   help="train-autodecoder directory; renders each sample when "
                        "sampler.render_views > 0")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", help="render stored point clouds with a decoder")
    common(p)
    p.add_argument("--clouds", required=True, help="NPCD file or directory")
    p.add_argument("--decoder", required=True,
                   help="train-autodecoder output directory")
    p.add_argument("--views", type=int, default=None,
                   help="spiral view count (default sampler.render_views)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compare generated clouds against references")
    common(p)
    p.add_argument("--generated", required=True, help="directory of NPCD files")
    p.add_argument("--reference", required=True, help="directory of NPCD files")
    p.add_argument("--psnr-pairs", nargs=2, metavar=("DIR_A", "DIR_B"),
                   help="two directories of identically named PPM files")
    p.add_argument("--retrieval", nargs=2, metavar=("QUERY_DIR", "CORPUS_DIR"),
                   help="pixel-space nearest-neighbor retrieval")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
