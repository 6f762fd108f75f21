"""Command-line surface: gen-data, train, fit-lora, invert, morph, eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import diffusion, images, metrics, shapes, store, unet
from .config import RunConfig
from .lora import LoraFitConfig, apply_lora, effective_residuals, fit_lora
from .morph import MorphConfig, morph


def _schedule_from_meta(meta):
    return diffusion.make_schedule(
        T=int(meta.get("T", 1000)),
        beta_start=float(meta.get("beta_start", 1e-4)),
        beta_end=float(meta.get("beta_end", 0.02)),
        ddim_steps=int(meta.get("ddim_steps", 50)),
    )


def cmd_gen_data(args):
    imgs, labels, class_names = shapes.gen_dataset(args.classes, args.count, args.size, args.seed)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i, img in enumerate(imgs):
        name = f"img_{i:05d}.png"
        images.save_image(img, os.path.join(args.out, name))
        files.append(name)
    manifest = {
        "classes": class_names,
        "files": files,
        "labels": [int(x) for x in labels],
        "size": args.size,
        "seed": args.seed,
    }
    with open(os.path.join(args.out, "labels.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(files)} images in {len(class_names)} classes to {args.out}")
    return 0


def _load_dataset(data_dir):
    with open(os.path.join(data_dir, "labels.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    imgs = [images.load_image(os.path.join(data_dir, name)) for name in manifest["files"]]
    return np.stack(imgs), np.asarray(manifest["labels"], dtype=np.int64), manifest


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    imgs, labels, _ = _load_dataset(args.data)
    arch = unet.ArchSpec(
        resolution=cfg.resolution,
        img_channels=cfg.channels,
        base_channels=cfg.model.base_channels,
        channel_mults=tuple(cfg.model.channel_mults),
        n_res_blocks=cfg.model.n_res_blocks,
        attn_resolutions=tuple(cfg.model.attn_resolutions),
        groups=cfg.model.groups,
        time_dim=cfg.model.time_dim,
        cond_dim=cfg.model.cond_dim,
        num_classes=cfg.model.num_classes,
    )
    if imgs.shape[2] != cfg.resolution or imgs.shape[1] != cfg.channels:
        raise ValueError(f"dataset images {imgs.shape[1:]} do not match config "
                         f"({cfg.channels},{cfg.resolution},{cfg.resolution})")
    sched = diffusion.make_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                                    cfg.schedule.beta_end, cfg.schedule.ddim_steps)
    params = unet.init_params(arch, seed=cfg.train.seed)
    tc = diffusion.TrainConfig(steps=cfg.train.steps, lr=cfg.train.lr,
                               batch_size=cfg.train.batch_size, seed=cfg.train.seed,
                               weight_decay=cfg.train.weight_decay)
    losses = diffusion.train_base(imgs, labels, params, sched, tc)
    if losses:
        tail = losses[-min(100, len(losses)):]
        print(f"trained {len(losses)} steps; mean loss over last {len(tail)}: "
              f"{float(np.mean(tail)):.4f}")
    schedule_meta = {
        "T": cfg.schedule.T,
        "beta_start": cfg.schedule.beta_start,
        "beta_end": cfg.schedule.beta_end,
        "ddim_steps": cfg.schedule.ddim_steps,
    }
    store.save_model(args.out, params, schedule_meta)
    print(f"saved model to {args.out}")
    return 0


def cmd_fit_lora(args):
    params, sched_meta = store.load_model(args.model)
    sched = _schedule_from_meta(sched_meta)
    img = images.load_image(args.image)
    cond = unet.condition_embed(args.class_id, params)
    fc = LoraFitConfig(steps=args.steps, lr=args.lr, rank=args.rank, seed=args.seed)
    delta, losses = fit_lora(img, cond, params, sched, fc)
    print(f"fit adapter in {len(losses)} steps; "
          f"first/last-20 mean loss: {np.mean(losses[:20]):.4f} / {np.mean(losses[-20:]):.4f}")
    store.save_lora(args.out, delta)
    print(f"saved adapter to {args.out}")
    return 0


def cmd_invert(args):
    params, sched_meta = store.load_model(args.model)
    sched = _schedule_from_meta(sched_meta)
    img = images.load_image(args.image)
    cond = unet.condition_embed(args.class_id, params)
    delta = store.load_lora(args.lora)
    net = apply_lora(params, effective_residuals(delta))
    z_t = diffusion.ddim_invert(img[None], cond, net, sched)
    store.save_latent(args.out, z_t)
    print(f"saved inverted latent to {args.out}")
    return 0


def cmd_morph(args):
    params, sched_meta = store.load_model(args.model)
    if args.ddim_steps is not None:
        sched_meta = dict(sched_meta, ddim_steps=args.ddim_steps)
    sched = _schedule_from_meta(sched_meta)
    img_a = images.load_image(args.image_a)
    img_b = images.load_image(args.image_b)
    adain = args.adain_stage != "off"
    cfg = MorphConfig(
        n=args.frames,
        lam=args.lam,
        adain=adain,
        adain_stage=args.adain_stage if adain else "initial-noise",
        reschedule=args.reschedule,
        seed=args.seed,
        ddim_steps=sched.ddim_steps,
    )
    loras = None
    if args.lora_a or args.lora_b:
        if not (args.lora_a and args.lora_b):
            raise ValueError("supply both --lora-a and --lora-b, or neither")
        loras = (store.load_lora(args.lora_a), store.load_lora(args.lora_b))
    seq = morph(img_a, img_b, args.class_a, args.class_b, params, sched, cfg,
                loras=loras, fit_config=LoraFitConfig(seed=args.seed))

    os.makedirs(args.out, exist_ok=True)
    names, hashes = [], {}
    for i, frame in enumerate(seq.frames):
        name = f"frame_{i:03d}.png"
        path = os.path.join(args.out, name)
        images.save_image(frame, path)
        with open(path, "rb") as f:
            hashes[name] = hashlib.sha256(f.read()).hexdigest()
        names.append(name)
    doc = {
        "alphas": seq.alphas,
        "config": seq.config,
        "config_hash": hashlib.sha256(
            json.dumps(seq.config, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest(),
        "frames": names,
        "hashes": hashes,
    }
    with open(os.path.join(args.out, "sequence.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(names)} frames to {args.out}")
    return 0


def cmd_eval(args):
    names = sorted(n for n in os.listdir(args.frames)
                   if n.startswith("frame_") and n.endswith(".png"))
    if len(names) < 2:
        raise ValueError(f"{args.frames}: need at least 2 frame_*.png files")
    frames = [images.load_image(os.path.join(args.frames, n)) for n in names]
    config_hash = None
    seq_path = os.path.join(args.frames, "sequence.json")
    if os.path.exists(seq_path):
        with open(seq_path, "r", encoding="utf-8") as f:
            config_hash = json.load(f).get("config_hash")
    report = metrics.MetricsReport.from_frames(frames, config_hash=config_hash)
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(f"ppl={report.ppl:.6f} pdv={report.pdv:.6f} over {report.frames} frames")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tinymorph",
                                description="Image morphing on a toy pixel-space diffusion model")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", default="ellipse,polygon-4,cross",
                   help="count or comma-separated primitives")
    g.add_argument("--count", type=int, default=16, help="images per class")
    g.add_argument("--size", type=int, default=32, choices=(32, 64))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the base denoiser")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("fit-lora", help="fit a low-rank adapter to one image")
    f.add_argument("--model", required=True)
    f.add_argument("--image", required=True)
    f.add_argument("--class", dest="class_id", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--rank", type=int, default=16)
    f.add_argument("--steps", type=int, default=200)
    f.add_argument("--lr", type=float, default=2e-4)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(fn=cmd_fit_lora)

    i = sub.add_parser("invert", help="DDIM-invert an image to its latent noise")
    i.add_argument("--model", required=True)
    i.add_argument("--lora", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--class", dest="class_id", type=int, required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_invert)

    m = sub.add_parser("morph", help="morph between two images")
    m.add_argument("--model", required=True)
    m.add_argument("--image-a", required=True)
    m.add_argument("--image-b", required=True)
    m.add_argument("--class-a", type=int, required=True)
    m.add_argument("--class-b", type=int, required=True)
    m.add_argument("--lora-a")
    m.add_argument("--lora-b")
    m.add_argument("--frames", dest="frames", type=int, default=16,
                   help="frame intervals n; writes n+1 images")
    m.add_argument("--lambda", dest="lam", type=float, default=0.6,
                   help="fraction of early steps with attention injection")
    m.add_argument("--adain-stage", choices=("initial-noise", "final-latent", "off"),
                   default="initial-noise")
    m.add_argument("--reschedule", action="store_true")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--ddim-steps", type=int, default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_morph)

    e = sub.add_parser("eval", help="compute smoothness metrics for a frame directory")
    e.add_argument("--frames", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one-line diagnostic naming the failing stage
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
