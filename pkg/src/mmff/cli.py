"""``mmff`` command line: synth-gen, train, eval, ablate, report-complexity, viz-attention.

Every command writes into a temporary directory next to ``--out`` and moves
the files into place only on success. Errors print a single
``mmff <command>: error: ...`` line and exit with status 2.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from .config import RunConfig, desk_config
from .errors import ConfigError, MMFFError, SampleNotFound, SpecInvalid

log = logging.getLogger("mmff")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

@contextlib.contextmanager
def staged_output(out_dir):
    """Yield a scratch directory whose files are moved into ``out_dir`` on success."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".mmff-", dir=parent)
    try:
        yield tmp
        os.makedirs(out_dir, exist_ok=True)
        for name in sorted(os.listdir(tmp)):
            dst = os.path.join(out_dir, name)
            if os.path.isdir(dst) and not os.path.islink(dst):
                shutil.rmtree(dst)
            os.replace(os.path.join(tmp, name), dst)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = desk_config()
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out:
        cfg.out_dir = args.out
    return cfg


def load_synth_spec(path):
    from .synthdata import SynthSpec
    spec = SynthSpec()
    if path is None:
        return spec
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise SpecInvalid(f"spec file {path!r} not found") from None
    except configparser.Error as e:
        raise SpecInvalid(f"unparseable spec file: {e}") from None
    fields = {f.name: f for f in dataclasses.fields(SynthSpec)}
    for sect in cp.sections():
        if sect != "synth":
            raise SpecInvalid(f"unknown section [{sect}]")
        for key, raw in cp[sect].items():
            if key not in fields:
                raise SpecInvalid(f"unknown spec key {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            default = getattr(spec, key)
            if isinstance(default, tuple):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            elif isinstance(default, float) and isinstance(value, int):
                value = float(value)
            setattr(spec, key, value)
    return spec


def save_confusion_image(path, confusion: np.ndarray, classes) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    K = len(confusion)
    rows = confusion.sum(axis=1, keepdims=True)
    prob = confusion / np.maximum(rows, 1)
    fig, ax = plt.subplots(figsize=(1 + 0.6 * K, 1 + 0.6 * K), dpi=100)
    ax.imshow(prob, cmap="Blues", vmin=0, vmax=1)
    for i in range(K):
        for j in range(K):
            ax.text(j, i, f"{prob[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if prob[i, j] > 0.5 else "black")
    ax.set_xticks(range(K))
    ax.set_yticks(range(K))
    ax.set_xticklabels(classes, rotation=90, fontsize=7)
    ax.set_yticklabels(classes, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    from .synthdata import generate_dataset
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    if not args.out:
        raise ConfigError("--out is required")
    root = generate_dataset(spec, args.out)
    print(root)
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .dataset import prepare
    from .training import build_model, set_determinism, train_all

    cfg = load_run_config(args)
    cfg.validate()
    if not cfg.dataset:
        raise ConfigError("no dataset given (config [run] dataset or --dataset)")
    stages = sorted({int(s) for s in args.stages.split(",")})
    if not set(stages) <= {1, 2, 3}:
        raise ConfigError(f"stages must be drawn from 1,2,3, got {args.stages}")
    model = None
    if args.resume:
        model, ckpt_cfg, done = load_checkpoint(args.resume)
        set_determinism(cfg.train.seed, cfg.deterministic)
        stages = [s for s in stages if s > done]
        log.info("resuming after stage %d", done)
    train = prepare(cfg.dataset, cfg, "train", True)
    if model is None:
        model = build_model(cfg, train.num_classes)
    with staged_output(cfg.out_dir) as tmp:
        logf = open(os.path.join(tmp, "train.log"), "a")

        def sink(entry):
            logf.write(entry.line() + "\n")
            logf.flush()

        def on_stage(m, stage):
            save_checkpoint(os.path.join(tmp, f"stage{stage}.safetensors"), m, cfg, stage)

        try:
            train_all(cfg, train, stages, model, sink, on_stage)
        finally:
            logf.close()
        cfg.save(os.path.join(tmp, "config.ini"))
    print(os.path.abspath(cfg.out_dir))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import prepare
    from .skeleton_io import load_manifest
    from .training import evaluate

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, cfg, stage = load_checkpoint(args.checkpoint, min_stage=2)
    dataset = args.dataset or cfg.dataset
    manifest = load_manifest(dataset)
    data = prepare(manifest, cfg, args.split, False)
    rep = evaluate(model, data)
    out = args.out or os.path.join(cfg.out_dir, "eval")
    with staged_output(out) as tmp:
        d = rep.to_dict()
        d.update({"split": args.split, "classes": manifest.classes, "checkpoint_stage": stage})
        write_json(os.path.join(tmp, "report.json"), d)
        np.savetxt(os.path.join(tmp, "confusion.txt"), rep.confusion, fmt="%d")
        save_confusion_image(os.path.join(tmp, "confusion.png"), rep.confusion, manifest.classes)
    print(f"accuracy {rep.accuracy:.4f} ({int(np.trace(rep.confusion))}/{rep.total})")
    return 0


def cmd_ablate(args) -> int:
    from .training import ablation_table, run_ablation

    cfg = load_run_config(args)
    cfg.validate()
    if args.sweep == "fractions":
        variants = [f"fraction={k / 10:.1f}" for k in range(1, 10)]
    elif args.sweep == "frames":
        variants = ["frames=1", "frames=3", "frames=5"]
    else:
        variants = [v for v in (args.variants or "full").split(",") if v]
    rows = run_ablation(cfg.dataset, variants, cfg)
    out = args.out or os.path.join(cfg.out_dir, "ablation")
    with staged_output(out) as tmp:
        with open(os.path.join(tmp, "ablation.tsv"), "w") as fh:
            fh.write(ablation_table(rows))
        write_json(os.path.join(tmp, "ablation.json"),
                   [{**{k: v for k, v in r.items() if k != "report"}, "report": r["report"].to_dict()}
                    for r in rows])
    sys.stdout.write(ablation_table(rows))
    return 0


def cmd_report_complexity(args) -> int:
    from .complexity import report_complexity, video_variant

    cfg = load_run_config(args)
    cfg.validate(check_paths=False)
    rep = report_complexity(cfg)
    video = report_complexity(video_variant(cfg, args.video_frames))
    single_rgb, video_rgb = rep.module("rgb")[1], video.module("rgb")[1]
    text = rep.text() + (f"# rgb stream MACs: 1 frame {single_rgb}, "
                         f"{args.video_frames} frames {video_rgb}\n")
    out = args.out or os.path.join(cfg.out_dir, "complexity")
    with staged_output(out) as tmp:
        d = rep.to_dict()
        d["video_variant"] = {"frames": args.video_frames, "rgb_macs": video_rgb,
                              "total_macs": video.total_macs}
        write_json(os.path.join(tmp, "complexity.json"), d)
        with open(os.path.join(tmp, "complexity.txt"), "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def _heat_png(mask: np.ndarray, scale: int):
    from PIL import Image
    up = np.kron(mask, np.ones((scale, scale)))
    return Image.fromarray(np.clip(np.round(up * 255), 0, 255).astype(np.uint8), mode="L")


def _overlay_png(crop: np.ndarray, mask: np.ndarray, scale: int):
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image
    up = np.kron(mask, np.ones((scale, scale)))
    H, W = crop.shape[1:]
    up = up[:H, :W]
    heat = colormaps["jet"](up)[..., :3]
    img = 0.5 * np.moveaxis(crop, 0, -1) + 0.5 * heat
    return Image.fromarray(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))


def cmd_viz_attention(args) -> int:
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .dataset import feature_grid, prepare_sample
    from .rgb_stream import skeleton_attention_mask
    from .skeleton_io import load_manifest, load_sample

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.sample:
        raise ConfigError("--sample is required")
    model, cfg, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.dataset or cfg.dataset)
    entry = next((e for e in manifest.samples if e.sample_id == args.sample), None)
    if entry is None:
        raise SampleNotFound(f"sample {args.sample!r} not in the manifest")
    sample = load_sample(manifest, entry)
    feat_hw = feature_grid(cfg)
    (_, images, masks), = prepare_sample(sample, cfg, False, np.random.default_rng(0), feat_hw)
    crop = images[0]
    model.eval()
    with torch.no_grad():
        _, det = model.rgb.frame_details(torch.tensor(crop[None], dtype=torch.float32),
                                         torch.tensor(masks[0][None], dtype=torch.float32))
    scale = crop.shape[-1] // feat_hw[1]
    out = args.out or os.path.join(cfg.out_dir, "attention", args.sample)
    with staged_output(out) as tmp:
        Image.fromarray(np.clip(np.round(np.moveaxis(crop, 0, -1) * 255), 0, 255).astype(np.uint8)) \
            .save(os.path.join(tmp, "crop.png"))
        for k, m in enumerate(det["self_masks"]):
            m = m[0, 0].numpy().astype(np.float64)
            _heat_png(m, scale).save(os.path.join(tmp, f"self_attention_{k}.png"))
            _overlay_png(crop, m, scale).save(os.path.join(tmp, f"self_attention_{k}_overlay.png"))
        ske = masks[0][0]
        _heat_png(ske, scale).save(os.path.join(tmp, "skeleton_attention.png"))
        _overlay_png(crop, ske, scale).save(os.path.join(tmp, "skeleton_attention_overlay.png"))
        # binary square at crop resolution, before resizing to the feature grid
        from .dataset import crop_frame, frame_fraction_indices, load_frame
        i = frame_fraction_indices(sample.skeleton.frame_count, cfg.frame_fractions)[0]
        _, tf = crop_frame(load_frame(sample.frame_paths[i]), sample, i, cfg, False,
                           np.random.default_rng(0))
        _, full = skeleton_attention_mask(sample.skeleton, sample.camera, tf, feat_hw[1], feat_hw[0],
                                          cfg.model.square_frac, mid_index=i, return_full=True)
        _heat_png(full, 1).save(os.path.join(tmp, "skeleton_attention_full.png"))
    print(os.path.abspath(out))
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report-complexity": cmd_report_complexity,
    "viz-attention": cmd_viz_attention,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="run configuration (INI)")
    shared.add_argument("--seed", type=int, help="override the RNG seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--deterministic", action="store_true",
                        help="single thread, deterministic kernels")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmff", description="Two-stream skeleton + RGB action recognition.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", parents=[shared], help="generate the synthetic dataset")
    s.add_argument("--spec", help="synthetic spec file ([synth] section); defaults if omitted")

    s = sub.add_parser("train", parents=[shared], help="three-stage training")
    s.add_argument("--dataset")
    s.add_argument("--stages", default="1,2,3", help="comma-separated subset of 1,2,3")
    s.add_argument("--resume", help="checkpoint to continue from; completed stages are skipped")

    s = sub.add_parser("eval", parents=[shared], help="evaluate a stage >= 2 checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--split", default="test")

    s = sub.add_parser("ablate", parents=[shared], help="compare ablation variants")
    s.add_argument("--dataset")
    s.add_argument("--variants", help="comma-separated variant names")
    s.add_argument("--sweep", choices=("fractions", "frames"))

    s = sub.add_parser("report-complexity", parents=[shared], help="parameter / MAC report")
    s.add_argument("--video-frames", type=int, default=16)

    s = sub.add_parser("viz-attention", parents=[shared], help="attention heatmaps for one sample")
    s.add_argument("--checkpoint")
    s.add_argument("--sample")
    s.add_argument("--dataset")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (MMFFError, OSError, KeyError, ValueError) as e:
        msg = str(e).strip("'\"") or type(e).__name__
        print(f"mmff {args.command}: error: {msg.splitlines()[0]}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
