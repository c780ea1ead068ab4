"""Command-line surface: dataset generation, training, sampling in the six
generative scenarios, evaluation, and guidance-scale sweeps.

stdout carries machine-readable key=value summaries, stderr progress and
errors. Failures exit nonzero with a single 'ERROR:<category>: detail'
line on stderr.
"""

from __future__ import annotations

import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click
import torch
import yaml

from . import plots
from .backbone import build_ps_unet, build_uvit_multi
from .config import RunConfig, ScheduleConfig, echo_config, load_config
from .evaluate import (cfg_scale_sweep, conditional_consistency, convergence_track,
                       write_table)
from .sampler import (GuidanceConfig, MaskSpec, SCENARIOS, center_half_mask,
                      joint_infill, load_image_mask, load_text_mask, scenario_mask,
                      unconditional_sample)
from .schedule import build_schedule
from .synth_data import corpus_captions, export_dataset, make_dataset
from .text_codec import build_vocab, encode, nn_decode, train_embeddings
from .trainer import (MetricsLog, load_training_checkpoint, prepare_tensors,
                      resume as resume_training, save_training_checkpoint, train,
                      make_optimizer)


class CliError(click.ClickException):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category

    def show(self, file=None):
        print(f"ERROR:{self.category}: {self.message}", file=sys.stderr)


@click.group()
def main():
    """Joint text-image diffusion on the synthetic shapes benchmark."""


@main.command("gen-data")
@click.option("--n", type=int, required=True, help="Number of samples.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
def cmd_gen_data(n, seed, out):
    """Generate a paired image-caption dataset split."""
    if n < 1:
        raise CliError("input", "--n must be >= 1")
    os.makedirs(out, exist_ok=True)
    samples = make_dataset(n, seed)
    export_dataset(samples, os.path.join(out, "images.npy"),
                   os.path.join(out, "samples.tsv"))
    plots.save_image_grid(torch.stack([s.image for s in samples[:25]]),
                          os.path.join(out, "preview.png"),
                          [s.caption for s in samples[:25]])
    print(f"n={n}")
    print(f"seed={seed}")
    print(f"images={os.path.join(out, 'images.npy')}")
    print(f"sidecar={os.path.join(out, 'samples.tsv')}")


def _build_artifacts(cfg: RunConfig):
    corpus = corpus_captions()
    vocab = build_vocab(corpus, cfg.word_dim)
    table = train_embeddings(vocab, corpus, seed=cfg.seed,
                             embed_dim=cfg.backbone.embed_dim)
    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_start,
                           cfg.schedule.beta_end, cfg.schedule.kind)
    return vocab, table, sched


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML run config; defaults apply when omitted.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None,
              help="Checkpoint to continue from.")
@click.option("--steps", type=int, default=None, help="Override train.total_steps.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--arch", type=click.Choice(["ps_unet", "uvit_multi"]), default=None)
def cmd_train(config_path, out, resume_path, steps, seed, arch):
    """Train a joint diffusion model; writes checkpoints and a metrics log."""
    overrides = {}
    if steps is not None:
        overrides["train.total_steps"] = steps
    if seed is not None:
        overrides["seed"] = seed
        overrides["train.seed"] = seed
    if arch is not None:
        overrides["arch"] = arch
    try:
        cfg = load_config(config_path, overrides)
    except (TypeError, ValueError, yaml.YAMLError) as e:
        raise CliError("config", str(e))

    os.makedirs(out, exist_ok=True)
    echo_config(cfg, out)
    vocab, table, sched = _build_artifacts(cfg)
    samples = make_dataset(cfg.dataset_n, cfg.dataset_seed)
    images, texts = prepare_tensors(samples, vocab, table, cfg.backbone.text_len)
    log = MetricsLog(os.path.join(out, "metrics.tsv"))
    ckpt_path = os.path.join(out, "model.ckpt")
    meta = {"schedule": vars(cfg.schedule) if not hasattr(cfg.schedule, "to_dict")
            else cfg.schedule.to_dict(), "arch": cfg.arch}

    if resume_path is not None:
        model, _ = resume_training(resume_path, images, texts, sched, cfg.train,
                                   log=log, out_path=ckpt_path)
    else:
        build = build_uvit_multi if cfg.arch == "uvit_multi" else build_ps_unet
        model = build(cfg.backbone, cfg.seed)
        optimizer = make_optimizer(model, cfg.train)
        save_training_checkpoint(ckpt_path, model, optimizer, 0, cfg.train, table, meta)
        print(f"training {cfg.arch} for {cfg.train.total_steps} steps", file=sys.stderr)
        train(model, images, texts, sched, cfg.train, optimizer=optimizer, log=log,
              checkpoint_path=ckpt_path, table=table, progress_every=500)
    log.close()
    print(f"checkpoint={ckpt_path}")
    print(f"metrics={os.path.join(out, 'metrics.tsv')}")


def _load_for_inference(checkpoint):
    try:
        model, _, step, _, table, meta = load_training_checkpoint(checkpoint)
    except (ValueError, OSError) as e:
        raise CliError("checkpoint", str(e))
    if table is None:
        raise CliError("checkpoint", "checkpoint lacks the text codec table")
    model.eval()
    s = meta.get("schedule", {})
    sched = build_schedule(s.get("T", 1000), s.get("beta_start", 0.00085),
                           s.get("beta_end", 0.012), s.get("kind", "linear"))
    return model, table, sched, step, meta


def _scenario_requirements(scenario, caption, image):
    needs_caption = scenario in ("t2i", "img-infill", "text-infill", "joint-infill")
    needs_image = scenario in ("i2t", "img-infill", "text-infill", "joint-infill")
    if needs_caption and caption is None:
        raise CliError("scenario", f"--scenario {scenario} requires --caption")
    if not needs_caption and caption is not None:
        raise CliError("scenario", f"--scenario {scenario} forbids --caption")
    if needs_image and image is None:
        raise CliError("scenario", f"--scenario {scenario} requires --image")
    if not needs_image and image is not None:
        raise CliError("scenario", f"--scenario {scenario} forbids --image")


@main.command("sample")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--scenario", type=click.Choice(SCENARIOS), required=True)
@click.option("--caption", type=str, default=None,
              help="Condition caption (t2i and the infilling scenarios).")
@click.option("--image", "image_path", type=click.Path(exists=True), default=None,
              help="Condition image, PNG or .npy (i2t and the infilling scenarios).")
@click.option("--image-mask", type=str, default=None,
              help="0/1 patch-grid file, or 'center-half'.")
@click.option("--text-mask", type=str, default=None,
              help="Comma-separated token indices to generate.")
@click.option("--w", type=float, default=3.0, show_default=True, help="Guidance scale.")
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n", type=int, default=1, show_default=True, help="Independent draws.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel workers for independent draws.")
@click.option("--out", type=click.Path(), required=True)
def cmd_sample(checkpoint, scenario, caption, image_path, image_mask, text_mask,
               w, steps, seed, n, jobs, out):
    """Sample under one of the six generative scenarios."""
    _scenario_requirements(scenario, caption, image_path)
    model, table, sched, step, meta = _load_for_inference(checkpoint)
    cfg = model.cfg
    grid = cfg.image_hw // cfg.patch_size

    img_mask = None
    if image_mask is not None:
        img_mask = center_half_mask(grid) if image_mask == "center-half" \
            else load_image_mask(image_mask, grid)
    txt_mask = load_text_mask(text_mask, cfg.text_len) if text_mask is not None else None
    mask = scenario_mask(scenario, grid, cfg.text_len, img_mask, txt_mask)

    vocab = table.vocab
    if caption is not None:
        try:
            obs_txt = encode(vocab, table, caption, cfg.text_len)
        except (KeyError, ValueError) as e:
            raise CliError("input", str(e))
    else:
        obs_txt = torch.zeros(cfg.text_len, cfg.embed_dim)
    if image_path is not None:
        obs_img = plots.load_image(image_path)
        if obs_img.shape != (cfg.image_channels, cfg.image_hw, cfg.image_hw):
            raise CliError("input", f"condition image shape {tuple(obs_img.shape)} "
                           f"!= ({cfg.image_channels}, {cfg.image_hw}, {cfg.image_hw})")
    else:
        obs_img = torch.zeros(cfg.image_channels, cfg.image_hw, cfg.image_hw)

    guidance = GuidanceConfig(w=w, mode="masked_cfg" if scenario != "uncond" else "none")

    def draw(i):
        rng = torch.Generator().manual_seed(seed + i)
        if scenario == "uncond":
            variant = "unidiffuser_free" if w > 0 else "plain"
            return unconditional_sample(model, sched, steps, rng, variant, w=w)
        return joint_infill(model, obs_img, obs_txt, mask, sched, steps, guidance, rng)

    os.makedirs(out, exist_ok=True)
    if jobs > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(draw, range(n)))
    else:
        results = [draw(i) for i in range(n)]

    run_cfg = {"scenario": scenario, "caption": caption, "image": image_path,
               "w": w, "steps": steps, "seed": seed, "n": n,
               "checkpoint": os.path.abspath(checkpoint), "trained_steps": step,
               "backbone": cfg.to_dict(), "schedule": meta.get("schedule", {})}
    with open(os.path.join(out, "config_resolved.yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(run_cfg, f, sort_keys=True)

    # only emit the modalities the scenario actually generated; observed
    # conditions come back unchanged and would just echo the inputs
    emit_img = mask.image_mask is not None and bool(mask.image_mask.any())
    emit_txt = mask.text_mask is not None and bool(mask.text_mask.any())
    for i, (gen_img, gen_txt) in enumerate(results):
        if gen_img is not None and emit_img:
            plots.save_image_png(gen_img, os.path.join(out, f"sample_{i:03d}.png"))
        if gen_txt is not None and emit_txt:
            decoded = nn_decode(vocab, table, gen_txt)
            with open(os.path.join(out, f"caption_{i:03d}.txt"), "w", encoding="utf-8") as f:
                f.write(decoded + "\n")
            print(f"caption_{i:03d}={decoded}")
    print(f"out={out}")
    print(f"n={n}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--scenario", type=click.Choice(["t2i", "i2t", "text-infill"]),
              default="t2i", show_default=True)
@click.option("--n", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--w", type=float, default=3.0, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Directory for the report file; stdout only when omitted.")
def cmd_eval(checkpoint, scenario, n, seed, w, steps, out):
    """Oracle-scored conditional consistency for a trained checkpoint."""
    model, table, sched, _, _ = _load_for_inference(checkpoint)
    report = conditional_consistency(model, sched, table.vocab, table, scenario,
                                     n, seed, w=w, steps=steps)
    text = report.serialize()
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(text)
    print(text, end="")


@main.command("sweep")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--w-list", type=str, required=True, help="Comma-separated scales.")
@click.option("--scenario", type=click.Choice(["t2i", "i2t", "text-infill"]),
              default="t2i", show_default=True)
@click.option("--n", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def cmd_sweep(checkpoint, w_list, scenario, n, seed, steps, out):
    """Metric vs guidance scale; writes a TSV table and a figure."""
    try:
        ws = [float(x) for x in w_list.split(",") if x.strip()]
    except ValueError as e:
        raise CliError("input", f"bad --w-list: {e}")
    if not ws:
        raise CliError("input", "--w-list is empty")
    model, table, sched, _, _ = _load_for_inference(checkpoint)
    rows = cfg_scale_sweep(model, sched, table.vocab, table, ws, scenario, n, seed,
                           steps=steps)
    os.makedirs(out, exist_ok=True)
    write_table(rows, os.path.join(out, "sweep.tsv"))
    plots.plot_sweep(rows, os.path.join(out, "sweep.png"))
    for r in rows:
        print(f"w={r['w']} fid_proxy={r['fid_proxy']} mean_attr_accuracy={r['mean_attr_accuracy']}")
    print(f"table={os.path.join(out, 'sweep.tsv')}")


if __name__ == "__main__":
    main()
