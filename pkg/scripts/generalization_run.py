"""Generalization benchmark driver: desk PS-U-Net vs matched U-ViT-multi.

Trains both architectures for 30K steps on a 10K-sample split, keeping
milestone checkpoints, then emits convergence and guidance-sweep tables
plus figures under artifacts/generalization/. The acceptance suite asserts
against these artifacts; rerunning this script regenerates them.

Usage: python3 scripts/generalization_run.py [--out DIR]
"""

import argparse
import json
import os
import sys
import time

import torch

from jointdiff.backbone import DESK_PS_UNET, DESK_UVIT_MULTI, build_ps_unet, build_uvit_multi
from jointdiff.evaluate import cfg_scale_sweep, conditional_consistency, convergence_track, write_table
from jointdiff.plots import plot_convergence, plot_sweep
from jointdiff.schedule import build_schedule
from jointdiff.synth_data import corpus_captions, make_dataset
from jointdiff.text_codec import build_vocab, train_embeddings
from jointdiff.trainer import (MetricsLog, TrainConfig, make_optimizer,
                               prepare_tensors, save_training_checkpoint, train)

MILESTONES = (1000, 2500, 5000, 10000, 15000, 22500, 30000)
TRAIN = TrainConfig(batch_size=16, total_steps=30_000, lr=1e-3, warmup_steps=500,
                    seed=0, eval_every=100_000, checkpoint_every=100_000)
DATASET_N = 10_000
EVAL_SEED = 424242
EVAL_N = 100          # per-milestone convergence evals
FINAL_EVAL_N = 200    # headline accuracy eval
SWEEP_WS = (0.0, 1.0, 3.0, 5.0, 7.0)
SAMPLE_STEPS = 50
W = 3.0


def train_with_milestones(arch: str, out_dir: str, images, texts, sched, table):
    build = build_uvit_multi if arch == "uvit_multi" else build_ps_unet
    cfg = DESK_UVIT_MULTI if arch == "uvit_multi" else DESK_PS_UNET
    model = build(cfg, TRAIN.seed)
    optimizer = make_optimizer(model, TRAIN)
    log = MetricsLog(os.path.join(out_dir, f"{arch}_metrics.tsv"))
    points = []
    start = 0
    t0 = time.time()
    for milestone in MILESTONES:
        seg = TrainConfig(**{**TRAIN.to_dict(), "total_steps": milestone,
                             "adam_betas": TRAIN.adam_betas})
        train(model, images, texts, sched, seg, start_step=start,
              optimizer=optimizer, log=log, table=table, progress_every=500)
        path = os.path.join(out_dir, f"{arch}_step{milestone:06d}.ckpt")
        save_training_checkpoint(path, model, optimizer, milestone, TRAIN, table)
        points.append((milestone, path))
        print(f"[{arch}] milestone {milestone} saved ({time.time() - t0:.0f}s)",
              flush=True)
        start = milestone
    log.close()
    return model, points


def main():
    global MILESTONES, TRAIN, DATASET_N, EVAL_N, FINAL_EVAL_N, SWEEP_WS, SAMPLE_STEPS
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..",
                                                  "artifacts", "generalization"))
    ap.add_argument("--smoke", action="store_true",
                    help="Minutes-long shakeout of the full pipeline.")
    args = ap.parse_args()
    if args.smoke:
        MILESTONES = (2, 4)
        TRAIN = TrainConfig(**{**TRAIN.to_dict(), "batch_size": 2, "total_steps": 4,
                               "warmup_steps": 2, "adam_betas": TRAIN.adam_betas})
        DATASET_N, EVAL_N, FINAL_EVAL_N = 16, 4, 4
        SWEEP_WS, SAMPLE_STEPS = (0.0, 3.0), 4
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)
    torch.set_num_threads(1)

    corpus = corpus_captions()
    vocab = build_vocab(corpus, word_dim=128)
    table = train_embeddings(vocab, corpus, seed=0,
                             embed_dim=DESK_PS_UNET.embed_dim, epochs=3)
    sched = build_schedule(1000, 0.00085, 0.012)
    samples = make_dataset(DATASET_N, seed=0)
    images, texts = prepare_tensors(samples, vocab, table, DESK_PS_UNET.text_len)
    print(f"dataset ready: {len(samples)} samples", flush=True)

    runs = {}
    models = {}
    for arch in ("ps_unet", "uvit_multi"):
        models[arch], runs[arch] = train_with_milestones(
            arch, out, images, texts, sched, table)

    track = convergence_track(runs, sched, vocab, table, n=EVAL_N, seed=EVAL_SEED,
                              w=W, steps=SAMPLE_STEPS,
                              eval_seeds={k: EVAL_SEED for k in runs})
    write_table(track, os.path.join(out, "convergence.tsv"))
    plot_convergence(track, os.path.join(out, "convergence.png"))

    for arch in ("ps_unet", "uvit_multi"):
        rows = cfg_scale_sweep(models[arch], sched, vocab, table, list(SWEEP_WS),
                               "t2i", n=EVAL_N, seed=EVAL_SEED, steps=SAMPLE_STEPS)
        write_table(rows, os.path.join(out, f"sweep_{arch}.tsv"))
        plot_sweep(rows, os.path.join(out, f"sweep_{arch}.png"))

    report = conditional_consistency(models["ps_unet"], sched, vocab, table, "t2i",
                                     n=FINAL_EVAL_N, seed=EVAL_SEED, w=W,
                                     steps=SAMPLE_STEPS)
    mean_acc = sum(report.attr_accuracy.values()) / len(report.attr_accuracy)

    # step ratio: first milestone at which each run reaches the accuracy the
    # baseline attains at its final milestone (directional report only)
    def first_step_reaching(label, threshold):
        for row in sorted((r for r in track if r["label"] == label),
                          key=lambda r: r["step"]):
            if row["mean_attr_accuracy"] >= threshold:
                return row["step"]
        return None

    base_final = max((r["mean_attr_accuracy"] for r in track
                      if r["label"] == "uvit_multi"), default=0.0)
    ps_step = first_step_reaching("ps_unet", base_final)
    uv_step = first_step_reaching("uvit_multi", base_final)
    ratio = (uv_step / ps_step) if ps_step and uv_step else None

    summary = {
        "ps_unet_t2i_attr_accuracy": report.attr_accuracy,
        "ps_unet_t2i_mean_attr_accuracy": mean_acc,
        "ps_unet_t2i_fid_proxy": report.fid_proxy,
        "eval": {"n": FINAL_EVAL_N, "seed": EVAL_SEED, "w": W, "steps": SAMPLE_STEPS},
        "baseline_final_mean_accuracy": base_final,
        "steps_to_baseline_final": {"ps_unet": ps_step, "uvit_multi": uv_step},
        "convergence_step_ratio_uvit_over_ps": ratio,
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2), flush=True)
    print(f"mean t2i attribute accuracy: {mean_acc:.3f} (criterion >= 0.60)", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
