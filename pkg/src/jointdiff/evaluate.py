"""Desk-scale evaluation: random-feature Fréchet distance, oracle-scored
conditional consistency, convergence tracking, and guidance-scale sweeps.

The Fréchet proxy fits Gaussians to features from a fixed, untrained,
seed-determined conv net. It preserves the Fréchet machinery but its
absolute values are not comparable to Inception-based scores; every
serialized report says so in its header.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import PSUNet
from .sampler import GuidanceConfig, MaskSpec, joint_infill, scenario_mask
from .schedule import NoiseSchedule
from .synth_data import (SceneSpec, oracle_classify, parse_caption, render,
                         caption_grammar)
from .text_codec import EmbeddingTable, Vocabulary, encode, nn_decode

FID_PROXY_NOTE = ("fid_proxy uses a fixed random-feature extractor; "
                  "values are not comparable to Inception-based FID")

ATTRIBUTES = ("shape", "color", "size", "position", "background")


class FeatureExtractor(nn.Module):
    """Fixed random conv features image -> R^64. Never trained."""

    def __init__(self, seed: int = 0, feature_dim: int = 64):
        super().__init__()
        state = torch.random.get_rng_state()
        try:
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, feature_dim, 3, stride=2, padding=1), nn.GELU(),
            )
        finally:
            torch.random.set_rng_state(state)
        self.feature_dim = feature_dim
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return self.net(images.float()).mean(dim=(2, 3))


def _sqrt_eigh(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric matrix square root; negative eigenvalues clipped at 0."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, float(vals.min())


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^1/2) via the symmetric form."""
    s1_half, _ = _sqrt_eigh(sigma1)
    inner = s1_half @ sigma2 @ s1_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = 2.0 * np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - tr_cross)


def frechet_proxy(real_images: torch.Tensor, gen_images: torch.Tensor,
                  extractor: FeatureExtractor) -> tuple[float, bool]:
    """Fréchet distance between feature Gaussians. Returns (value, ridged).

    ridged is True when a degenerate covariance needed a 1e-6 ridge.
    """
    if len(real_images) == 0 or len(gen_images) == 0:
        raise ValueError("both image sets must be nonempty")
    f1 = extractor(real_images).double().numpy()
    f2 = extractor(gen_images).double().numpy()
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.cov(f1, rowvar=False)
    s2 = np.cov(f2, rowvar=False)
    ridged = False
    eps = 1e-6
    for s in (s1, s2):
        if np.linalg.eigvalsh((s + s.T) / 2.0).min() < eps:
            s += eps * np.eye(s.shape[0])
            ridged = True
    return frechet_gaussian(mu1, s1, mu2, s2), ridged


@dataclass
class EvalReport:
    scenario: str
    fid_proxy: float | None
    attr_accuracy: dict[str, float]
    caption_accuracy: dict[str, float]
    n_samples: int
    config_hash: str
    extras: dict = field(default_factory=dict)

    def serialize(self) -> str:
        """key=value header then a tab-separated accuracy table."""
        lines = [f"# {FID_PROXY_NOTE}"]
        lines.append(f"scenario={self.scenario}")
        if self.fid_proxy is not None:
            lines.append(f"fid_proxy={self.fid_proxy:.6f}")
        lines.append(f"n_samples={self.n_samples}")
        lines.append(f"config_hash={self.config_hash}")
        for k in sorted(self.extras):
            lines.append(f"{k}={self.extras[k]}")
        lines.append("")
        lines.append("attribute\taccuracy")
        for k in ATTRIBUTES:
            if k in self.attr_accuracy:
                lines.append(f"{k}\t{self.attr_accuracy[k]:.4f}")
        for k in sorted(self.caption_accuracy):
            lines.append(f"caption_{k}\t{self.caption_accuracy[k]:.4f}")
        return "\n".join(lines) + "\n"


def config_hash(*objs) -> str:
    payload = json.dumps(objs, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def held_out_specs(n: int, seed: int) -> list[SceneSpec]:
    """n specs drawn i.i.d. from the closed enumeration, eval-seed keyed."""
    from .synth_data import spec_from_rng
    return [spec_from_rng(np.random.default_rng((seed, 10_000_000 + i))) for i in range(n)]


def _batched_infill(model, obs_img, obs_txt, mask, sched, steps, guidance, seed,
                    batch: int = 64):
    outs_i, outs_t = [], []
    n = obs_img.shape[0] if obs_img is not None else obs_txt.shape[0]
    for s in range(0, n, batch):
        rng = torch.Generator().manual_seed(seed + s)
        bi = obs_img[s:s + batch] if obs_img is not None else None
        bt = obs_txt[s:s + batch] if obs_txt is not None else None
        oi, ot = joint_infill(model, bi, bt, mask, sched, steps, guidance, rng)
        outs_i.append(oi)
        outs_t.append(ot)
    cat = lambda xs: torch.cat(xs) if xs[0] is not None else None
    return cat(outs_i), cat(outs_t)


def conditional_consistency(model: PSUNet, sched: NoiseSchedule, vocab: Vocabulary,
                            table: EmbeddingTable, scenario: str, n: int, seed: int,
                            w: float = 3.0, steps: int = 50,
                            guidance_mode: str = "masked_cfg") -> EvalReport:
    """Oracle-scored consistency for one generative scenario.

    t2i: generated images are oracle-classified against the caption's spec.
    i2t: generated captions are grammar-parsed and slot-matched against the
    image's spec (unparseable counts as all slots wrong). text-infill masks
    the color slot and scores the generated color against the image.
    """
    cfg = model.cfg
    grid = cfg.image_hw // cfg.patch_size
    specs = held_out_specs(n, seed)
    guidance = GuidanceConfig(w=w, mode=guidance_mode)
    chash = config_hash(cfg.to_dict(), scenario, n, seed, w, steps, guidance_mode)

    attr_hits = {a: 0 for a in ATTRIBUTES}
    caption_hits = {a: 0 for a in ATTRIBUTES}
    extras = {}
    fid = None

    if scenario == "t2i":
        txt = torch.stack([encode(vocab, table, caption_grammar(s), cfg.text_len) for s in specs])
        mask = scenario_mask("t2i", grid, cfg.text_len)
        obs_img = torch.zeros(n, cfg.image_channels, cfg.image_hw, cfg.image_hw)
        gen_img, _ = _batched_infill(model, obs_img, txt, mask, sched, steps, guidance, seed)
        for s, img in zip(specs, gen_img):
            got = oracle_classify(img).spec
            for a in ATTRIBUTES:
                attr_hits[a] += int(getattr(got, a) == getattr(s, a))
        real = torch.stack([render(s) for s in specs])
        fid, ridged = frechet_proxy(real, gen_img, FeatureExtractor(seed=0))
        extras["fid_ridged"] = ridged
    elif scenario == "i2t":
        imgs = torch.stack([render(s) for s in specs])
        mask = scenario_mask("i2t", grid, cfg.text_len)
        obs_txt = torch.zeros(n, cfg.text_len, cfg.embed_dim)
        _, gen_txt = _batched_infill(model, imgs, obs_txt, mask, sched, steps, guidance, seed)
        for s, emb in zip(specs, gen_txt):
            parsed = parse_caption(nn_decode(vocab, table, emb))
            for a in ATTRIBUTES:
                caption_hits[a] += int(parsed is not None and getattr(parsed, a) == getattr(s, a))
    elif scenario == "text-infill":
        # color slot (word index 2) masked; condition is the full image plus
        # the rest of the caption; scored against the image's oracle color
        imgs = torch.stack([render(s) for s in specs])
        txt = torch.stack([encode(vocab, table, caption_grammar(s), cfg.text_len) for s in specs])
        tmask = torch.zeros(cfg.text_len, dtype=torch.bool)
        tmask[2] = True
        mask = scenario_mask("text-infill", grid, cfg.text_len, text_mask=tmask)
        _, gen_txt = _batched_infill(model, imgs, txt, mask, sched, steps, guidance, seed)
        hits = 0
        preserved = 0
        for s, emb in zip(specs, gen_txt):
            words = nn_decode(vocab, table, emb).split()
            truth = caption_grammar(s).split()
            if len(words) == len(truth) and all(
                    a == b for i, (a, b) in enumerate(zip(words, truth)) if i != 2):
                preserved += 1
            hits += int(len(words) > 2 and words[2] == s.color)
        caption_hits = {a: 0 for a in ATTRIBUTES}
        caption_hits["color"] = hits
        extras["unmasked_words_preserved"] = preserved / n
    else:
        raise ValueError(f"unsupported consistency scenario {scenario!r}")

    return EvalReport(
        scenario=scenario, fid_proxy=fid,
        attr_accuracy={a: h / n for a, h in attr_hits.items()} if scenario == "t2i" else {},
        caption_accuracy={a: h / n for a, h in caption_hits.items()}
        if scenario != "t2i" else {},
        n_samples=n, config_hash=chash, extras=extras)


def convergence_track(runs: dict[str, list[tuple[int, str]]], sched: NoiseSchedule,
                      vocab: Vocabulary, table: EmbeddingTable, n: int, seed: int,
                      w: float = 3.0, steps: int = 50,
                      eval_seeds: dict[str, int] | None = None) -> list[dict]:
    """fid_proxy / accuracy vs training step for each labeled run.

    runs maps a label to [(step, checkpoint_path), ...]. All runs must share
    the eval seed; mismatched seeds are rejected.
    """
    from .trainer import load_training_checkpoint
    if eval_seeds is not None and len(set(eval_seeds.values())) > 1:
        raise ValueError("convergence comparisons must share eval seeds")
    rows = []
    for label, points in runs.items():
        for step, path in sorted(points):
            model, _, _, _, ck_table, _ = load_training_checkpoint(path)
            report = conditional_consistency(model, sched, vocab, ck_table or table,
                                             "t2i", n, seed, w=w, steps=steps)
            mean_acc = sum(report.attr_accuracy.values()) / len(report.attr_accuracy)
            rows.append({"label": label, "step": step,
                         "fid_proxy": report.fid_proxy, "mean_attr_accuracy": mean_acc,
                         **{f"acc_{a}": v for a, v in report.attr_accuracy.items()}})
    return rows


def cfg_scale_sweep(model: PSUNet, sched: NoiseSchedule, vocab: Vocabulary,
                    table: EmbeddingTable, w_list: list[float], scenario: str,
                    n: int, seed: int, steps: int = 50,
                    guidance_mode: str = "masked_cfg") -> list[dict]:
    """One row per guidance scale: fid_proxy and mean attribute accuracy."""
    rows = []
    for w in w_list:
        report = conditional_consistency(model, sched, vocab, table, scenario,
                                         n, seed, w=w, steps=steps,
                                         guidance_mode=guidance_mode)
        acc = report.attr_accuracy or report.caption_accuracy
        mean_acc = sum(acc.values()) / len(acc) if acc else float("nan")
        rows.append({"w": w, "fid_proxy": report.fid_proxy,
                     "mean_attr_accuracy": mean_acc})
    return rows


def write_table(rows: list[dict], path) -> None:
    """Tab-separated table with a stable header order."""
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(str(r.get(c, "")) for c in cols) + "\n")
