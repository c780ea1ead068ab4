"""Joint-diffusion training loop.

Training touches only the joint objective: every batch carries both full
modalities, corrupted at one shared timestep per example. There is no mask
dropout and no per-modality marginal anywhere in the loop.

Randomness is counter-based: everything a step needs (batch indices, the
per-example t, both noise draws) is derived from (seed, step) alone, so
batch composition is reproducible under any execution schedule and resume
is bit-exact from (checkpoint, seed, step) without extra state.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict

import torch

from . import checkpoint as ckpt
from .backbone import BackboneConfig, PSUNet, build_ps_unet
from .schedule import NoiseSchedule, joint_noise_loss
from .text_codec import EmbeddingTable, Vocabulary, encode


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16          # micro-batch; logical batch = batch_size * grad_accum_steps
    grad_accum_steps: int = 1
    total_steps: int = 30_000
    lr: float = 2e-4
    weight_decay: float = 0.03
    adam_betas: tuple[float, float] = (0.9, 0.9)
    warmup_steps: int = 500
    seed: int = 0
    eval_every: int = 1000
    checkpoint_every: int = 1000

    def __post_init__(self):
        for name in ("batch_size", "grad_accum_steps", "total_steps",
                     "warmup_steps", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# Full-scale recipe from the published setup, for the record.
PAPER_TRAIN = TrainConfig(batch_size=64, grad_accum_steps=4, total_steps=4_000_000,
                          lr=2e-4, weight_decay=0.03, adam_betas=(0.9, 0.9),
                          warmup_steps=5000)


def prepare_tensors(dataset, vocab: Vocabulary, table: EmbeddingTable,
                    text_len: int, dtype: torch.dtype = torch.float32):
    """Stack dataset images and encoded captions into training tensors."""
    if not dataset:
        raise ValueError("dataset is empty")
    images = torch.stack([s.image for s in dataset]).to(dtype)
    texts = torch.stack([encode(vocab, table, s.caption, text_len) for s in dataset]).to(dtype)
    return images, texts


def step_generator(seed: int, step: int) -> torch.Generator:
    """Fresh generator determined by (seed, step) only."""
    mix = (seed * 0x9E3779B97F4A7C15 + step * 0xBF58476D1CE4E5B9) % (2 ** 63)
    return torch.Generator().manual_seed(mix)


def compose_batch(images: torch.Tensor, texts: torch.Tensor, sched: NoiseSchedule,
                  batch_size: int, seed: int, step: int):
    """Pure function of (data, seed, step): indices, shared t, both noises.

    Both full modalities are always present; t is drawn once per example
    and shared by the two modalities.
    """
    gen = step_generator(seed, step)
    n = images.shape[0]
    idx = torch.randint(0, n, (batch_size,), generator=gen)
    x0_img = images[idx]
    x0_txt = texts[idx]
    t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
    eps_img = torch.randn(x0_img.shape, generator=gen, dtype=x0_img.dtype)
    eps_txt = torch.randn(x0_txt.shape, generator=gen, dtype=x0_txt.dtype)
    return x0_img, x0_txt, t, eps_img, eps_txt


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to cfg.lr over warmup_steps, constant afterwards."""
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def make_optimizer(model: PSUNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas,
                             weight_decay=cfg.weight_decay, eps=1e-8)


class MetricsLog:
    """Line-oriented TSV training log: step, loss, lr, wall-time."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []
        if path is not None:
            self._f = open(path, "a", encoding="utf-8")
            if self._f.tell() == 0:
                self._f.write("step\tloss\tlr\twalltime\n")
        else:
            self._f = None

    def record(self, step: int, loss: float, lr: float) -> None:
        row = {"step": step, "loss": loss, "lr": lr, "walltime": time.time()}
        self.rows.append(row)
        if self._f is not None:
            self._f.write(f"{step}\t{loss:.6f}\t{lr:.6e}\t{row['walltime']:.3f}\n")
            self._f.flush()

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


def _collect_tensors(model: PSUNet, optimizer: torch.optim.AdamW,
                     table: EmbeddingTable | None) -> dict[str, torch.Tensor]:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    params = dict(model.named_parameters())
    name_of = {id(p): n for n, p in params.items()}
    for p, state in optimizer.state.items():
        n = name_of[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            tensors[f"opt.{key}.{n}"] = state[key]
        tensors[f"opt.step.{n}"] = torch.tensor([int(state["step"])], dtype=torch.int64)
    if table is not None:
        tensors["codec.base"] = table.base
        tensors["codec.up_proj.weight"] = table.up_proj.weight
        tensors["codec.down_proj.weight"] = table.down_proj.weight
    return tensors


def _restore_optimizer(model: PSUNet, optimizer: torch.optim.AdamW,
                       tensors: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    for n, p in params.items():
        key = f"opt.exp_avg.{n}"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"opt.step.{n}"].item())),
            "exp_avg": tensors[f"opt.exp_avg.{n}"].to(p.dtype),
            "exp_avg_sq": tensors[f"opt.exp_avg_sq.{n}"].to(p.dtype),
        }


def save_training_checkpoint(path, model: PSUNet, optimizer, step: int,
                             cfg: TrainConfig, table: EmbeddingTable | None = None,
                             meta: dict | None = None) -> None:
    m = {"train_config": cfg.to_dict()}
    if table is not None:
        m["vocab"] = {"tokens": list(table.vocab.tokens), "word_dim": table.vocab.word_dim}
        m["embed_dim"] = table.embed_dim
    if meta:
        m.update(meta)
    ckpt.write_checkpoint(path, model.cfg.to_dict(), step,
                          _collect_tensors(model, optimizer, table), m)


def load_training_checkpoint(path):
    """Returns (model, optimizer_tensors, step, train_cfg, table_or_None, meta)."""
    data = ckpt.read_checkpoint(path)
    cfg = BackboneConfig.from_dict(data.backbone_config)
    model = PSUNet(cfg)
    stored = next(t for n, t in data.tensors.items() if n.startswith("model."))
    if stored.dtype == torch.float64:
        model = model.double()
    ckpt.load_model_params(model, data.tensors)
    train_cfg = TrainConfig.from_dict(data.meta["train_config"]) if "train_config" in data.meta else None
    table = None
    if "vocab" in data.meta:
        vocab = Vocabulary(tokens=tuple(data.meta["vocab"]["tokens"]),
                           word_dim=data.meta["vocab"]["word_dim"])
        table = EmbeddingTable(vocab, data.tensors["codec.base"],
                               data.meta.get("embed_dim", cfg.embed_dim))
        with torch.no_grad():
            table.up_proj.weight.copy_(data.tensors["codec.up_proj.weight"])
            table.down_proj.weight.copy_(data.tensors["codec.down_proj.weight"])
    return model, data.tensors, data.step, train_cfg, table, data.meta


def train(model: PSUNet, images: torch.Tensor, texts: torch.Tensor,
          sched: NoiseSchedule, cfg: TrainConfig, *, start_step: int = 0,
          optimizer: torch.optim.AdamW | None = None, log: MetricsLog | None = None,
          checkpoint_path=None, table: EmbeddingTable | None = None,
          progress_every: int = 0) -> torch.optim.AdamW:
    """Run logical steps start_step+1 .. total_steps. Returns the optimizer.

    One logical step = grad_accum_steps micro-batches of batch_size, one
    AdamW update under linear warmup then constant lr.
    """
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    log = log or MetricsLog()

    n_micro = cfg.grad_accum_steps
    for step in range(start_step + 1, cfg.total_steps + 1):
        lr = lr_at(cfg, step)
        for group in optimizer.param_groups:
            group["lr"] = lr

        x0_img, x0_txt, t, eps_img, eps_txt = compose_batch(
            images, texts, sched, cfg.batch_size * n_micro, cfg.seed, step)

        optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for m in range(n_micro):
            sl = slice(m * cfg.batch_size, (m + 1) * cfg.batch_size)
            loss = joint_noise_loss(model, x0_img[sl], x0_txt[sl], t[sl],
                                    eps_img[sl], eps_txt[sl], sched)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at step {step}, micro-batch {m}, t={t[sl].tolist()}")
            (loss / n_micro).backward()
            total += float(loss.detach()) / n_micro
        optimizer.step()
        log.record(step, total, lr)

        if progress_every and step % progress_every == 0:
            print(f"step {step}/{cfg.total_steps} loss {total:.4f} lr {lr:.2e}", flush=True)
        if checkpoint_path is not None and (step % cfg.checkpoint_every == 0
                                            or step == cfg.total_steps):
            save_training_checkpoint(checkpoint_path, model, optimizer, step, cfg, table)
    return optimizer


def resume(checkpoint_path, images: torch.Tensor, texts: torch.Tensor,
           sched: NoiseSchedule, cfg: TrainConfig | None = None, *,
           log: MetricsLog | None = None, out_path=None, dtype=None):
    """Continue training from a checkpoint, bit-reproducibly.

    Validates the stored geometry against the dataset; a vocabulary or
    text-width mismatch is rejected with a shape diagnostic.
    """
    model, tensors, step, saved_cfg, table, _ = load_training_checkpoint(checkpoint_path)
    cfg = cfg or saved_cfg
    if cfg is None:
        raise ValueError("no train config stored in checkpoint and none supplied")
    if texts.shape[1:] != (model.cfg.text_len, model.cfg.embed_dim):
        raise ValueError(f"text tensor shape {tuple(texts.shape[1:])} does not match "
                         f"model ({model.cfg.text_len}, {model.cfg.embed_dim})")
    if images.shape[1:] != (model.cfg.image_channels, model.cfg.image_hw, model.cfg.image_hw):
        raise ValueError(f"image tensor shape {tuple(images.shape[1:])} does not match model")
    if dtype is not None:
        model = model.to(dtype)
    optimizer = make_optimizer(model, cfg)
    _restore_optimizer(model, optimizer, tensors)
    train(model, images, texts, sched, cfg, start_step=step, optimizer=optimizer,
          log=log, checkpoint_path=out_path or checkpoint_path, table=table)
    return model, optimizer
