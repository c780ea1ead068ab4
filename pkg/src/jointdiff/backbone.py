"""Partially shared U-Net noise predictor and the all-shared baseline.

Token pipeline: image patches and text embeddings pass modality-specific
transformer stacks of unequal depth, meet in a shared middle stack with
long skip connections, split back through modality-specific up stacks
(with their own skips), and exit through per-modality noise heads.

Time conditioning is a single prepended time-embedding token; every block
stack sees it at sequence position 0. Skip fusion is concatenate followed
by a linear projection, for all three skip families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import Enum

import torch
import torch.nn as nn


class ActivationMode(str, Enum):
    JOINT = "joint"
    IMAGE_ONLY = "image_only"
    TEXT_ONLY = "text_only"


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 128
    n_shared: int = 5
    n_image_down: int = 2
    n_image_up: int = 2
    n_text_down: int = 1
    n_text_up: int = 1
    patch_size: int = 4
    image_channels: int = 3
    image_hw: int = 32
    n_heads: int = 4
    text_len: int = 12
    vocab_size: int = 32
    use_pos_emb: bool = True

    def __post_init__(self):
        if self.n_image_down != self.n_image_up:
            raise ValueError("image down/up depths must match (symmetric U)")
        if self.n_text_down != self.n_text_up:
            raise ValueError("text down/up depths must match (symmetric U)")
        if self.n_image_down < self.n_text_down:
            raise ValueError("image branch must be at least as deep as text branch")
        if self.image_hw % self.patch_size != 0:
            raise ValueError("image_hw must be divisible by patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def n_patches(self) -> int:
        return (self.image_hw // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


# Full-scale settings from the published recipe, kept for reference runs.
PAPER_PS_UNET = BackboneConfig(
    embed_dim=768, n_shared=9, n_image_down=4, n_image_up=4,
    n_text_down=2, n_text_up=2, patch_size=2, image_channels=4,
    image_hw=32, n_heads=12, text_len=32,
)

DESK_PS_UNET = BackboneConfig()

DESK_UVIT_MULTI = BackboneConfig(
    n_shared=11, n_image_down=0, n_image_up=0, n_text_down=0, n_text_up=0,
)


class Block(nn.Module):
    """Pre-LN transformer block: self-attention then a 4x MLP."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class PSUNet(nn.Module):
    """Noise predictor over (image patch tokens, text embedding tokens, t).

    With zero modality-specific depth this degenerates to the all-shared
    baseline (tokens concatenate right after the input embedders and only
    the long shared skips remain).
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        patch_dim = cfg.patch_size ** 2 * cfg.image_channels

        self.time_mlp = nn.Sequential(
            nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d),
        )

        self.image_patch_embed = nn.Linear(patch_dim, d)
        self.image_type_emb = nn.Parameter(torch.zeros(d))
        self.text_in_proj = nn.Linear(d, d)
        self.text_type_emb = nn.Parameter(torch.zeros(d))
        if cfg.use_pos_emb:
            self.image_pos_emb = nn.Parameter(torch.zeros(cfg.n_patches, d))
            self.text_pos_emb = nn.Parameter(torch.zeros(cfg.text_len, d))
        else:
            self.image_pos_emb = None
            self.text_pos_emb = None

        self.image_down = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_image_down))
        self.text_down = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_text_down))
        self.shared = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_shared))
        self.image_up = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_image_up))
        self.text_up = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_text_up))

        # Long skips inside the shared stack: block i feeds block n-1-i.
        self.shared_skip_proj = nn.ModuleList(
            nn.Linear(2 * d, d) for _ in range(cfg.n_shared // 2)
        )
        self.image_skip_proj = nn.ModuleList(
            nn.Linear(2 * d, d) for _ in range(cfg.n_image_up)
        )
        self.text_skip_proj = nn.ModuleList(
            nn.Linear(2 * d, d) for _ in range(cfg.n_text_up)
        )

        self.image_head_norm = nn.LayerNorm(d)
        self.image_head = nn.Linear(d, patch_dim)
        self.text_head_norm = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, d)

    # -- token geometry -------------------------------------------------

    def patchify(self, img: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, P, p*p*C) in row-major patch order."""
        p = self.cfg.patch_size
        B, C, H, W = img.shape
        g = H // p
        x = img.view(B, C, g, p, g, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(B, g * g, p * p * C)

    def unpatchify(self, tok: torch.Tensor) -> torch.Tensor:
        """(B, P, p*p*C) -> (B, C, H, W)."""
        p = self.cfg.patch_size
        C = self.cfg.image_channels
        B, P, _ = tok.shape
        g = int(round(math.sqrt(P)))
        x = tok.view(B, g, g, p, p, C).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(B, C, g * p, g * p)

    # -- forward ---------------------------------------------------------

    def forward(self, image: torch.Tensor | None, text: torch.Tensor | None, t,
                mode: ActivationMode = ActivationMode.JOINT):
        """Predict per-modality noise. Returns (eps_image, eps_text); the
        inactive modality's slot is None. Accepts a python int or a (B,)
        tensor for t; unbatched inputs are auto-batched.
        """
        mode = ActivationMode(mode)
        cfg = self.cfg
        squeeze = False
        if image is not None and image.dim() == 3:
            image = image.unsqueeze(0)
            squeeze = True
        if text is not None and text.dim() == 2:
            text = text.unsqueeze(0)
            squeeze = True

        if mode is ActivationMode.JOINT and (image is None or text is None):
            raise ValueError("joint mode requires both modalities")
        if mode is ActivationMode.IMAGE_ONLY and image is None:
            raise ValueError("image_only mode requires the image modality")
        if mode is ActivationMode.TEXT_ONLY and text is None:
            raise ValueError("text_only mode requires the text modality")

        B = image.shape[0] if image is not None else text.shape[0]
        dtype = image.dtype if image is not None else text.dtype
        device = image.device if image is not None else text.device
        if isinstance(t, int):
            t = torch.full((B,), t, dtype=torch.int64, device=device)
        t_tok = self.time_mlp(timestep_embedding(t.to(dtype), cfg.embed_dim))[:, None, :]

        img_tok = txt_tok = None
        img_skips, txt_skips = [], []

        if mode is not ActivationMode.TEXT_ONLY:
            if image.shape[1:] != (cfg.image_channels, cfg.image_hw, cfg.image_hw):
                raise ValueError(f"image shape {tuple(image.shape)} does not match config")
            img_tok = self.image_patch_embed(self.patchify(image))
            if self.image_pos_emb is not None:
                img_tok = img_tok + self.image_pos_emb
            img_tok = img_tok + self.image_type_emb
            for blk in self.image_down:
                img_tok = self._run_with_time(blk, img_tok, t_tok)
                img_skips.append(img_tok)

        if mode is not ActivationMode.IMAGE_ONLY:
            if text.shape[1:] != (cfg.text_len, cfg.embed_dim):
                raise ValueError(f"text shape {tuple(text.shape)} does not match config")
            txt_tok = self.text_in_proj(text)
            if self.text_pos_emb is not None:
                txt_tok = txt_tok + self.text_pos_emb
            txt_tok = txt_tok + self.text_type_emb
            for blk in self.text_down:
                txt_tok = self._run_with_time(blk, txt_tok, t_tok)
                txt_skips.append(txt_tok)

        parts = [t_tok]
        if img_tok is not None:
            parts.append(img_tok)
        if txt_tok is not None:
            parts.append(txt_tok)
        x = torch.cat(parts, dim=1)

        n = cfg.n_shared
        shared_skips = []
        for i, blk in enumerate(self.shared):
            j = n - 1 - i
            if j < i:  # second half: fuse the mirrored first-half output
                skip = shared_skips[j]
                x = self.shared_skip_proj[j](torch.cat([x, skip], dim=-1))
            x = blk(x)
            if i < n // 2:
                shared_skips.append(x)

        ofs = 1
        eps_image = eps_text = None
        if img_tok is not None:
            h = x[:, ofs:ofs + cfg.n_patches]
            ofs += cfg.n_patches
            for k, blk in enumerate(self.image_up):
                skip = img_skips[len(img_skips) - 1 - k]
                h = self.image_skip_proj[k](torch.cat([h, skip], dim=-1))
                h = self._run_with_time(blk, h, t_tok)
            eps_image = self.unpatchify(self.image_head(self.image_head_norm(h)))
        if txt_tok is not None:
            h = x[:, ofs:ofs + cfg.text_len]
            for k, blk in enumerate(self.text_up):
                skip = txt_skips[len(txt_skips) - 1 - k]
                h = self.text_skip_proj[k](torch.cat([h, skip], dim=-1))
                h = self._run_with_time(blk, h, t_tok)
            eps_text = self.text_head(self.text_head_norm(h))

        if squeeze:
            eps_image = eps_image.squeeze(0) if eps_image is not None else None
            eps_text = eps_text.squeeze(0) if eps_text is not None else None
        return eps_image, eps_text

    @staticmethod
    def _run_with_time(blk: Block, tokens: torch.Tensor, t_tok: torch.Tensor) -> torch.Tensor:
        x = torch.cat([t_tok, tokens], dim=1)
        return blk(x)[:, 1:]

    # -- parameter accounting ---------------------------------------------

    def param_families(self) -> dict[str, list[str]]:
        """Parameter names grouped into shared / image / text families."""
        image_prefixes = ("image_patch_embed", "image_type_emb", "image_pos_emb",
                          "image_down", "image_up", "image_skip_proj",
                          "image_head", "image_head_norm")
        text_prefixes = ("text_in_proj", "text_type_emb", "text_pos_emb",
                         "text_down", "text_up", "text_skip_proj",
                         "text_head", "text_head_norm")
        fams: dict[str, list[str]] = {"shared": [], "image": [], "text": []}
        for name, _ in self.named_parameters():
            top = name.split(".")[0]
            if top in image_prefixes:
                fams["image"].append(name)
            elif top in text_prefixes:
                fams["text"].append(name)
            else:
                fams["shared"].append(name)
        return fams


def build_ps_unet(cfg: BackboneConfig, seed: int) -> PSUNet:
    """Deterministically initialized PS-U-Net."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = PSUNet(cfg)
        # pos/type embeddings start as small noise so they break symmetry
        with torch.no_grad():
            for p in (model.image_pos_emb, model.text_pos_emb):
                if p is not None:
                    p.normal_(0.0, 0.02)
            model.image_type_emb.normal_(0.0, 0.02)
            model.text_type_emb.normal_(0.0, 0.02)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def build_uvit_multi(cfg: BackboneConfig, seed: int) -> PSUNet:
    """All-shared baseline: zero modality-specific depth, long skips only."""
    if cfg.n_image_down or cfg.n_image_up or cfg.n_text_down or cfg.n_text_up:
        raise ValueError("baseline requires zero modality-specific depths")
    return build_ps_unet(cfg, seed)


def param_count(model: PSUNet, mode: ActivationMode = ActivationMode.JOINT) -> int:
    """Exact trainable-parameter count for the given activation mode."""
    mode = ActivationMode(mode)
    fams = model.param_families()
    params = dict(model.named_parameters())
    active = set(fams["shared"])
    if mode in (ActivationMode.JOINT, ActivationMode.IMAGE_ONLY):
        active |= set(fams["image"])
    if mode in (ActivationMode.JOINT, ActivationMode.TEXT_ONLY):
        active |= set(fams["text"])
    return sum(params[n].numel() for n in active)
