"""Infilling-based conditional sampling and masked classifier-free guidance.

All conditional generation runs through one loop: every position starts as
pure noise at level T; per step the masked (to-generate) positions advance
by a reverse step under guided noise prediction while unmasked (observed)
positions are overwritten with the observed data re-noised to the new
level. At t=0 the unmasked positions are the observed data, bitwise.

Guidance needs exactly two model forwards per step regardless of how the
condition mixes modalities: one with the observed positions re-noised to
level t, one with them replaced by fresh standard Gaussian noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import torch

from .backbone import ActivationMode, PSUNet
from .schedule import NoiseSchedule, q_sample, ddpm_reverse_step, ddim_reverse_step, ddim_stride

SCENARIOS = ("uncond", "t2i", "i2t", "img-infill", "text-infill", "joint-infill")


@dataclass(frozen=True)
class MaskSpec:
    """Per-modality generation masks; True marks positions to generate.

    image_mask is patch-granular, shape (g, g) with g = image_hw / patch.
    text_mask is token-granular, shape (text_len,). A None mask marks the
    modality as entirely absent (single-modality sampling).
    """

    image_mask: torch.Tensor | None
    text_mask: torch.Tensor | None

    def __post_init__(self):
        if self.image_mask is None and self.text_mask is None:
            raise ValueError("at least one modality must be present")
        for m in (self.image_mask, self.text_mask):
            if m is not None and m.dtype != torch.bool:
                raise ValueError("masks must be boolean tensors")

    @property
    def all_false(self) -> bool:
        parts = [m for m in (self.image_mask, self.text_mask) if m is not None]
        return all(not bool(m.any()) for m in parts)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 0.0
    mode: str = "masked_cfg"  # masked_cfg | none | unidiffuser_free
    # eq9 amplifies the conditional forward; c2 reproduces the appendix
    # pseudocode reading, which attaches (1+w) to the noise-substituted one.
    convention: str = "eq9"

    def __post_init__(self):
        if not torch.isfinite(torch.tensor(self.w)):
            raise ValueError("guidance scale must be finite")
        if self.mode not in ("masked_cfg", "none", "unidiffuser_free"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.convention not in ("eq9", "c2"):
            raise ValueError(f"unknown guidance convention {self.convention!r}")


def activation_mode_for(mask: MaskSpec) -> ActivationMode:
    if mask.image_mask is None:
        return ActivationMode.TEXT_ONLY
    if mask.text_mask is None:
        return ActivationMode.IMAGE_ONLY
    return ActivationMode.JOINT


def expand_image_mask(mask: torch.Tensor, patch_size: int, channels: int) -> torch.Tensor:
    """(g, g) patch mask -> (C, H, W) pixel mask."""
    px = mask.repeat_interleave(patch_size, 0).repeat_interleave(patch_size, 1)
    return px.unsqueeze(0).expand(channels, -1, -1)


def _randn_like(x: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)


def _fork_rng(rng: torch.Generator) -> torch.Generator:
    """Independent substream; costs one draw from the parent.

    The unconditional forward's substitution noise comes from a fork so that
    the main stream sees the same draws whether guidance is on or off; at
    w = 0 masked-CFG sampling is then bitwise identical to no guidance.
    """
    seed = int(torch.randint(0, 2 ** 62, (1,), generator=rng).item())
    return torch.Generator().manual_seed(seed)


def _check_geometry(model: PSUNet, mask: MaskSpec) -> None:
    cfg = model.cfg
    g = cfg.image_hw // cfg.patch_size
    if mask.image_mask is not None and mask.image_mask.shape != (g, g):
        raise ValueError(f"image mask shape {tuple(mask.image_mask.shape)} != ({g}, {g})")
    if mask.text_mask is not None and mask.text_mask.shape != (cfg.text_len,):
        raise ValueError(f"text mask shape {tuple(mask.text_mask.shape)} != ({cfg.text_len},)")


def masked_cfg_predict(model: PSUNet, state_image: torch.Tensor | None,
                       state_text: torch.Tensor | None,
                       observed_image: torch.Tensor | None,
                       observed_text: torch.Tensor | None,
                       mask: MaskSpec, t: int, w: float, sched: NoiseSchedule,
                       rng: torch.Generator, convention: str = "eq9",
                       uncond_rng: torch.Generator | None = None):
    """Guided noise prediction from two model forwards.

    The conditional forward re-noises the observed positions to level t via
    the forward process; the unconditional forward replaces them with fresh
    standard Gaussian noise. Masked positions come from the current state in
    both. Returns (eps_image, eps_text) for present modalities.
    """
    if not torch.isfinite(torch.tensor(float(w))):
        raise ValueError("guidance scale must be finite")
    _check_geometry(model, mask)
    mode = activation_mode_for(mask)
    cfg = model.cfg
    if uncond_rng is None:
        uncond_rng = rng

    def build_inputs(noise_substitute: bool):
        img = txt = None
        if mask.image_mask is not None:
            if bool(mask.image_mask.all()):
                img = state_image
            else:
                m = expand_image_mask(mask.image_mask, cfg.patch_size, cfg.image_channels)
                m = m.to(state_image.dtype)
                if noise_substitute:
                    obs_t = _randn_like(state_image, uncond_rng)
                else:
                    obs_t = q_sample(observed_image, t, _randn_like(state_image, rng), sched)
                img = m * state_image + (1.0 - m) * obs_t
        if mask.text_mask is not None:
            if bool(mask.text_mask.all()):
                txt = state_text
            else:
                m = mask.text_mask.to(state_text.dtype).unsqueeze(-1)
                if noise_substitute:
                    obs_t = _randn_like(state_text, uncond_rng)
                else:
                    obs_t = q_sample(observed_text, t, _randn_like(state_text, rng), sched)
                txt = m * state_text + (1.0 - m) * obs_t
        return img, txt

    cond_img, cond_txt = build_inputs(noise_substitute=False)
    uncond_img, uncond_txt = build_inputs(noise_substitute=True)
    with torch.no_grad():
        eps_c_img, eps_c_txt = model(cond_img, cond_txt, t, mode)
        eps_u_img, eps_u_txt = model(uncond_img, uncond_txt, t, mode)

    def combine(c, u):
        if c is None:
            return None
        if convention == "c2":
            return (1.0 + w) * u - w * c
        return (1.0 + w) * c - w * u

    return combine(eps_c_img, eps_u_img), combine(eps_c_txt, eps_u_txt)


def joint_infill(model: PSUNet, observed_image: torch.Tensor | None,
                 observed_text: torch.Tensor | None, mask: MaskSpec,
                 sched: NoiseSchedule, steps: int, guidance: GuidanceConfig,
                 rng: torch.Generator):
    """Complete the masked positions; returns (image, text) at t=0.

    Observed tensors supply values at all unmasked positions and may be
    batched; masks are shared across the batch. steps == T runs ancestral
    stepping, steps < T a deterministic strided schedule.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_geometry(model, mask)
    if mask.all_false:
        warnings.warn("all-false mask: nothing to generate, returning observed")
        return observed_image, observed_text
    mode = activation_mode_for(mask)
    cfg = model.cfg
    uncond_rng = _fork_rng(rng)

    squeeze = False
    if observed_image is not None and observed_image.dim() == 3:
        observed_image = observed_image.unsqueeze(0)
        squeeze = True
    if observed_text is not None and observed_text.dim() == 2:
        observed_text = observed_text.unsqueeze(0)
        squeeze = True

    img_m = txt_m = None
    x_img = x_txt = None
    if mask.image_mask is not None:
        if observed_image is None:
            raise ValueError("image modality present but no observed image supplied")
        img_m = expand_image_mask(mask.image_mask, cfg.patch_size, cfg.image_channels)
        img_m = img_m.to(observed_image.dtype)
        x_img = _randn_like(observed_image, rng)
    if mask.text_mask is not None:
        if observed_text is None:
            raise ValueError("text modality present but no observed text supplied")
        txt_m = mask.text_mask.to(observed_text.dtype).unsqueeze(-1)
        x_txt = _randn_like(observed_text, rng)

    ancestral = steps >= sched.T
    ts = list(range(sched.T, 0, -1)) if ancestral else ddim_stride(sched.T, steps)

    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0

        if guidance.mode == "masked_cfg":
            eps_img, eps_txt = masked_cfg_predict(
                model, x_img, x_txt, observed_image, observed_text,
                mask, t, guidance.w, sched, rng, guidance.convention,
                uncond_rng=uncond_rng)
        else:
            cond_img = cond_txt = None
            if img_m is not None:
                if bool(mask.image_mask.all()):
                    cond_img = x_img
                else:
                    obs_t = q_sample(observed_image, t, _randn_like(x_img, rng), sched)
                    cond_img = img_m * x_img + (1.0 - img_m) * obs_t
            if txt_m is not None:
                if bool(mask.text_mask.all()):
                    cond_txt = x_txt
                else:
                    obs_t = q_sample(observed_text, t, _randn_like(x_txt, rng), sched)
                    cond_txt = txt_m * x_txt + (1.0 - txt_m) * obs_t
            with torch.no_grad():
                eps_img, eps_txt = model(cond_img, cond_txt, t, mode)

        def advance(x, eps):
            if ancestral:
                z = _randn_like(x, rng) if t > 1 else None
                return ddpm_reverse_step(x, eps, t, sched, z)
            return ddim_reverse_step(x, eps, t, t_prev, sched)

        if img_m is not None:
            gen = advance(x_img, eps_img)
            if bool(mask.image_mask.all()):
                x_img = gen
            else:
                if t_prev == 0:
                    obs_prev = observed_image
                else:
                    obs_prev = q_sample(observed_image, t_prev, _randn_like(x_img, rng), sched)
                x_img = img_m * gen + (1.0 - img_m) * obs_prev
        if txt_m is not None:
            gen = advance(x_txt, eps_txt)
            if bool(mask.text_mask.all()):
                x_txt = gen
            else:
                if t_prev == 0:
                    obs_prev = observed_text
                else:
                    obs_prev = q_sample(observed_text, t_prev, _randn_like(x_txt, rng), sched)
                x_txt = txt_m * gen + (1.0 - txt_m) * obs_prev

    # unmasked positions exactly equal to observed, bitwise
    if img_m is not None:
        x_img = torch.where(img_m.bool(), x_img, observed_image)
    if txt_m is not None:
        x_txt = torch.where(txt_m.bool().expand_as(x_txt), x_txt, observed_text)

    if squeeze:
        x_img = x_img.squeeze(0) if x_img is not None else None
        x_txt = x_txt.squeeze(0) if x_txt is not None else None
    return x_img, x_txt


def unconditional_sample(model: PSUNet, sched: NoiseSchedule, steps: int,
                         rng: torch.Generator, variant: str = "plain",
                         w: float = 0.0, batch: int = 1,
                         dtype: torch.dtype = torch.float32):
    """Joint sampling from pure noise; returns (image, text).

    plain: one forward per step. unidiffuser_free: each modality's
    prediction is guided against a forward in which the other modality is
    replaced by fresh noise (1 + 2 forwards per step).
    """
    if variant not in ("plain", "unidiffuser_free"):
        raise ValueError(f"unknown variant {variant!r}")
    cfg = model.cfg
    uncond_rng = _fork_rng(rng)
    x_img = torch.randn((batch, cfg.image_channels, cfg.image_hw, cfg.image_hw),
                        generator=rng, dtype=dtype)
    x_txt = torch.randn((batch, cfg.text_len, cfg.embed_dim), generator=rng, dtype=dtype)

    ancestral = steps >= sched.T
    ts = list(range(sched.T, 0, -1)) if ancestral else ddim_stride(sched.T, steps)

    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        with torch.no_grad():
            eps_img, eps_txt = model(x_img, x_txt, t, ActivationMode.JOINT)
            if variant == "unidiffuser_free" and w != 0.0:
                eps_img_u, _ = model(x_img, _randn_like(x_txt, uncond_rng), t, ActivationMode.JOINT)
                _, eps_txt_u = model(_randn_like(x_img, uncond_rng), x_txt, t, ActivationMode.JOINT)
                eps_img = (1.0 + w) * eps_img - w * eps_img_u
                eps_txt = (1.0 + w) * eps_txt - w * eps_txt_u
            elif variant == "unidiffuser_free":
                # keep the forward-call count contract even at w = 0
                model(x_img, _randn_like(x_txt, uncond_rng), t, ActivationMode.JOINT)
                model(_randn_like(x_img, uncond_rng), x_txt, t, ActivationMode.JOINT)

        if ancestral:
            z_img = _randn_like(x_img, rng) if t > 1 else None
            x_img = ddpm_reverse_step(x_img, eps_img, t, sched, z_img)
            z_txt = _randn_like(x_txt, rng) if t > 1 else None
            x_txt = ddpm_reverse_step(x_txt, eps_txt, t, sched, z_txt)
        else:
            x_img = ddim_reverse_step(x_img, eps_img, t, t_prev, sched)
            x_txt = ddim_reverse_step(x_txt, eps_txt, t, t_prev, sched)

    if batch == 1:
        return x_img.squeeze(0), x_txt.squeeze(0)
    return x_img, x_txt


# -- scenario presets ---------------------------------------------------------

def scenario_mask(scenario: str, grid: int, text_len: int,
                  image_mask: torch.Tensor | None = None,
                  text_mask: torch.Tensor | None = None) -> MaskSpec:
    """Masks for the six named generative scenarios.

    For the infilling scenarios a partial mask may be supplied; the default
    image mask is the center square of half the image's width and height,
    the default text mask covers the middle third of the token positions.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    ones_img = torch.ones(grid, grid, dtype=torch.bool)
    zeros_img = torch.zeros(grid, grid, dtype=torch.bool)
    ones_txt = torch.ones(text_len, dtype=torch.bool)
    zeros_txt = torch.zeros(text_len, dtype=torch.bool)

    if image_mask is None:
        image_mask = center_half_mask(grid)
    if text_mask is None:
        text_mask = zeros_txt.clone()
        text_mask[text_len // 3: 2 * text_len // 3] = True

    if scenario == "uncond":
        return MaskSpec(ones_img, ones_txt)
    if scenario == "t2i":
        return MaskSpec(ones_img, zeros_txt)
    if scenario == "i2t":
        return MaskSpec(zeros_img, ones_txt)
    if scenario == "img-infill":
        return MaskSpec(image_mask, zeros_txt)
    if scenario == "text-infill":
        return MaskSpec(zeros_img, text_mask)
    return MaskSpec(image_mask, text_mask)


def center_half_mask(grid: int) -> torch.Tensor:
    """Center square covering half the width and height, patch-granular."""
    m = torch.zeros(grid, grid, dtype=torch.bool)
    q = grid // 4
    m[q:q + grid // 2, q:q + grid // 2] = True
    return m


def load_image_mask(path, grid: int) -> torch.Tensor:
    """Text grid of 0/1 rows -> (grid, grid) boolean mask."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip().replace(" ", "")
            if line:
                rows.append([c == "1" for c in line])
    m = torch.tensor(rows, dtype=torch.bool)
    if m.shape != (grid, grid):
        raise ValueError(f"mask grid {tuple(m.shape)} != ({grid}, {grid})")
    return m


def load_text_mask(spec: str, text_len: int) -> torch.Tensor:
    """Comma-separated token indices -> (text_len,) boolean mask."""
    m = torch.zeros(text_len, dtype=torch.bool)
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        i = int(part)
        if not (0 <= i < text_len):
            raise ValueError(f"token index {i} out of range [0, {text_len})")
        m[i] = True
    return m
