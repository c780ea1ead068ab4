"""Noise schedules and the forward/reverse diffusion algebra.

All schedule quantities are precomputed in float64 at construction.
Indexing convention: t is 1-based, t in [1, T]; array index t-1 holds the
step-t quantity. t=0 means clean data (alpha_bar_0 = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha_bar sequences plus posterior variances.

    Immutable after construction; safe to share across threads.
    """

    T: int
    betas: torch.Tensor        # (T,) float64
    alphas: torch.Tensor       # (T,) float64
    alpha_bars: torch.Tensor   # (T,) float64
    posterior_vars: torch.Tensor  # (T,) float64, beta-tilde_t

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 = 1 for the clean-data boundary."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def check_t(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")


def build_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
        if not (0.0 < v < 1.0):
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")

    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)

    # beta-tilde_t = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t), with
    # alpha_bar_0 = 1 so the t=1 posterior variance is 0.
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    posterior_vars = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bars)

    return NoiseSchedule(T=T, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars, posterior_vars=posterior_vars)


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward corruption: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    t=0 returns x0 unchanged (clean-data boundary).
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if t == 0:
        return x0.clone()
    sched.check_t(t)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def ddpm_reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int,
                      sched: NoiseSchedule, z: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1} in the eps parameterization.

    Variance is fixed to the posterior beta-tilde_t; z is ignored at t=1.
    """
    sched.check_t(t)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    i = t - 1
    beta = float(sched.betas[i])
    alpha = float(sched.alphas[i])
    abar = float(sched.alpha_bars[i])
    mean = (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    if z.shape != x_t.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != x_t shape {tuple(x_t.shape)}")
    return mean + math.sqrt(float(sched.posterior_vars[i])) * z


def ddim_reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
                      sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic step x_t -> x_{t_prev} via the predicted-x0 update."""
    sched.check_t(t)
    if t_prev > t:
        raise ValueError(f"t_prev ({t_prev}) must not exceed t ({t})")
    if t_prev < 0:
        raise ValueError(f"t_prev must be >= 0, got {t_prev}")
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    if t_prev == t:
        return x_t.clone()
    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat


def ddim_stride(T: int, steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps from T down to 1, length <= steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps >= T:
        return list(range(T, 0, -1))
    ts = torch.linspace(T, 1, steps).round().to(torch.int64).tolist()
    out = []
    for t in ts:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def joint_noise_loss(model, x0_image: torch.Tensor, x0_text: torch.Tensor, t,
                     eps_image: torch.Tensor, eps_text: torch.Tensor,
                     sched: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction MSE, per-modality mean then summed over both modalities.

    Per-modality mean keeps the long image token sequence from dominating the
    text gradient. Accepts batched inputs with a per-example integer t tensor,
    or unbatched inputs with a scalar t.
    """
    if x0_image is None or x0_text is None:
        raise ValueError("joint loss requires both modalities")
    for name, v in (("x0_image", x0_image), ("x0_text", x0_text),
                    ("eps_image", eps_image), ("eps_text", eps_text)):
        if not torch.isfinite(v).all():
            raise ValueError(f"{name} contains non-finite values")
    if eps_image.shape != x0_image.shape or eps_text.shape != x0_text.shape:
        raise ValueError("eps shapes must match modality shapes")

    if isinstance(t, int):
        xt_image = q_sample(x0_image, t, eps_image, sched)
        xt_text = q_sample(x0_text, t, eps_text, sched)
        t_in = t
    else:
        t = torch.as_tensor(t, dtype=torch.int64)
        abar = sched.alpha_bars.to(x0_image.dtype)[t - 1]
        ai = abar.view(-1, *([1] * (x0_image.dim() - 1)))
        at = abar.view(-1, *([1] * (x0_text.dim() - 1)))
        xt_image = torch.sqrt(ai) * x0_image + torch.sqrt(1.0 - ai) * eps_image
        xt_text = torch.sqrt(at) * x0_text + torch.sqrt(1.0 - at) * eps_text
        t_in = t

    pred_image, pred_text = model(xt_image, xt_text, t_in)
    loss_image = ((pred_image - eps_image) ** 2).mean()
    loss_text = ((pred_text - eps_text) ** 2).mean()
    return loss_image + loss_text
