"""Noise schedule, masked forward noising, and the masked training loss.

The forward process only noises frames selected by the mask; unmasked frames
pass through bit-exactly. The training loss likewise only scores masked
elements, normalized by their count so magnitudes are comparable across mask
densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, DegenerateMaskError, LayoutError, RangeError
from .layout import LatentStoryboard


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-timestep β/α/ᾱ tables, 1-indexed via accessors."""

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.num_steps,):
            raise ConfigurationError(
                f"expected {self.num_steps} betas, got shape {betas.shape}"
            )
        if not ((betas > 0) & (betas < 1)).all():
            raise ConfigurationError("every beta must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise RangeError(f"timestep {t} outside [1, {self.num_steps}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t for 1 <= t <= T; ᾱ_0 is defined as 1 (fully clean)."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bars_for(self, t: torch.Tensor) -> torch.Tensor:
        """Vectorized ᾱ lookup for a (B,) tensor of timesteps in [1, T]."""
        t_np = t.detach().cpu().numpy()
        if t_np.min() < 1 or t_np.max() > self.num_steps:
            raise RangeError(
                f"timesteps outside [1, {self.num_steps}]: "
                f"min {t_np.min()}, max {t_np.max()}"
            )
        vals = self.alpha_bars[t_np - 1]
        return torch.from_numpy(np.ascontiguousarray(vals))

    def spec(self) -> dict:
        """Construction parameters, enough to rebuild the schedule exactly."""
        return {
            "kind": "linear",
            "num_steps": self.num_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    @classmethod
    def from_spec(cls, obj: dict) -> "NoiseSchedule":
        if obj.get("kind", "linear") != "linear":
            raise ConfigurationError(f"unknown schedule kind {obj.get('kind')!r}")
        return make_linear_schedule(
            int(obj["num_steps"]), float(obj["beta_start"]), float(obj["beta_end"])
        )


def make_linear_schedule(num_steps: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas, inclusive of both endpoints."""
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return NoiseSchedule(num_steps, betas)


def _forward_tensor(x0: torch.Tensor, eps: torch.Tensor, mask: torch.Tensor,
                    alpha_bar: torch.Tensor) -> torch.Tensor:
    noised = (alpha_bar.sqrt() * x0.double()
              + (1.0 - alpha_bar).sqrt() * eps.double()).to(x0.dtype)
    return noised * mask + x0 * (1.0 - mask)


def masked_forward(x0: LatentStoryboard, mask: torch.Tensor, t: int,
                   eps: torch.Tensor, schedule: NoiseSchedule) -> LatentStoryboard:
    """Noise the masked frames of x0 to level t, keep the rest bit-exact.

    mask is a pixel grid of {0,1} broadcastable to x0's canvas; eps matches
    the canvas shape.
    """
    if tuple(eps.shape) != tuple(x0.data.shape):
        raise LayoutError(
            f"noise shape {tuple(eps.shape)} != storyboard {tuple(x0.data.shape)}"
        )
    if not 1 <= t <= schedule.num_steps:
        raise RangeError(f"timestep {t} outside [1, {schedule.num_steps}]")
    ab = torch.tensor(schedule.alpha_bar(t), dtype=torch.float64)
    out = _forward_tensor(x0.data, eps, mask.to(x0.data.dtype), ab)
    return LatentStoryboard(out, x0.layout)


def masked_forward_batch(x0: torch.Tensor, eps: torch.Tensor, mask: torch.Tensor,
                         t: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Batched forward noising with per-sample timesteps.

    x0, eps: (B, C, H, W); mask broadcastable to them; t: (B,) in [1, T].
    """
    if x0.shape != eps.shape:
        raise LayoutError(f"noise shape {tuple(eps.shape)} != x0 {tuple(x0.shape)}")
    ab = schedule.alpha_bars_for(t).view(-1, 1, 1, 1)
    return _forward_tensor(x0, eps, mask.to(x0.dtype), ab)


def masked_loss(eps: torch.Tensor, eps_pred: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
    """Mean squared residual over masked elements only.

    Unmasked coordinates of the residual cannot influence the value. The mask
    may be any shape broadcastable to the residual; the normalizer is the
    number of masked elements after broadcast.
    """
    if eps.shape != eps_pred.shape:
        raise LayoutError(
            f"prediction shape {tuple(eps_pred.shape)} != target {tuple(eps.shape)}"
        )
    try:
        mask = mask.to(eps.dtype).expand_as(eps)
    except RuntimeError as exc:
        raise LayoutError(
            f"mask shape {tuple(mask.shape)} incompatible with residual "
            f"{tuple(eps.shape)}"
        ) from exc
    count = mask.sum()
    if count.item() == 0:
        raise DegenerateMaskError("loss undefined: mask selects no elements")
    residual = mask * (eps - eps_pred)
    return residual.pow(2).sum() / count


def masked_loss_batch(eps: torch.Tensor, eps_pred: torch.Tensor,
                      mask: torch.Tensor) -> torch.Tensor:
    """Per-sample masked mean squared residual, averaged over the batch.

    Each sample is normalized by its own masked-element count, so dense and
    sparse masks contribute on equal footing.
    """
    if eps.shape != eps_pred.shape:
        raise LayoutError(
            f"prediction shape {tuple(eps_pred.shape)} != target {tuple(eps.shape)}"
        )
    b = eps.shape[0]
    try:
        mask = mask.to(eps.dtype).expand_as(eps)
    except RuntimeError as exc:
        raise LayoutError(
            f"mask shape {tuple(mask.shape)} incompatible with residual "
            f"{tuple(eps.shape)}"
        ) from exc
    counts = mask.reshape(b, -1).sum(dim=1)
    if (counts == 0).any():
        bad = torch.nonzero(counts == 0).flatten().tolist()
        raise DegenerateMaskError(f"samples {bad} have all-zero masks")
    sq = (mask * (eps - eps_pred)).pow(2).reshape(b, -1).sum(dim=1)
    return (sq / counts).mean()
