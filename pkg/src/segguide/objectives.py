"""Adversarial objectives: baseline GAN losses plus the segmentation terms.

All losses are mean-form (batch- and patch-averaged) in minimization
convention, so weight values are independent of batch size. Discriminators
consume raw logits; probabilities only appear inside the log-loss. The
generator's adversarial term uses the non-saturating form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .core import GanMode, ObjectiveConfig, SegmentationMap
from .errors import (
    KindMismatchError,
    MissingFragmentError,
    NonFiniteLossError,
    UnpairedDataInPairedModeError,
)
from enum import Enum


class Side(Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted decomposition of one side's objective at one step."""

    l_g: float
    l_b: float
    l_m: float
    total: float
    side: Side
    sub_terms: Mapping[str, float] = field(default_factory=dict)
    tensor: torch.Tensor | None = field(default=None, compare=False, repr=False)


def scalar(value: torch.Tensor | float) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def assert_finite(value: torch.Tensor | float, what: str) -> None:
    v = scalar(value)
    if v != v or v in (float("inf"), float("-inf")):
        raise NonFiniteLossError(f"{what} is non-finite ({v})")


def _adv(logits: torch.Tensor, target_real: bool, mode: GanMode) -> torch.Tensor:
    if mode == GanMode.CROSS_ENTROPY:
        target = torch.ones_like(logits) if target_real else torch.zeros_like(logits)
        return F.binary_cross_entropy_with_logits(logits, target)
    target = 1.0 if target_real else 0.0
    return ((logits - target) ** 2).mean()


def discriminator_adversarial_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor,
                                   mode: GanMode) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(fake)), or the least-squares analogue."""
    return _adv(real_logits, True, mode) + _adv(fake_logits, False, mode)


def generator_adversarial_loss(fake_logits: torch.Tensor, mode: GanMode) -> torch.Tensor:
    return _adv(fake_logits, True, mode)


def seg_adversarial_loss(
    d: nn.Module,
    real_map: SegmentationMap,
    fake_map: SegmentationMap,
    side: Side,
    mode: GanMode = GanMode.CROSS_ENTROPY,
) -> torch.Tensor:
    """Adversarial loss over segmentation maps (binary or multi-class).

    The map kind selects which of the two segmentation terms this is; both
    share this formula. Gradients reach the generator only through
    ``fake_map``; on the discriminator side the fake map is detached so the
    discriminator update cannot back-propagate into the generator.
    """
    if real_map.kind != fake_map.kind:
        raise KindMismatchError(f"real map is {real_map.kind}, fake map is {fake_map.kind}")
    if real_map.class_count != fake_map.class_count:
        raise KindMismatchError(
            f"class counts differ: {real_map.class_count} vs {fake_map.class_count}"
        )
    if side == Side.DISCRIMINATOR:
        loss = discriminator_adversarial_loss(
            d(real_map.scores.detach()), d(fake_map.scores.detach()), mode
        )
    else:
        loss = generator_adversarial_loss(d(fake_map.scores), mode)
    assert_finite(loss, f"seg adversarial loss ({real_map.kind.value}, {side.value})")
    return loss


def reconstruction_l1(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (output - target).abs().mean()


def paired_baseline_loss(
    g: nn.Module,
    d: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    side: Side,
    *,
    lambda_l1: float = 100.0,
    mode: GanMode = GanMode.CROSS_ENTROPY,
    fake_y: torch.Tensor | None = None,
    aligned: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Conditional-GAN baseline term: adversarial + weighted L1 reconstruction.

    The discriminator scores (x, y) as real and (x, G(x)) as fake when it is
    conditional (in_channels == source + target channels); otherwise it
    scores the target image alone.
    """
    if not aligned:
        raise UnpairedDataInPairedModeError("paired loss needs aligned (x_i, y_i) batches")
    if fake_y is None:
        fake_y = g(x)

    def disc_input(img: torch.Tensor) -> torch.Tensor:
        want = getattr(d, "in_channels", img.shape[1])
        if want == img.shape[1] + x.shape[1]:
            return torch.cat([x, img], dim=1)
        return img

    if side == Side.DISCRIMINATOR:
        loss = discriminator_adversarial_loss(
            d(disc_input(y)), d(disc_input(fake_y.detach())), mode
        )
        sub = {"adv_d": scalar(loss)}
    else:
        adv = generator_adversarial_loss(d(disc_input(fake_y)), mode)
        rec = reconstruction_l1(fake_y, y)
        loss = adv + lambda_l1 * rec
        sub = {"adv_g": scalar(adv), "l1": scalar(rec)}
    assert_finite(loss, f"paired baseline loss ({side.value})")
    return loss, sub


@dataclass
class CycleForward:
    """One bidirectional forward pass, reusable across both objective sides."""

    fake_y: torch.Tensor
    fake_x: torch.Tensor
    rec_x: torch.Tensor
    rec_y: torch.Tensor


def cycle_forward(g: nn.Module, g_back: nn.Module, x: torch.Tensor, y: torch.Tensor) -> CycleForward:
    fake_y = g(x)
    fake_x = g_back(y)
    return CycleForward(fake_y=fake_y, fake_x=fake_x, rec_x=g_back(fake_y), rec_y=g(fake_x))


def unpaired_baseline_loss(
    g: nn.Module,
    g_back: nn.Module,
    d_color: nn.Module,
    d_sketch: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    side: Side,
    *,
    lambda_cycle: float = 10.0,
    mode: GanMode = GanMode.LEAST_SQUARES,
    forward: CycleForward | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Cycle-consistent baseline term summed over both translation directions."""
    fw = forward if forward is not None else cycle_forward(g, g_back, x, y)
    if side == Side.DISCRIMINATOR:
        loss_color = discriminator_adversarial_loss(d_color(y), d_color(fw.fake_y.detach()), mode)
        loss_sketch = discriminator_adversarial_loss(d_sketch(x), d_sketch(fw.fake_x.detach()), mode)
        loss = loss_color + loss_sketch
        sub = {"adv_d_color": scalar(loss_color), "adv_d_sketch": scalar(loss_sketch)}
    else:
        adv_fwd = generator_adversarial_loss(d_color(fw.fake_y), mode)
        adv_bwd = generator_adversarial_loss(d_sketch(fw.fake_x), mode)
        cyc_x = reconstruction_l1(fw.rec_x, x)
        cyc_y = reconstruction_l1(fw.rec_y, y)
        loss = adv_fwd + adv_bwd + lambda_cycle * (cyc_x + cyc_y)
        sub = {
            "adv_g_fwd": scalar(adv_fwd),
            "adv_g_bwd": scalar(adv_bwd),
            "cycle_x": scalar(cyc_x),
            "cycle_y": scalar(cyc_y),
        }
    assert_finite(loss, f"unpaired baseline loss ({side.value})")
    return loss, sub


def total_objective(
    cfg: ObjectiveConfig,
    fragments: Mapping[str, torch.Tensor | float],
    side: Side = Side.GENERATOR,
    sub_terms: Mapping[str, float] | None = None,
) -> LossBreakdown:
    """Weighted sum w_g*l_g + w_b*l_b + w_m*l_m over the supplied fragments.

    Fragments for zero-weight terms may be omitted and are treated as 0;
    a nonzero weight with no fragment is an error. When fragments are
    tensors, ``breakdown.tensor`` carries the differentiable total.
    """
    weights = {"l_g": cfg.w_g, "l_b": cfg.w_b, "l_m": cfg.w_m}
    pieces: dict[str, torch.Tensor | float] = {}
    for name, w in weights.items():
        frag = fragments.get(name)
        if frag is None:
            if w != 0.0:
                raise MissingFragmentError(f"{name} has weight {w} but no computed fragment")
            pieces[name] = 0.0
        else:
            pieces[name] = frag

    total = None
    for name, w in weights.items():
        if w == 0.0:
            continue
        term = w * pieces[name]
        total = term if total is None else total + term
    if total is None:
        total = 0.0

    tensor = total if isinstance(total, torch.Tensor) else None
    breakdown = LossBreakdown(
        l_g=scalar(pieces["l_g"]),
        l_b=scalar(pieces["l_b"]),
        l_m=scalar(pieces["l_m"]),
        total=scalar(total),
        side=side,
        sub_terms=dict(sub_terms or {}),
        tensor=tensor,
    )
    assert_finite(breakdown.total, f"total objective ({side.value})")
    return breakdown
