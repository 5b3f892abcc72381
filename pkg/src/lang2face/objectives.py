"""Discriminator and generator losses.

The score-based functions take sigmoid outputs in (0, 1).  The ``*_logits``
twins compute the same quantities from pre-sigmoid logits with
``softplus`` and are what the trainer uses; they agree with the score forms to
floating-point precision.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .config import LossWeights
from .critics import CriticLogits, CriticScore
from .generator import resize


class DomainError(ValueError):
    pass


def _check(*scores: torch.Tensor) -> None:
    for s in scores:
        s = torch.as_tensor(s).detach()
        if not torch.all((s > 0) & (s < 1)):
            raise DomainError("critic scores must lie strictly inside (0, 1)")


def _mean(x) -> torch.Tensor:
    return torch.as_tensor(x).mean()


def loss_fv(real: CriticScore, fake: CriticScore) -> torch.Tensor:
    _check(*real, *fake)
    return (-0.5 * (_mean(torch.log(real.uncond)) + _mean(torch.log1p(-fake.uncond)))
            - 0.5 * (_mean(torch.log(real.cond)) + _mean(torch.log1p(-fake.cond))))


# the expression critics use the same form, applied to scores of expression deltas
loss_ev = loss_fv
loss_syn = loss_fv


def loss_adv(fake: CriticScore) -> torch.Tensor:
    _check(*fake)
    return -0.5 * (_mean(torch.log(fake.uncond)) + _mean(torch.log(fake.cond)))


def loss_fv_logits(real: CriticLogits, fake: CriticLogits) -> torch.Tensor:
    return 0.5 * (F.softplus(-real.uncond).mean() + F.softplus(fake.uncond).mean()
                  + F.softplus(-real.cond).mean() + F.softplus(fake.cond).mean())


loss_ev_logits = loss_fv_logits


def loss_adv_logits(fake: CriticLogits) -> torch.Tensor:
    return 0.5 * (F.softplus(-fake.uncond).mean() + F.softplus(-fake.cond).mean())


def loss_d_total(l_syn, l_fv: Sequence, l_ev: Sequence) -> torch.Tensor:
    return l_syn + sum(a + b for a, b in zip(l_fv, l_ev))


def loss_identity(target: torch.Tensor, synthesized: torch.Tensor,
                  encoder: Callable[[torch.Tensor], torch.Tensor], input_size: int | None = None) -> torch.Tensor:
    """Mean squared distance between face-encoder features of two images."""
    if input_size is not None:
        target, synthesized = resize(target, input_size), resize(synthesized, input_size)
    return (encoder(target) - encoder(synthesized)).pow(2).mean()


def loss_recon(target: torch.Tensor, synthesized: torch.Tensor) -> torch.Tensor:
    return (target - synthesized).abs().mean()


def loss_g_total(adv: Sequence, ident: Sequence, recon: Sequence,
                 weights: LossWeights = LossWeights()) -> torch.Tensor:
    return sum(weights.adv * a + weights.identity * i + weights.recon * r
               for a, i, r in zip(adv, ident, recon))


def loss_total(l_lvm, l_d_total, l_g_total):
    return l_lvm + l_d_total + l_g_total


REPORT_KEYS = (
    "L_LVM", "L_FV1", "L_FV2", "L_EV1", "L_EV2", "L_syn",
    "L_adv1", "L_adv2", "L_adv3", "L_id1", "L_id2", "L_id3",
    "L_recon1", "L_recon2", "L_recon3", "L_CA_KL", "L_D_total", "L_G_total", "total",
)


def check_report(report: Mapping[str, float], weights: LossWeights = LossWeights(), tol: float = 1e-6) -> None:
    """Raise if the totals in ``report`` differ from their recomputed sums."""
    d = report["L_syn"] + sum(report[f"L_FV{i}"] + report[f"L_EV{i}"] for i in (1, 2))
    g = sum(weights.adv * report[f"L_adv{i}"] + weights.identity * report[f"L_id{i}"]
            + weights.recon * report[f"L_recon{i}"] for i in (1, 2, 3))
    t = report["L_LVM"] + report["L_D_total"] + report["L_G_total"]
    for name, value in (("L_D_total", d), ("L_G_total", g), ("total", t)):
        if abs(report[name] - value) > tol * max(1.0, abs(value)):
            raise AssertionError(f"{name}={report[name]} but components sum to {value}")
