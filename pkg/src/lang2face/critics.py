"""Face verification, expression verification and synthesis discriminators."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .config import Config
from .generator import WrongShape


class WrongLevel(ValueError):
    pass


class CriticScore(NamedTuple):
    uncond: torch.Tensor
    cond: torch.Tensor


class CriticLogits(NamedTuple):
    uncond: torch.Tensor
    cond: torch.Tensor

    def scores(self) -> CriticScore:
        return CriticScore(torch.sigmoid(self.uncond), torch.sigmoid(self.cond))


def _downsampler(size: int, width: int, out_size: int = 4) -> tuple[nn.Sequential, int]:
    layers, c_in, c = [], 3, width
    while size > out_size:
        layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        c_in, c, size = c, min(c * 2, width * 4), size // 2
    return nn.Sequential(*layers), c_in


class _Heads(nn.Module):
    """Unconditional head, plus a conditional head fed the tiled sentence code."""

    def __init__(self, c: int, cond_dim: int):
        super().__init__()
        self.uncond = nn.Conv2d(c, 1, 4)
        self.cond = nn.Sequential(nn.Conv2d(c + cond_dim, c, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
                                  nn.Conv2d(c, 1, 4))

    def forward(self, h: torch.Tensor, sentence: torch.Tensor) -> CriticLogits:
        tiled = sentence[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        u = self.uncond(h).flatten()
        c = self.cond(torch.cat([h, tiled], 1)).flatten()
        return CriticLogits(u, c)


class FaceVerifier(nn.Module):
    def __init__(self, size: int, width: int, cond_dim: int):
        super().__init__()
        self.size = size
        self.trunk, c = _downsampler(size, width)
        self.heads = _Heads(c, cond_dim)

    def check(self, img: torch.Tensor) -> None:
        if img.shape[-1] != self.size or img.shape[-2] != self.size:
            raise WrongLevel(f"critic expects {self.size}px images, got {tuple(img.shape)}")

    def logits(self, img: torch.Tensor, sentence: torch.Tensor) -> CriticLogits:
        self.check(img)
        return self.heads(self.trunk(img), sentence)

    def forward(self, img, sentence) -> CriticScore:
        return self.logits(img, sentence).scores()


class SynthesisVerifier(FaceVerifier):
    def check(self, img):
        if img.shape[-1] != self.size or img.shape[-2] != self.size:
            raise WrongShape(f"synthesis critic expects {self.size}px images, got {tuple(img.shape)}")


class ExpressionVerifier(nn.Module):
    """Scores ``f_EV(candidate) - f_EV(neutral)``, isolating the expression change."""

    def __init__(self, size: int, width: int, cond_dim: int):
        super().__init__()
        self.size = size
        self.encoder, c = _downsampler(size, width)
        self.heads = _Heads(c, cond_dim)

    def delta(self, candidate: torch.Tensor, neutral: torch.Tensor) -> torch.Tensor:
        for img in (candidate, neutral):
            if img.shape[-1] != self.size or img.shape[-2] != self.size:
                raise WrongLevel(f"critic expects {self.size}px images, got {tuple(img.shape)}")
        return self.encoder(candidate) - self.encoder(neutral)

    def logits(self, candidate, neutral, sentence) -> CriticLogits:
        return self.heads(self.delta(candidate, neutral), sentence)

    def forward(self, candidate, neutral, sentence) -> CriticScore:
        return self.logits(candidate, neutral, sentence).scores()


class Critics(nn.Module):
    """Verification critics at levels 1-2 and the synthesis critic at level 3."""

    def __init__(self, cfg: Config):
        super().__init__()
        s1, s2, s3 = cfg.sizes
        w, d = cfg.critic_channels, cfg.face_channels
        self.face = nn.ModuleList([FaceVerifier(s1, w, d), FaceVerifier(s2, w, d)])
        self.expression = nn.ModuleList([ExpressionVerifier(s1, w, d), ExpressionVerifier(s2, w, d)])
        self.synthesis = SynthesisVerifier(s3, w, d)

    def face_verify(self, level: int, img, sentence) -> CriticScore:
        return self._face(level)(img, sentence)

    def expression_verify(self, level: int, candidate, neutral, sentence) -> CriticScore:
        if level not in (1, 2):
            raise WrongLevel("expression verification exists only at levels 1 and 2")
        return self.expression[level - 1](candidate, neutral, sentence)

    def synthesis_verify(self, img, sentence) -> CriticScore:
        return self.synthesis(img, sentence)

    def _face(self, level: int) -> FaceVerifier:
        if level not in (1, 2):
            raise WrongLevel("face verification exists only at levels 1 and 2")
        return self.face[level - 1]

    def adversary(self, level: int) -> FaceVerifier:
        """Critic that scores generator output at ``level`` (1..3)."""
        return self.synthesis if level == 3 else self._face(level)
