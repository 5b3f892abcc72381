"""Facial feature encoder, conditioning augmentation, word attention and the
three-level expression synthesizer."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config


class WrongShape(ValueError):
    pass


class DimMismatch(ValueError):
    pass


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class FaceEncoder(nn.Module):
    """Strided convolutions from the input resolution down to a 2x2 feature grid."""

    def __init__(self, image_size: int = 64, channels: int = 64):
        super().__init__()
        self.image_size = image_size
        n_down = image_size.bit_length() - 2  # image_size -> 2
        widths = [min(channels, 16 * 2**i) for i in range(n_down - 1)] + [channels]
        layers, c_in = [], 3
        for i, c in enumerate(widths):
            layers += [nn.Conv2d(c_in, c, 4, 2, 1)]
            if i < n_down - 1:
                layers += [_norm(c), nn.LeakyReLU(0.2, inplace=True)]
            c_in = c
        self.net = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[-1] != self.image_size \
                or img.shape[-2] != self.image_size:
            raise WrongShape(f"face encoder expects B x 3 x {self.image_size}^2, got {tuple(img.shape)}")
        return self.net(img)


class AugmentedSentence(NamedTuple):
    tiled: torch.Tensor   # B x C x 2 x 2
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    @property
    def vector(self) -> torch.Tensor:
        return self.tiled[:, :, 0, 0]


class ConditioningAugmentation(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 2 * out_dim)
        self.out_dim = out_dim

    def forward(self, sentence: torch.Tensor, noise: torch.Tensor) -> AugmentedSentence:
        mu, logvar = self.fc(sentence).chunk(2, dim=1)
        c = mu + torch.exp(0.5 * logvar) * noise
        return AugmentedSentence(c[:, :, None, None].expand(-1, -1, 2, 2), mu, logvar)


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.mean(torch.sum(mu.pow(2) + logvar.exp() - 1 - logvar, dim=1))


class AttentionResult(NamedTuple):
    alpha: torch.Tensor   # B x C x H x W
    beta: torch.Tensor    # B x N x (H*W), sums to one over words


def word_attention(words: torch.Tensor, mask: torch.Tensor | None, q: torch.Tensor,
                   proj: torch.Tensor) -> AttentionResult:
    """Per-region softmax over projected word vectors.

    ``words`` is B x D x N, ``q`` is B x C x H x W and ``proj`` the C x D
    bias-free 1x1 projection.  PAD words get zero weight.
    """
    B, C, H, W = q.shape
    if proj.shape != (C, words.shape[1]):
        raise DimMismatch(f"projection {tuple(proj.shape)} does not map D={words.shape[1]} to C={C}")
    w_hat = torch.einsum("cd,bdn->bcn", proj, words)
    q_hat = q.flatten(2)                                   # B x C x HW
    logits = torch.einsum("bcn,bcj->bnj", w_hat, q_hat)    # B x N x HW
    if mask is not None:
        logits = logits.masked_fill(~mask[:, :, None], float("-inf"))
    beta = torch.softmax(logits, dim=1)
    alpha = torch.einsum("bcn,bnj->bcj", w_hat, beta)
    return AttentionResult(alpha.view(B, C, H, W), beta)


class WordAttention(nn.Module):
    def __init__(self, word_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Parameter(torch.randn(channels, word_dim) / word_dim**0.5)

    def forward(self, words, mask, q) -> AttentionResult:
        return word_attention(words, mask, q, self.proj)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, 1, 1), _norm(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, 1, 1), _norm(c))

    def forward(self, x):
        return x + self.body(x)


def _up(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(c_in, c_out, 3, 1, 1), _norm(c_out), nn.ReLU(inplace=True))


def _to_image(c: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c, 3, 3, 1, 1), nn.Tanh())


def _to_mask(c: int, bias: float = -3.0) -> nn.Sequential:
    conv = nn.Conv2d(c, 1, 3, 1, 1)
    nn.init.constant_(conv.bias, bias)   # start close to copying the neutral face
    return nn.Sequential(conv, nn.Sigmoid())


class SynthesisOutput(NamedTuple):
    images: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    hidden: tuple[torch.Tensor, torch.Tensor]
    sentence: AugmentedSentence
    attention: tuple[AttentionResult | None, AttentionResult | None]
    masks: tuple | None = None     # per-level blend masks when compositing over the neutral input


class Generator(nn.Module):
    """FFE + conditioning augmentation + three expression synthesizers."""

    def __init__(self, cfg: Config):
        super().__init__()
        C = cfg.face_channels
        c1, c2, c3 = cfg.level_channels
        self.use_attention = not cfg.disable_attention
        self.neutral_skip = cfg.neutral_skip
        self.sizes = cfg.sizes
        self.ffe = FaceEncoder(cfg.image_size, C)
        self.ca = ConditioningAugmentation(cfg.word_dim, C)

        n_up = cfg.base_resolution.bit_length() - 2       # 2 -> base
        ups, c_in = [], 2 * C
        for i in range(n_up):
            ups.append(_up(c_in, c1))
            c_in = c1
        self.level1 = nn.Sequential(*ups, *[ResBlock(c1) for _ in range(cfg.res_blocks)])
        self.level2 = nn.Sequential(nn.Conv2d(2 * c1, c1, 3, 1, 1), _norm(c1), nn.ReLU(inplace=True),
                                    *[ResBlock(c1) for _ in range(cfg.res_blocks)], _up(c1, c2))
        self.level3 = nn.Sequential(nn.Conv2d(2 * c2, c2, 3, 1, 1), _norm(c2), nn.ReLU(inplace=True),
                                    *[ResBlock(c2) for _ in range(cfg.res_blocks)], _up(c2, c3))
        self.heads = nn.ModuleList([_to_image(c1), _to_image(c2), _to_image(c3)])
        self.attention = nn.ModuleList([WordAttention(cfg.word_dim, c1), WordAttention(cfg.word_dim, c2)])
        if self.neutral_skip:
            self.mask_heads = nn.ModuleList([_to_mask(c1), _to_mask(c2), _to_mask(c3)])

    def encode_face(self, img: torch.Tensor) -> torch.Tensor:
        return self.ffe(img)

    def _fuse(self, n: int, q, words, mask):
        if not self.use_attention:
            return torch.cat([q, torch.zeros_like(q)], 1), None
        att = self.attention[n](words, mask, q)
        return torch.cat([q, att.alpha], 1), att

    def forward(self, neutral: torch.Tensor, words: torch.Tensor, mask: torch.Tensor,
                sentence: torch.Tensor, noise: torch.Tensor) -> SynthesisOutput:
        f_f = self.ffe(neutral)
        s = self.ca(sentence, noise)
        q1 = self.level1(torch.cat([f_f, s.tiled], 1))
        x, att1 = self._fuse(0, q1, words, mask)
        q2 = self.level2(x)
        x, att2 = self._fuse(1, q2, words, mask)
        q3 = self.level3(x)
        qs = (q1, q2, q3)
        colors = [head(q) for head, q in zip(self.heads, qs)]
        if not self.neutral_skip:
            return SynthesisOutput(tuple(colors), (q1, q2), s, (att1, att2))
        masks = tuple(head(q) for head, q in zip(self.mask_heads, qs))
        images = tuple(m * c + (1 - m) * resize(neutral, size)
                       for m, c, size in zip(masks, colors, self.sizes))
        return SynthesisOutput(images, (q1, q2), s, (att1, att2), masks)


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    """Area-downsample or bilinear-upsample a B x 3 x H x W batch to ``size``."""
    if img.shape[-1] == size:
        return img
    if img.shape[-1] > size:
        return F.interpolate(img, size=(size, size), mode="area")
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
