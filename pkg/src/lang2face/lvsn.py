"""Language/visual semantic encoders and the language-visual matching loss."""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

logger = logging.getLogger(__name__)


class LengthMismatch(ValueError):
    pass


class WrongLevel(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


class WordFeatures(NamedTuple):
    words: torch.Tensor      # B x D x N, zero past each sentence's length
    sentence: torch.Tensor   # B x D
    mask: torch.Tensor       # B x N, True for real tokens


class VisualFeatures(NamedTuple):
    regions: torch.Tensor    # B x D x R
    pooled: torch.Tensor     # B x D


class TextEncoder(nn.Module):
    """Bidirectional LSTM over word embeddings (the language semantic encoder)."""

    def __init__(self, vocab_size: int, dim: int = 64, embed_dim: int = 32, n_max: int = 24):
        super().__init__()
        self.n_max = n_max
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.rnn = nn.LSTM(embed_dim, dim // 2, batch_first=True, bidirectional=True)

    def forward(self, tokens: torch.Tensor) -> WordFeatures:
        if tokens.shape[1] > self.n_max:
            raise LengthMismatch(f"{tokens.shape[1]} tokens exceed n_max={self.n_max}")
        mask = tokens != 0
        lengths = mask.sum(1).clamp(min=1)
        emb = self.embed(tokens)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        sentence = torch.cat([h[0], h[1]], dim=1)
        return WordFeatures(out.transpose(1, 2), sentence, mask)


class VisualEncoder(nn.Module):
    """Four strided conv blocks; 4x4 region features plus a pooled vector."""

    def __init__(self, dim: int = 64, channels=(16, 32, 64, 64), image_size: int = 64):
        super().__init__()
        self.image_size = image_size
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            c_in = c
        self.trunk = nn.Sequential(*layers)
        self.to_regions = nn.Conv2d(c_in, dim, 1)
        self.to_pooled = nn.Linear(c_in, dim)

    def forward(self, img: torch.Tensor) -> VisualFeatures:
        if img.shape[-1] != self.image_size or img.shape[-2] != self.image_size:
            raise WrongLevel(f"visual encoder expects {self.image_size}px images, got {tuple(img.shape)}")
        h = self.trunk(img)
        regions = self.to_regions(h).flatten(2)
        pooled = self.to_pooled(h.mean(dim=(2, 3)))
        return VisualFeatures(regions, pooled)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pairwise cosine similarity between rows of ``a`` (B x D) and ``b`` (B x D)."""
    an = a / a.norm(dim=1, keepdim=True).clamp(min=eps)
    bn = b / b.norm(dim=1, keepdim=True).clamp(min=eps)
    return an @ bn.t()


def _symmetric_ce(scores: torch.Tensor) -> torch.Tensor:
    target = torch.arange(scores.shape[0], device=scores.device)
    return F.cross_entropy(scores, target) + F.cross_entropy(scores.t(), target)


def sentence_scores(sentence: torch.Tensor, pooled: torch.Tensor, gamma3: float) -> torch.Tensor:
    # rows: images, columns: descriptions
    return gamma3 * cosine_matrix(pooled, sentence)


def word_scores(words: torch.Tensor, mask: torch.Tensor, regions: torch.Tensor,
                gamma1: float, gamma2: float, gamma3: float, eps: float = 1e-8) -> torch.Tensor:
    """Attention-pooled region-word matching scores, rows images, columns descriptions."""
    B = words.shape[0]
    # every (image i, description j) pair
    w = words.unsqueeze(0).expand(B, -1, -1, -1)          # i, j, D, N
    v = regions.unsqueeze(1).expand(-1, B, -1, -1)        # i, j, D, R
    m = mask.unsqueeze(0).expand(B, -1, -1)               # i, j, N
    logits = torch.einsum("ijdn,ijdr->ijrn", w, v)
    logits = logits.masked_fill(~m.unsqueeze(2), float("-inf"))
    attn = torch.softmax(logits, dim=3)                  # normalise over words
    attn = torch.softmax(gamma1 * attn.transpose(2, 3), dim=3)   # over regions, per word
    context = torch.einsum("ijnr,ijdr->ijdn", attn, v)
    cos = F.cosine_similarity(context, w, dim=2, eps=eps)          # i, j, N
    pooled = (torch.exp(gamma2 * cos) * m).sum(2)
    return gamma3 * torch.log(pooled) / gamma2


class MatchingLoss(NamedTuple):
    total: torch.Tensor
    sentence: torch.Tensor
    word: torch.Tensor


def matching_loss(text: WordFeatures, visual: VisualFeatures, gammas=(5.0, 5.0, 10.0),
                  use_words: bool = True) -> MatchingLoss:
    """Symmetric softmax matching loss at sentence and word granularity.

    Each granularity contributes the mean cross-entropy of picking the matched
    description for every image plus the matched image for every description,
    so an uninformative batch of size B scores ``2 ln B`` per granularity.
    """
    B = text.sentence.shape[0]
    if B < 2:
        raise BatchTooSmall("matching loss needs at least two pairs")
    g1, g2, g3 = gammas
    l_sent = _symmetric_ce(sentence_scores(text.sentence, visual.pooled, g3))
    if use_words:
        l_word = _symmetric_ce(word_scores(text.words, text.mask, visual.regions, g1, g2, g3))
    else:
        l_word = torch.zeros_like(l_sent)
    return MatchingLoss(l_sent + l_word, l_sent, l_word)


def retrieval_accuracy(text: WordFeatures, visual: VisualFeatures) -> float:
    """Top-1 image-to-description retrieval accuracy using sentence cosine."""
    with torch.no_grad():
        sim = cosine_matrix(visual.pooled, text.sentence)
        hits = sim.argmax(1) == torch.arange(sim.shape[0])
    return float(hits.float().mean())


def pretrain_encoders(text_enc: TextEncoder, vis_enc: VisualEncoder, tokens: torch.Tensor,
                      images: torch.Tensor, steps: int, batch_size: int = 16, lr: float = 1e-5,
                      gammas=(5.0, 5.0, 10.0), seed: int = 0, betas=(0.5, 0.999),
                      log_every: int = 100) -> list[dict]:
    """Fit both encoders on (target image, description) pairs, then freeze them.

    Returns the training curve as a list of ``{"step", "loss", ...}`` rows.
    """
    params = list(text_enc.parameters()) + list(vis_enc.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=betas)
    n = tokens.shape[0]
    curve = []
    text_enc.train()
    vis_enc.train()
    order = _batch_order(n, batch_size, steps, seed)
    for step, idx in enumerate(order):
        idx = torch.as_tensor(idx)
        loss = matching_loss(text_enc(tokens[idx]), vis_enc(images[idx]), gammas)
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            row = {"step": step, "loss": loss.total.item(), "sentence": loss.sentence.item(),
                   "word": loss.word.item()}
            curve.append(row)
            logger.info("pretrain step %d loss %.4f", step, row["loss"])
    freeze(text_enc)
    freeze(vis_enc)
    return curve


def _batch_order(n: int, batch_size: int, steps: int, seed: int):
    # fresh permutation per epoch, derived from (seed, epoch) only
    per_epoch = n // batch_size
    for step in range(steps):
        epoch, pos = divmod(step, per_epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        yield perm[pos * batch_size:(pos + 1) * batch_size]


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module
