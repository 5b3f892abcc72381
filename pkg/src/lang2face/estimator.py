"""scikit-learn style facade over pretraining, training and synthesis."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .au_codec import grammar_vocab, parse, tokenize
from .config import Config
from .evaluation import Model, ssim
from .lvsn import _batch_order, pretrain_encoders
from .trainer import Trainer, build_lvsn, to_images, to_tensor


class ExpressionSynthesizer(BaseEstimator):
    """Neutral face + description -> expressive face.

    ``X`` is a sequence of ``(neutral_image, description)`` pairs with
    H x W x 3 images in [-1, 1]; ``y`` the matching expressive targets.
    """

    def __init__(self, steps: int = 2000, pretrain_steps: int = 3000, batch_size: int = 8,
                 base_resolution: int = 16, seed: int = 0, disable_lvm: bool = False,
                 disable_attention: bool = False):
        self.steps = steps
        self.pretrain_steps = pretrain_steps
        self.batch_size = batch_size
        self.base_resolution = base_resolution
        self.seed = seed
        self.disable_lvm = disable_lvm
        self.disable_attention = disable_attention

    def _config(self) -> Config:
        cfg = Config(steps=self.steps, pretrain_steps=self.pretrain_steps, batch_size=self.batch_size,
                     pretrain_batch_size=max(2, min(16, self.batch_size * 2)),
                     base_resolution=self.base_resolution, seed=self.seed,
                     disable_lvm=self.disable_lvm, disable_attention=self.disable_attention)
        cfg.validate()
        return cfg

    def _inputs(self, X):
        neutral = to_tensor([np.asarray(n, dtype=np.float32) for n, _ in X])
        for _, text in X:
            parse(text)   # reject free text early
        tokens = torch.tensor([tokenize(t, self.vocab_, self.config_.n_max) for _, t in X])
        return neutral, [t for _, t in X], tokens

    def fit(self, X, y):
        self.config_ = cfg = self._config()
        self.vocab_ = grammar_vocab()
        neutral, _, tokens = self._inputs(X)
        target = to_tensor([np.asarray(t, dtype=np.float32) for t in y])
        if target.shape[-1] != cfg.image_size or neutral.shape[-1] != cfg.image_size:
            raise ValueError(f"images must be {cfg.image_size}px for base_resolution={self.base_resolution}")
        lvsn = build_lvsn(cfg, self.vocab_)
        pretrain_encoders(lvsn.text, lvsn.visual, tokens, target, steps=cfg.pretrain_steps,
                          batch_size=min(cfg.pretrain_batch_size, len(X)), lr=cfg.lr_pretrain,
                          gammas=cfg.gammas, seed=cfg.seed, betas=cfg.betas)
        trainer = Trainer(cfg, lvsn)
        self.loss_curve_ = []
        for idx in _batch_order(len(X), min(cfg.batch_size, len(X)), cfg.steps, cfg.seed):
            idx = torch.as_tensor(idx)
            self.loss_curve_.append(trainer.train_step(neutral[idx], target[idx], tokens[idx]))
        self.model_ = Model(trainer)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        neutral, texts, _ = self._inputs(X)
        return to_images(self.model_.synthesize(neutral, texts)[2])

    def score(self, X, y) -> float:
        """Mean SSIM between predictions and ``y``."""
        return float(np.mean([ssim(p, t) for p, t in zip(self.predict(X), y)]))
