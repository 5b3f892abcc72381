"""Self-contained property checks run by ``lang2face verify``."""
from __future__ import annotations

import math
import time
from typing import Callable, NamedTuple

import numpy as np
import torch

from . import objectives as obj
from .au_codec import SUPPORTED_AUS, Gender, Protocol, canonical_au, describe_text, parse
from .critics import CriticScore
from .evaluation import fid, ssim
from .generator import word_attention
from .gradcheck import grad_check_suite
from .renderer import IdentityParams, dilate, region_mask, render


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str
    seconds: float


def check_codec(n_random: int = 1000) -> str:
    fails = 0
    for au in SUPPORTED_AUS:
        for k in range(1, 6):
            for g in Gender:
                for p in Protocol:
                    fails += parse(describe_text({au: k}, g, p)) != ({au: k}, g)
    rng = np.random.default_rng(0)
    for _ in range(n_random):
        n = int(rng.integers(2, len(SUPPORTED_AUS) + 1))
        au = {a: int(rng.integers(1, 6)) for a in rng.choice(SUPPORTED_AUS, n, replace=False)}
        g, p = list(Gender)[rng.integers(3)], list(Protocol)[rng.integers(3)]
        fails += parse(describe_text(au, g, p)) != (canonical_au(au), g)
    if fails:
        raise AssertionError(f"{fails} round-trip failures")
    return f"{len(SUPPORTED_AUS) * 45 + n_random} descriptions round-trip"


def check_renderer(n_identities: int = 20, size: int = 64) -> str:
    leaks = nonmono = 0
    for seed in range(n_identities):
        p = IdentityParams.from_seed(seed)
        neutral = render(p, {}, size)
        for au in SUPPORTED_AUS:
            mask = dilate(region_mask(au, size), 2)
            l1 = [0.0]
            for k in range(1, 6):
                img = render(p, {au: k}, size)
                diff = np.abs(img - neutral)
                leaks += int((diff.max(-1) > 0)[~mask].sum())
                l1.append(float(diff.sum()))
            nonmono += sum(a >= b for a, b in zip(l1, l1[1:]))
    if leaks or nonmono:
        raise AssertionError(f"{leaks} leaked pixels, {nonmono} non-monotone steps")
    return f"{n_identities} identities x {len(SUPPORTED_AUS)} AUs x 5 intensities"


def _loop_attention(words, mask, q, proj):
    B, C, H, W = q.shape
    w_hat = proj @ words                                  # B x C x N
    qf = q.reshape(B, C, H * W)
    alpha, beta = np.zeros((B, C, H * W)), np.zeros((B, words.shape[2], H * W))
    for b in range(B):
        for j in range(H * W):
            act = np.nonzero(mask[b])[0]
            e = np.exp(np.array([w_hat[b, :, i] @ qf[b, :, j] for i in act]))
            beta[b, act, j] = e / e.sum()
            alpha[b, :, j] = w_hat[b][:, act] @ beta[b, act, j]
    return alpha.reshape(B, C, H, W), beta


def check_attention(n: int = 1000) -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(n):
        B, D, C, N, H = (int(rng.integers(1, 4)) for _ in range(5))
        N += 1
        words, q, proj = rng.normal(size=(B, D, N)), rng.normal(size=(B, C, H, H)), rng.normal(size=(C, D))
        mask = rng.random((B, N)) < 0.7
        mask[:, 0] = True
        a, b = _loop_attention(words, mask, q, proj)
        out = word_attention(*(torch.from_numpy(x) for x in (words, mask, q, proj)))
        worst = max(worst, np.abs(out.alpha.numpy() - a).max(), np.abs(out.beta.numpy() - b).max())
        if np.abs(out.beta.sum(1).numpy() - 1).max() > 1e-6 or np.any(out.beta.numpy()[~mask] != 0):
            raise AssertionError("attention weights are not a distribution over real words")
    if worst > 1e-6:
        raise AssertionError(f"max deviation from loop oracle {worst:.2e}")
    words = torch.randn(2, 4, 1, dtype=torch.float64)
    proj = torch.randn(3, 4, dtype=torch.float64)
    out = word_attention(words, None, torch.randn(2, 3, 2, 2, dtype=torch.float64), proj)
    w_hat = torch.einsum("cd,bdn->bcn", proj, words)
    if not torch.equal(out.alpha, w_hat[..., None].expand_as(out.alpha)):
        raise AssertionError("single-word attention does not return the projected word")
    return f"{n} instances, max deviation {worst:.1e}"


def check_anchors() -> str:
    half = torch.tensor(0.5, dtype=torch.float64)
    s = CriticScore(half, half)
    fv, adv = float(obj.loss_fv(s, s)), float(obj.loss_adv(s))
    g = obj.loss_g_total([1.0] * 3, [1.0] * 3, [1.0] * 3)
    for name, got, want in (("loss_fv", fv, 2 * math.log(2)), ("loss_adv", adv, math.log(2)),
                            ("loss_g_total", g, 18.015)):
        if abs(got - want) > 1e-9:
            raise AssertionError(f"{name} = {got}, expected {want}")
    return "2 ln 2, ln 2, 18.015"


def check_gradients() -> str:
    reports = grad_check_suite()
    bad = [r for r in reports if not r.ok]
    if bad:
        raise AssertionError(", ".join(f"{r.name} {r.max_rel_error:.2e}" for r in bad))
    return f"max rel error {max(r.max_rel_error for r in reports):.1e} over {len(reports)} functions"


def check_metrics() -> str:
    rng = np.random.default_rng(0)
    x, y = rng.uniform(-1, 1, (32, 32, 3)), rng.uniform(-1, 1, (32, 32, 3))
    if abs(ssim(x, x) - 1) > 1e-6 or abs(ssim(x, y) - ssim(y, x)) > 1e-9:
        raise AssertionError("SSIM self-similarity or symmetry violated")
    board = np.repeat(((np.indices((32, 32)).sum(0) % 2) * 2.0 - 1)[..., None], 3, -1)
    if ssim(board, -board) >= 0:
        raise AssertionError("SSIM of a checkerboard and its inverse is not negative")
    a = rng.normal(size=(10_000, 8))
    delta = np.linspace(-1, 1, 8)
    if fid(a, a) > 1e-3:
        raise AssertionError("FID of identical sets is not ~0")
    shift = fid(a, rng.normal(size=(10_000, 8)) + delta)
    if abs(shift - delta @ delta) > 0.05 * (delta @ delta):
        raise AssertionError(f"Gaussian FID {shift:.4f} vs {delta @ delta:.4f}")
    return f"Gaussian FID {shift:.3f} vs {delta @ delta:.3f}"


CHECKS: dict[str, Callable[[], str]] = {
    "codec_round_trip": check_codec,
    "renderer_locality": check_renderer,
    "attention_oracle": check_attention,
    "loss_anchors": check_anchors,
    "gradients": check_gradients,
    "metric_oracles": check_metrics,
}


def run_all() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        try:
            detail, ok = fn(), True
        except AssertionError as e:
            detail, ok = str(e), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t))
    return results
