"""Central-difference gradient checks for the custom layers and losses."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import torch

from . import objectives as obj
from .critics import CriticScore
from .generator import ConditioningAugmentation, FaceEncoder, word_attention
from .lvsn import VisualFeatures, WordFeatures, matching_loss


class GradReport(NamedTuple):
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-4


def max_relative_error(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                       h: float = 1e-5, floor: float = 1e-6) -> tuple[float, int]:
    """Compare autograd with central differences for every element of every input.

    ``fn`` maps the inputs to a scalar.  Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    worst, count = 0.0, 0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            g = torch.zeros_like(x) if g is None else g
            flat, gflat = x.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = gflat[i].item()
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
                count += 1
    return worst, count


def _rand(g, *shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _scores(g, *shape):
    return 0.05 + 0.9 * torch.rand(*shape, generator=g, dtype=torch.float64)


def _case_attention(g):
    words, q, proj = _rand(g, 2, 3, 4), _rand(g, 2, 5, 2, 2), _rand(g, 5, 3) * 0.5
    mask = torch.tensor([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=torch.bool)
    probe = _rand(g, 2, 5, 2, 2)

    def fn(w, qq, p):
        return (word_attention(w, mask, qq, p).alpha * probe).sum()
    return fn, [words, q, proj]


def _case_condition_augment(g):
    torch.manual_seed(0)
    ca = ConditioningAugmentation(6, 4).double()
    noise, probe = _rand(g, 3, 4), _rand(g, 3, 4, 2, 2)
    names = [n for n, _ in ca.named_parameters()]

    def fn(sentence, *params):
        out = torch.func.functional_call(ca, dict(zip(names, params)), (sentence, noise))
        return (out.tiled * probe).sum()
    return fn, [_rand(g, 3, 6)] + [p.detach() for p in ca.parameters()]


def _case_matching(g):
    B, D, N, R = 3, 8, 4, 4
    mask = torch.tensor([[1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 0, 0]], dtype=torch.bool)

    def fn(words, sentence, regions, pooled):
        return matching_loss(WordFeatures(words, sentence, mask), VisualFeatures(regions, pooled)).total
    return fn, [_rand(g, B, D, N), _rand(g, B, D), _rand(g, B, D, R), _rand(g, B, D)]


def _case_fv(g):
    def fn(ru, rc, fu, fc):
        return obj.loss_fv(CriticScore(ru, rc), CriticScore(fu, fc))
    return fn, [_scores(g, 4) for _ in range(4)]


def _case_ev(g):
    def fn(ru, rc, fu, fc):
        return obj.loss_ev(CriticScore(ru, rc), CriticScore(fu, fc))
    return fn, [_scores(g, 4) for _ in range(4)]


def _case_adv(g):
    def fn(u, c):
        return obj.loss_adv(CriticScore(u, c))
    return fn, [_scores(g, 4), _scores(g, 4)]


def _case_identity(g):
    torch.manual_seed(0)
    enc = FaceEncoder(8, 4).double()

    def fn(target, synth):
        return obj.loss_identity(target, synth, enc)
    return fn, [_rand(g, 2, 3, 8, 8), _rand(g, 2, 3, 8, 8)]


def _case_recon(g):
    def fn(target, synth):
        return obj.loss_recon(target, synth)
    return fn, [_rand(g, 2, 3, 4, 4), _rand(g, 2, 3, 4, 4)]


CASES = {
    "word_attention": _case_attention,
    "condition_augment": _case_condition_augment,
    "matching_loss": _case_matching,
    "loss_fv": _case_fv,
    "loss_ev": _case_ev,
    "loss_adv": _case_adv,
    "loss_id": _case_identity,
    "loss_recon": _case_recon,
}


def run_case(name: str, seed: int = 0) -> GradReport:
    fn, inputs = CASES[name](torch.Generator().manual_seed(seed))
    err, n = max_relative_error(fn, inputs)
    return GradReport(name, err, n)


def grad_check_suite(seed: int = 0) -> list[GradReport]:
    return [run_case(name, seed) for name in CASES]
