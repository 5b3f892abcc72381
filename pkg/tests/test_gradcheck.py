import pytest
import torch

from lang2face.gradcheck import CASES, max_relative_error, run_case


@pytest.mark.parametrize("name", list(CASES))
def test_case_passes(name):
    r = run_case(name)
    assert r.n_checked > 0
    assert r.max_rel_error <= 1e-4, r


class _BadSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.1 * x   # off by 5%


def test_harness_catches_wrong_backward():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    err, n = max_relative_error(lambda t: _BadSquare.apply(t).sum(), [x])
    assert n == 3 and err > 1e-2
    ok, _ = max_relative_error(lambda t: (t * t).sum(), [x])
    assert ok < 1e-8
