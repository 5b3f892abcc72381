import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lang2face import objectives as obj
from lang2face.config import LossWeights
from lang2face.critics import CriticLogits, CriticScore

LN2 = math.log(2)
t64 = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


def score(u, c):
    return CriticScore(t64(u), t64(c))


def test_fv_uniform():
    assert float(obj.loss_fv(score(0.5, 0.5), score(0.5, 0.5))) == pytest.approx(2 * LN2, abs=1e-12)


def test_fv_mixed():
    val = float(obj.loss_fv(score(0.8, 0.8), score(0.3, 0.3)))
    assert val == pytest.approx(-(math.log(0.8) + math.log(0.7)), abs=1e-12)
    assert val == pytest.approx(0.579818, abs=1e-6)


def test_fv_perfect_critic_limit():
    val = float(obj.loss_fv(score(1 - 1e-12, 1 - 1e-12), score(1e-12, 1e-12)))
    assert 0 < val < 1e-9


def test_ev_same_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r, f = rng.uniform(0.01, 0.99, (2, 2, 5))
        real, fake = CriticScore(*torch.from_numpy(r)), CriticScore(*torch.from_numpy(f))
        assert float(obj.loss_ev(real, fake)) == float(obj.loss_fv(real, fake))
    assert float(obj.loss_ev(score(0.5, 0.5), score(0.5, 0.5))) == pytest.approx(2 * LN2, abs=1e-12)


def test_adv_values():
    assert float(obj.loss_adv(score(0.5, 0.5))) == pytest.approx(LN2, abs=1e-12)
    assert float(obj.loss_adv(score(0.9, 0.6))) == pytest.approx(0.308094, abs=1e-6)
    assert 0 < float(obj.loss_adv(score(1 - 1e-12, 1 - 1e-12))) < 1e-9


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.5, -0.2])
def test_domain_errors(bad):
    with pytest.raises(obj.DomainError):
        obj.loss_fv(score(bad, 0.5), score(0.5, 0.5))
    with pytest.raises(obj.DomainError):
        obj.loss_adv(score(0.5, bad))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=4, max_size=4))
def test_logit_twins_match(v):
    lg = [t64(x) for x in v]
    real, fake = CriticLogits(lg[0], lg[1]), CriticLogits(lg[2], lg[3])
    assert float(obj.loss_fv_logits(real, fake)) == pytest.approx(
        float(obj.loss_fv(real.scores(), fake.scores())), rel=1e-9, abs=1e-12)
    assert float(obj.loss_adv_logits(fake)) == pytest.approx(float(obj.loss_adv(fake.scores())),
                                                             rel=1e-9, abs=1e-12)


def test_d_total():
    two = 2 * LN2
    assert float(obj.loss_d_total(two, [two, two], [two, two])) == pytest.approx(5 * two, abs=1e-12)
    assert 5 * two == pytest.approx(6.931, abs=1e-3)
    assert obj.loss_d_total(0.0, [0.0, 0.0], [0.0, 0.0]) == 0
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.random(5)
        assert obj.loss_d_total(v[0], v[1:3], v[3:5]) == pytest.approx(v.sum(), abs=1e-9)


def test_identity_loss():
    def stub(x):
        # 2-pixel feature: mean of channel 0 and max of channel 1
        return torch.stack([x[:, 0].mean((1, 2)), x[:, 1].amax((1, 2))], 1)

    a = torch.zeros(1, 3, 2, 1, dtype=torch.float64)
    b = a.clone()
    b[0, 0, 0, 0] = 1.0
    b[0, 1, 1, 0] = 3.0
    assert float(obj.loss_identity(a, a, stub)) == 0
    # features (0, 0) vs (0.5, 3) -> mean((0.25, 9))
    assert float(obj.loss_identity(a, b, stub)) == pytest.approx(4.625)
    assert float(obj.loss_identity(a, b, stub)) == float(obj.loss_identity(b, a, stub))


def test_identity_resizes_input():
    seen = []
    obj.loss_identity(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16),
                      lambda x: seen.append(x.shape[-1]) or x.mean(), input_size=64)
    assert seen == [64, 64]


def test_recon():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    assert float(obj.loss_recon(x, x)) == 0
    assert float(obj.loss_recon(x, x + 0.37)) == pytest.approx(0.37, abs=1e-12)
    assert float(obj.loss_recon(x, x - 2)) == pytest.approx(2, abs=1e-12)
    y = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    brute = sum(abs(a - b) for a, b in zip(x.flatten().tolist(), y.flatten().tolist())) / x.numel()
    assert float(obj.loss_recon(x, y)) == pytest.approx(brute, abs=1e-12)


def test_g_total():
    assert LossWeights().adv == 1 and LossWeights().identity == 5 and LossWeights().recon == 0.005
    assert obj.loss_g_total([1] * 3, [1] * 3, [1] * 3) == pytest.approx(18.015, abs=1e-9)
    assert obj.loss_g_total([0] * 3, [0] * 3, [0] * 3) == 0
    rng = np.random.default_rng(1)
    w = LossWeights(adv=0.7, identity=2.0, recon=0.1)
    for _ in range(50):
        a, i, r = rng.random((3, 3))
        expected = sum(0.7 * a[m] + 2.0 * i[m] + 0.1 * r[m] for m in range(3))
        assert obj.loss_g_total(a, i, r, w) == pytest.approx(expected, abs=1e-9)


def test_total():
    assert obj.loss_total(1, 2, 3) == 6
    assert obj.loss_total(0, 0, 0) == 0


def test_check_report():
    rep = {k: 0.0 for k in obj.REPORT_KEYS}
    rep.update(L_LVM=1.0, L_FV1=0.5, L_syn=0.25, L_D_total=0.75, L_adv3=2.0, L_G_total=2.0, total=3.75)
    obj.check_report(rep)
    rep["total"] = 4.0
    with pytest.raises(AssertionError):
        obj.check_report(rep)
