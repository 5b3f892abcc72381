import csv

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from lang2face.au_codec import describe_text, parse
from lang2face.evaluation import (VARIANTS, DegenerateCovariance, EditNotApplicable, EditSpec, Model,
                                  ShapeMismatch, ablation_matrix, edit_cases, evaluate, fid, locality_score,
                                  manipulate, manipulation_suite, ssim, table1_ordering_holds)
from lang2face.renderer import IdentityParams, region_mask, render
from lang2face.trainer import train_to_end

from conftest import tiny_config


def rand_img(seed, size=24):
    return np.random.default_rng(seed).uniform(-1, 1, (size, size, 3))


def skimage_ssim(x, y):
    return structural_similarity((x + 1) / 2, (y + 1) / 2, data_range=1.0, channel_axis=-1,
                                 gaussian_weights=True, sigma=1.5, use_sample_covariance=False)


def test_ssim_self_and_symmetry():
    x, y = rand_img(0), rand_img(1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert abs(ssim(x, y) - ssim(y, x)) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference(seed):
    x = rand_img(seed, 32)
    y = np.clip(x + np.random.default_rng(seed + 10).normal(0, 0.3, x.shape), -1, 1)
    assert ssim(x, y) == pytest.approx(skimage_ssim(x, y), abs=1e-6)


def test_ssim_on_faces_matches_reference():
    p = IdentityParams.from_seed(4)
    a, b = render(p, {}), render(p, {"AU26": 5, "AU12": 3})
    assert ssim(a, b) == pytest.approx(skimage_ssim(a.astype(np.float64), b.astype(np.float64)), abs=1e-6)


def test_ssim_checkerboard_negative():
    board = (np.indices((32, 32)).sum(0) % 2).astype(float) * 2 - 1
    x = np.repeat(board[..., None], 3, -1)
    assert ssim(x, -x) < 0


def test_ssim_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ssim(rand_img(0, 24), rand_img(0, 32))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_bounded_symmetric(seed):
    x, y = rand_img(seed, 16), rand_img(seed + 1, 16)
    s = ssim(x, y)
    assert -1 <= s <= 1 and abs(s - ssim(y, x)) <= 1e-9


def test_fid_identical():
    a = np.random.default_rng(0).normal(size=(500, 8))
    assert fid(a, a) <= 1e-3


def test_fid_gaussian_shift():
    rng = np.random.default_rng(1)
    delta = np.array([1.0, -0.5, 0.5, 2.0, 0.0, 0.3, -1.0, 0.7])
    a = rng.normal(size=(10_000, 8))
    b = rng.normal(size=(10_000, 8)) + delta
    assert fid(a, b) == pytest.approx(delta @ delta, rel=0.05)


def _fid_oracle(a, b):
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(ca @ cb).real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(ca + cb - 2 * covmean))


@pytest.mark.parametrize("seed", range(4))
def test_fid_matches_sqrtm_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    b = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6)
    assert fid(a, b) == pytest.approx(_fid_oracle(a, b), rel=1e-6)
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6 * max(1, fid(a, b))


def test_fid_rank_deficient():
    rng = np.random.default_rng(0)
    a = np.zeros((50, 4))
    a[:, :2] = rng.normal(size=(50, 2))
    b = a + 0.1
    assert np.isfinite(fid(a, b)) and fid(a, b) == pytest.approx(0.04, abs=1e-6)


def test_fid_errors():
    with pytest.raises(DegenerateCovariance):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ShapeMismatch):
        fid(np.zeros((5, 3)), np.zeros((5, 4)))


def test_edit_spec():
    au = {"AU9": 5, "AU25": 2}
    assert EditSpec("adverb_swap", "AU9", 1).apply(au) == {"AU9": 1, "AU25": 2}
    assert EditSpec("phrase_remove", "AU25").apply(au) == {"AU9": 5}
    assert EditSpec("phrase_add", "AU1", 3).apply(au) == {"AU1": 3, "AU9": 5, "AU25": 2}
    for bad in (EditSpec("adverb_swap", "AU1", 2), EditSpec("adverb_swap", "AU9", 5),
                EditSpec("phrase_remove", "AU1"), EditSpec("phrase_add", "AU9", 2), EditSpec("twist", "AU9")):
        with pytest.raises(EditNotApplicable):
            bad.apply(au)


def test_remove_only_au_gives_neutral():
    edited = EditSpec("phrase_remove", "AU26").apply({"AU26": 4})
    assert edited == {}
    assert describe_text(edited, "female", "P1") == "She keeps a neutral face ."
    p = IdentityParams.from_seed(0)
    assert np.array_equal(render(p, edited), render(p, {}))


def test_nose_swap_oracle_shrinks():
    p = IdentityParams.from_seed(2)
    neutral = render(p, {})
    before = np.abs(render(p, {"AU9": 5}) - neutral).sum()
    after = np.abs(render(p, EditSpec("adverb_swap", "AU9", 1).apply({"AU9": 5})) - neutral).sum()
    assert after < before


def test_locality_score():
    p = IdentityParams.from_seed(1)
    a, b = render(p, {"AU26": 1}), render(p, {"AU26": 5})
    assert locality_score(a, b, "AU26") == 1.0
    assert locality_score(a, a, "AU26") == 1.0
    noise = b + (1 - region_mask("AU26"))[..., None] * 0.5
    assert locality_score(a, noise, "AU26") < 0.5


def test_edit_cases_are_single_au_and_valid(tiny_manifest):
    cases = edit_cases(tiny_manifest.split("test"), 50)
    assert cases
    for rec, edit in cases:
        assert edit.kind in ("adverb_swap", "phrase_remove")
        edit.apply(rec["au"])


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, tiny_manifest, tiny_lvsn_dir):
    return train_to_end(tiny_config(), tiny_manifest, tiny_lvsn_dir, tmp_path_factory.mktemp("run"))


def test_evaluate_deterministic(tiny_ckpt, tiny_manifest, tmp_path):
    a, b = evaluate(tiny_ckpt, tiny_manifest), evaluate(tiny_ckpt, tiny_manifest)
    assert a == b
    assert a.n_samples == len(tiny_manifest.split("test"))
    assert -1 <= a.ssim_mean <= 1 and a.fid >= 0
    a.write(tmp_path)
    assert (tmp_path / "summary.json").exists()
    with open(tmp_path / "per_sample.csv") as fh:
        assert len(list(csv.DictReader(fh))) == a.n_samples


def test_synthesize_zero_noise_default(tiny_ckpt, tiny_manifest):
    m = Model.load(tiny_ckpt)
    rec = tiny_manifest.split("test")[0]
    neutral = torch.from_numpy(tiny_manifest.image(rec, "neutral")).permute(2, 0, 1)[None]
    a = m.synthesize(neutral, [rec["text"]])
    b = m.synthesize(neutral, [rec["text"]], torch.zeros(1, m.cfg.face_channels))
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert [x.shape[-1] for x in a] == list(m.cfg.sizes)


def test_manipulate_grid(tiny_ckpt, tiny_manifest, tmp_path):
    m = Model.load(tiny_ckpt)
    rec = tiny_manifest.split("test")[0]
    au = next(iter(rec["au"]))
    res = manipulate(m, tiny_manifest, rec, EditSpec("phrase_remove", au), tmp_path / "g.png")
    assert res.grid.shape == (32, 5 * 32, 3)
    assert (tmp_path / "g.png").exists()
    assert parse(res.edited_text)[0] == EditSpec("phrase_remove", au).apply(rec["au"])
    assert 0 <= res.locality <= 1
    summary = manipulation_suite(m, tiny_manifest, n_cases=4, out_dir=tmp_path / "suite")
    assert summary["n_cases"] == 4 and (tmp_path / "suite/manipulation.csv").exists()


def test_ablation_matrix_shape(tmp_path, tiny_manifest, tiny_lvsn_dir):
    rows = ablation_matrix(tiny_config(steps=3), tiny_manifest, tiny_lvsn_dir, tmp_path)
    assert [r["variant"] for r in rows] == list(VARIANTS)
    assert len({r["seed"] for r in rows}) == 1 and len({r["steps"] for r in rows}) == 1
    with open(tmp_path / "table1.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 3 and {"SSIM", "FID"} <= set(table[0])
    assert isinstance(table1_ordering_holds(rows), bool)


def test_table1_ordering_logic():
    rows = [{"variant": "full", "SSIM": 0.8, "FID": 1.0}, {"variant": "a", "SSIM": 0.7, "FID": 2.0},
            {"variant": "b", "SSIM": 0.75, "FID": 1.5}]
    assert table1_ordering_holds(rows)
    rows[2]["FID"] = 0.9
    assert not table1_ordering_holds(rows)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["AU1", "AU2", "AU4", "AU5", "AU9", "AU12", "AU25", "AU26"]),
                       st.integers(1, 5), min_size=1, max_size=4), st.data())
def test_remove_then_add_restores_description(au, data):
    target = data.draw(st.sampled_from(sorted(au)))
    g, p = data.draw(st.sampled_from(["male", "female", "unspecified"])), data.draw(st.sampled_from(["P1", "P2", "P3"]))
    removed = EditSpec("phrase_remove", target).apply(au)
    restored = EditSpec("phrase_add", target, au[target]).apply(removed)
    assert describe_text(restored, g, p) == describe_text(au, g, p)
