"""SSIM / FID metrics, held-out evaluation, ablations and word-manipulation edits."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .au_codec import Gender, Protocol, canonical_au, describe_text, tokenize
from .config import Config
from .renderer import IdentityParams, Manifest, dilate, load_manifest, region_mask, render, save_png
from .trainer import (LVSN, Trainer, file_hash, load_checkpoint, load_split, param_hash, to_images,
                      to_tensor, train_to_end)

logger = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class DegenerateCovariance(ValueError):
    pass


class EditNotApplicable(ValueError):
    pass


# -- metrics -----------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x**2 / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of two H x W x 3 images with values in [-1, 1].

    Images are mapped to [0, 1] (data range L = 1); statistics use a Gaussian
    window without padding and are averaged over windows and channels.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    win = min(window, x.shape[0], x.shape[1])
    w = _gaussian_window(win, sigma)[None, None].repeat(x.shape[2], 1, 1, 1)
    a = torch.from_numpy((x + 1) / 2).permute(2, 0, 1)[None]
    b = torch.from_numpy((y + 1) / 2).permute(2, 0, 1)[None]

    def filt(t):
        return F.conv2d(t, w, groups=t.shape[1])

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = k1**2, k2**2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _psd_sqrt(m: np.ndarray, clip: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.where(vals < clip, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a, features_b, clip: float = 1e-10) -> float:
    """Frechet distance between Gaussian fits of two feature sets (n x d each)."""
    a, b = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets must be n x d with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise DegenerateCovariance("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a, cov_b = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise DegenerateCovariance("non-finite covariance")
    root_a = _psd_sqrt(cov_a, clip)
    middle = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_cross = np.sqrt(np.where(vals < clip, 0.0, vals)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross, 0.0))


# -- model wrapper -----------------------------------------------------------

class Model:
    """Inference wrapper around a trained checkpoint."""

    def __init__(self, trainer: Trainer, checkpoint: Path | None = None):
        self.trainer = trainer
        self.cfg: Config = trainer.cfg
        self.lvsn: LVSN = trainer.lvsn
        self.checkpoint = checkpoint
        trainer.gen.eval()

    @classmethod
    def load(cls, checkpoint) -> "Model":
        return cls(load_checkpoint(checkpoint), Path(checkpoint))

    def hash(self) -> str:
        return param_hash(self.trainer.gen)

    @torch.no_grad()
    def synthesize(self, neutral: torch.Tensor, texts: Sequence[str], noise: torch.Tensor | None = None):
        """Return the three pyramid levels for B neutral images and descriptions."""
        tokens = torch.tensor([tokenize(t, self.lvsn.vocab, self.cfg.n_max) for t in texts])
        text = self.lvsn.text(tokens)
        if noise is None:
            noise = torch.zeros(len(texts), self.cfg.face_channels)
        return self.trainer.gen(neutral, text.words, text.mask, text.sentence, noise).images

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> np.ndarray:
        return self.lvsn.visual(images).pooled.numpy()


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    ssim_mean: float
    fid: float
    n_samples: int
    per_sample: list[dict] = field(repr=False)
    checkpoint_hash: str = ""
    lvsn_hash: str = ""
    manifest_hash: str = ""

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_sample")
        return d

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(out / "per_sample.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "identity", "text", "ssim"])
            w.writeheader()
            w.writerows(self.per_sample)


def evaluate(model: Model | str | Path, manifest, split: str = "test", batch_size: int = 32) -> EvalReport:
    """Synthesize every held-out triple; mean SSIM and VSE-feature FID against targets."""
    model = model if isinstance(model, Model) else Model.load(model)
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    data = load_split(manifest, split, model.lvsn.vocab, model.cfg.n_max)
    fake_feats, real_feats, rows = [], [], []
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        recs = data.records[sl]
        out = model.synthesize(data.neutral[sl], [r["text"] for r in recs])[2]
        fake_feats.append(model.features(out))
        real_feats.append(model.features(data.target[sl]))
        for r, s, t in zip(recs, to_images(out), to_images(data.target[sl])):
            rows.append({"id": r["id"], "identity": r["identity"], "text": r["text"], "ssim": ssim(s, t)})
    return EvalReport(
        ssim_mean=float(np.mean([r["ssim"] for r in rows])),
        fid=fid(np.concatenate(real_feats), np.concatenate(fake_feats)),
        n_samples=len(rows), per_sample=rows, checkpoint_hash=model.hash(),
        lvsn_hash=model.lvsn.hash(), manifest_hash=file_hash(manifest.path))


VARIANTS = {
    "full": {},
    "without_lvm": {"disable_lvm": True},
    "without_attention": {"disable_attention": True},
}


def ablation_matrix(cfg: Config, manifest, lvsn_dir, out_dir, variants: dict = VARIANTS) -> list[dict]:
    """Train and evaluate each variant under the same seed and budget; writes ``table1.csv``."""
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    out = Path(out_dir)
    rows = []
    for name, overrides in variants.items():
        vcfg = Config.from_dict({**cfg.to_dict(), **overrides})
        run = out / name
        ckpt = train_to_end(vcfg, manifest, lvsn_dir, run)
        report = evaluate(ckpt, manifest)
        report.write(run / "eval")
        rows.append({"variant": name, "SSIM": report.ssim_mean, "FID": report.fid, "seed": vcfg.seed,
                     "steps": vcfg.steps, "checkpoint": str(ckpt)})
        logger.info("%s: SSIM %.4f FID %.4f", name, report.ssim_mean, report.fid)
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def table1_ordering_holds(rows: Sequence[dict]) -> bool:
    full = next(r for r in rows if r["variant"] == "full")
    others = [r for r in rows if r["variant"] != "full"]
    return all(full["SSIM"] > r["SSIM"] and full["FID"] < r["FID"] for r in others)


# -- manipulation ------------------------------------------------------------

@dataclass(frozen=True)
class EditSpec:
    kind: str            # adverb_swap | phrase_remove | phrase_add
    au: str
    new_intensity: int | None = None

    def apply(self, au: dict) -> dict:
        au = dict(canonical_au(au))
        active = self.au in au
        if self.kind == "adverb_swap":
            if not active or self.new_intensity in (None, au[self.au]):
                raise EditNotApplicable(f"cannot swap the adverb of {self.au} in {au}")
            au[self.au] = self.new_intensity
        elif self.kind == "phrase_remove":
            if not active:
                raise EditNotApplicable(f"{self.au} is not in {au}")
            del au[self.au]
        elif self.kind == "phrase_add":
            if active or not self.new_intensity:
                raise EditNotApplicable(f"cannot add {self.au} to {au}")
            au[self.au] = self.new_intensity
        else:
            raise EditNotApplicable(f"unknown edit kind {self.kind!r}")
        return canonical_au(au)


@dataclass
class ManipulationResult:
    sample_id: str
    edit: EditSpec
    original_text: str
    edited_text: str
    locality: float
    consistency: float
    grid: np.ndarray = field(repr=False)


def locality_score(before: np.ndarray, after: np.ndarray, au: str, dilation: int = 2) -> float:
    """Fraction of absolute pixel change that falls inside the AU's dilated region mask."""
    change = np.abs(after - before).sum(-1)
    total = change.sum()
    if total == 0:
        return 1.0
    mask = dilate(region_mask(au, before.shape[0]), dilation)
    return float(change[mask].sum() / total)


def manipulate(model: Model, manifest: Manifest, record: dict, edit: EditSpec,
               out_png: str | Path | None = None) -> ManipulationResult:
    edited_au = edit.apply(record["au"])
    gender, protocol = Gender(record["gender"]), Protocol(record["protocol"])
    edited_text = describe_text(edited_au, gender, protocol)
    neutral = to_tensor([manifest.image(record, "neutral")])
    texts = [record["text"], edited_text]
    before, after = to_images(model.synthesize(neutral.expand(2, -1, -1, -1), texts)[2])
    identity = IdentityParams.from_seed(record["identity_seed"])
    size = before.shape[0]
    target_orig = render(identity, record["au"], size)
    target_edit = render(identity, edited_au, size)
    consistency = float(np.abs(after - target_edit).mean() - np.abs(after - target_orig).mean())
    grid = np.concatenate([to_images(neutral)[0], before, after, target_orig, target_edit], axis=1)
    if out_png is not None:
        save_png(grid, out_png)
    return ManipulationResult(record["id"], edit, record["text"], edited_text,
                              locality_score(before, after, edit.au), consistency, grid)


def edit_cases(records: Sequence[dict], n: int) -> list[tuple[dict, EditSpec]]:
    """Single-AU adverb swaps (to the far end of the ladder) and phrase removals."""
    cases = []
    for i, r in enumerate(records):
        aus = list(r["au"])
        au = aus[i % len(aus)]
        k = r["au"][au]
        if i % 2 == 0:
            cases.append((r, EditSpec("adverb_swap", au, 1 if k >= 3 else 5)))
        else:
            cases.append((r, EditSpec("phrase_remove", au)))
        if len(cases) >= n:
            break
    return cases


def manipulation_suite(model: Model | str | Path, manifest, n_cases: int = 60, out_dir=None) -> dict:
    model = model if isinstance(model, Model) else Model.load(model)
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    rows = []
    for j, (rec, edit) in enumerate(edit_cases(manifest.split("test"), n_cases)):
        png = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            png = Path(out_dir) / f"{rec['id']}_{edit.kind}_{edit.au}.png"
        res = manipulate(model, manifest, rec, edit, png)
        rows.append({"id": rec["id"], "kind": edit.kind, "au": edit.au, "new_intensity": edit.new_intensity,
                     "locality": res.locality, "consistency": res.consistency})
    loc = np.array([r["locality"] for r in rows])
    con = np.array([r["consistency"] for r in rows])
    summary = {"n_cases": len(rows), "median_locality": float(np.median(loc)),
               "fraction_consistent": float(np.mean(con < 0)), "rows": rows}
    if out_dir is not None:
        with open(Path(out_dir) / "manipulation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return summary
