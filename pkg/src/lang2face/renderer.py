"""Procedural cartoon faces with AU-driven deformations.

Faces are built from a handful of anti-aliased primitives on the unit square
(x to the right, y downward).  Every supported AU moves or draws only its own
primitives, which is what makes :func:`region_mask` an exact locality oracle.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .au_codec import (SUPPORTED_AUS, Gender, Protocol, canonical_au, describe_text, parse,
                       UnsupportedAU)

# identity parameter ranges, in unit-square coordinates
RANGES = {
    "face_width": (0.58, 0.68),
    "face_height": (0.74, 0.82),
    "eye_spacing": (0.23, 0.27),
    "mouth_width": (0.26, 0.32),
    "brow_thickness": (0.018, 0.028),
    "skin_r": (0.25, 0.85),
    "skin_g": (-0.05, 0.5),
    "skin_b": (-0.4, 0.2),
}

BACKGROUND = np.array([-0.55, -0.5, -0.35])
INK = np.array([-0.85, -0.85, -0.8])
SCLERA = np.array([0.95, 0.95, 0.95])
PUPIL = np.array([-0.9, -0.85, -0.6])
LIP = np.array([0.45, -0.65, -0.55])
MOUTH = np.array([-0.6, -0.95, -0.9])
CREASE = np.array([-0.55, -0.7, -0.75])

CX, CY = 0.5, 0.5
EYE_Y = 0.44
EYE_RX, EYE_RY = 0.045, 0.02
EYE_OPEN = 0.025
PUPIL_R = 0.012
BROW_Y = 0.34
BROW_RAISE = 0.045
BROW_INNER = (0.055, 0.11)   # x offsets from the centre line
BROW_OUTER = (0.14, 0.195)
FURROW_X, FURROW_W, FURROW_BOTTOM = 0.012, 0.008, 0.405
CREASE_YS = (0.475, 0.495, 0.515)
CREASE_T = 0.008
MOUTH_Y = 0.67
LIP_T = 0.012
MOUTH_HALF = 0.06
CORNER_START = 0.09
CORNER_LIFT = 0.05
DIMPLE_GAP, DIMPLE_W = 0.012, 0.01
LIP_PART = 0.04
JAW_LIP_DROP = 0.025
CHIN_OFFSET = 0.11
CHIN_HALF = 0.08
CHIN_T = 0.01
CHIN_DROP = 0.04

MASK_MARGIN_PX = 0.75


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class IdentityParams:
    face_width: float
    face_height: float
    eye_spacing: float
    mouth_width: float
    brow_thickness: float
    skin_tone: tuple[float, float, float]
    seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "IdentityParams":
        rng = np.random.default_rng(seed)
        v = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in RANGES.items()}
        skin = (v.pop("skin_r"), v.pop("skin_g"), v.pop("skin_b"))
        return cls(skin_tone=skin, seed=int(seed), **v)

    def validate(self):
        for k, (lo, hi) in RANGES.items():
            value = self.skin_tone["rgb".index(k[-1])] if k.startswith("skin") else getattr(self, k)
            if not lo <= value <= hi:
                raise RenderError(f"{k}={value} outside [{lo}, {hi}]")


def gender_for_seed(seed: int) -> Gender:
    return list(Gender)[int(np.random.default_rng([seed, 1]).integers(3))]


class _Canvas:
    def __init__(self, size: int):
        self.size = size
        c = (np.arange(size) + 0.5) / size
        self.x = c[None, :]
        self.y = c[:, None]
        self.img = np.broadcast_to(BACKGROUND, (size, size, 3)).copy()

    def _aa(self, d):
        # d: signed distance, positive inside, unit-square units
        return np.clip(0.5 + d * self.size, 0.0, 1.0)

    def paint(self, cover, color, alpha=1.0):
        a = (cover * alpha)[..., None]
        self.img = self.img * (1 - a) + np.asarray(color) * a

    def ellipse(self, cx, cy, rx, ry_top, ry_bottom=None):
        ry = np.where(self.y < cy, ry_top, ry_top if ry_bottom is None else ry_bottom)
        dx, dy = self.x - cx, self.y - cy
        q = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
        grad = np.sqrt((dx / rx**2) ** 2 + (dy / ry**2) ** 2)
        d = np.where(grad > 0, (1 - q) * q / np.maximum(grad, 1e-12), min(rx, ry_top))
        return self._aa(d)

    def rect(self, x0, y0, x1, y1):
        dx = np.minimum(self.x - x0, x1 - self.x)
        dy = np.minimum(self.y - y0, y1 - self.y)
        return self._aa(dx) * self._aa(dy)

    def band(self, x0, x1, y0, y1, t):
        """Stroke of vertical thickness ``t`` from (x0, y0) to (x1, y1), flat ends."""
        if x1 < x0:
            x0, x1, y0, y1 = x1, x0, y1, y0
        s = np.clip((self.x - x0) / (x1 - x0), 0, 1)
        yc = y0 + s * (y1 - y0)
        return self._aa(t / 2 - np.abs(self.y - yc)) * self._aa(np.minimum(self.x - x0, x1 - self.x))


def render(identity: IdentityParams, au: Mapping[str, int] | None = None, size: int = 64) -> np.ndarray:
    """Render ``identity`` showing ``au`` as a ``size x size x 3`` array in [-1, 1]."""
    au = canonical_au(au or {})
    k = {a: au.get(a, 0) / 5.0 for a in SUPPORTED_AUS}
    p = identity
    cv = _Canvas(size)
    half_h = p.face_height / 2

    cv.paint(cv.ellipse(CX, CY, p.face_width / 2, half_h), p.skin_tone)
    skin = np.asarray(p.skin_tone)
    shade = skin * 0.5 - 0.4

    # chin line (AU26 drops it)
    chin_y = CY + half_h - CHIN_OFFSET + CHIN_DROP * k["AU26"]
    cv.paint(cv.band(CX - CHIN_HALF, CX + CHIN_HALF, chin_y, chin_y, CHIN_T), shade)

    # nose (neutral geometry)
    cv.paint(cv.rect(CX - 0.005, 0.46, CX + 0.005, 0.58), shade)
    cv.paint(cv.rect(CX - 0.03, 0.575, CX + 0.03, 0.585), shade)

    # mouth: AU25 parts the lips, AU26 lowers the lower lip, AU12 lifts the corners
    upper = MOUTH_Y - LIP_PART / 2 * k["AU25"]
    lower = MOUTH_Y + LIP_PART / 2 * k["AU25"] + JAW_LIP_DROP * k["AU26"]
    if lower > upper:
        cv.paint(cv.rect(CX - MOUTH_HALF, upper, CX + MOUTH_HALF, lower), MOUTH)
    cv.paint(cv.band(CX - MOUTH_HALF, CX + MOUTH_HALF, upper, upper, LIP_T), LIP)
    cv.paint(cv.band(CX - MOUTH_HALF, CX + MOUTH_HALF, lower, lower, LIP_T), LIP)
    lift = MOUTH_Y - CORNER_LIFT * k["AU12"]
    for s in (-1, 1):
        cv.paint(cv.band(CX + s * CORNER_START, CX + s * p.mouth_width / 2, MOUTH_Y, lift, LIP_T), LIP)
        if k["AU12"]:
            xd = CX + s * (p.mouth_width / 2 + DIMPLE_GAP)
            h = 0.01 + 0.03 * k["AU12"]
            cv.paint(cv.rect(xd - DIMPLE_W / 2, lift - h, xd + DIMPLE_W / 2, lift + 0.005),
                     CREASE, 0.3 + 0.7 * k["AU12"])

    # eyes: AU5 raises the upper lid
    ex = p.eye_spacing / 2
    for s in (-1, 1):
        cv.paint(cv.ellipse(CX + s * ex, EYE_Y, EYE_RX, EYE_RY + EYE_OPEN * k["AU5"], EYE_RY), SCLERA)
        cv.paint(cv.ellipse(CX + s * ex, EYE_Y, PUPIL_R, PUPIL_R), PUPIL)

    # brows: AU1 lifts the inner strokes, AU2 the outer strokes
    t = p.brow_thickness
    for s in (-1, 1):
        xi0, xi1 = CX + s * BROW_INNER[0], CX + s * BROW_INNER[1]
        cv.paint(cv.band(xi0, xi1, BROW_Y - BROW_RAISE * k["AU1"], BROW_Y, t), INK)
        xo0, xo1 = CX + s * BROW_OUTER[0], CX + s * BROW_OUTER[1]
        cv.paint(cv.band(xo0, xo1, BROW_Y, BROW_Y - BROW_RAISE * k["AU2"], t), INK)

    # AU4: vertical furrows between the brows, longer and darker with intensity
    if k["AU4"]:
        length = 0.015 + 0.055 * k["AU4"]
        for s in (-1, 1):
            x0 = CX + s * FURROW_X - FURROW_W / 2
            cv.paint(cv.rect(x0, FURROW_BOTTOM - length, x0 + FURROW_W, FURROW_BOTTOM),
                     CREASE, 0.35 + 0.65 * k["AU4"])

    # AU9: creases across the nose bridge, count and darkness grow with intensity
    if k["AU9"]:
        n = 1 + (au["AU9"] - 1) // 2
        half_w = 0.015 + 0.015 * k["AU9"]
        for y in CREASE_YS[:n]:
            cv.paint(cv.rect(CX - half_w, y - CREASE_T / 2, CX + half_w, y + CREASE_T / 2),
                     CREASE, 0.3 + 0.7 * k["AU9"])

    return np.clip(cv.img, -1.0, 1.0).astype(np.float32)


def _mask_boxes(au: str) -> list[tuple[float, float, float, float]]:
    """Conservative (x0, y0, x1, y1) boxes covering every pixel ``au`` can alter."""
    t_brow = RANGES["brow_thickness"][1] / 2
    ex_lo, ex_hi = (v / 2 for v in RANGES["eye_spacing"])
    fh_lo, fh_hi = (v / 2 for v in RANGES["face_height"])
    mw_hi = RANGES["mouth_width"][1] / 2
    boxes = []
    if au in ("AU1", "AU2"):
        a, b = BROW_INNER if au == "AU1" else BROW_OUTER
        y0, y1 = BROW_Y - BROW_RAISE - t_brow, BROW_Y + t_brow
        boxes = [(CX + a, y0, CX + b, y1), (CX - b, y0, CX - a, y1)]
    elif au == "AU4":
        boxes = [(CX - FURROW_X - FURROW_W / 2, FURROW_BOTTOM - 0.07,
                  CX + FURROW_X + FURROW_W / 2, FURROW_BOTTOM)]
    elif au == "AU5":
        y0 = EYE_Y - EYE_RY - EYE_OPEN
        boxes = [(CX + ex_lo - EYE_RX, y0, CX + ex_hi + EYE_RX, EYE_Y),
                 (CX - ex_hi - EYE_RX, y0, CX - ex_lo + EYE_RX, EYE_Y)]
    elif au == "AU9":
        boxes = [(CX - 0.03, CREASE_YS[0] - CREASE_T / 2, CX + 0.03, CREASE_YS[-1] + CREASE_T / 2)]
    elif au == "AU12":
        y0, y1 = MOUTH_Y - CORNER_LIFT - 0.04, MOUTH_Y + LIP_T / 2
        x1 = mw_hi + DIMPLE_GAP + DIMPLE_W / 2
        boxes = [(CX + CORNER_START, y0, CX + x1, y1), (CX - x1, y0, CX - CORNER_START, y1)]
    elif au == "AU25":
        boxes = [(CX - MOUTH_HALF, MOUTH_Y - LIP_PART / 2 - LIP_T / 2,
                  CX + MOUTH_HALF, MOUTH_Y + LIP_PART / 2 + JAW_LIP_DROP + LIP_T / 2)]
    elif au == "AU26":
        boxes = [(CX - MOUTH_HALF, MOUTH_Y - LIP_T / 2,
                  CX + MOUTH_HALF, MOUTH_Y + LIP_PART / 2 + JAW_LIP_DROP + LIP_T / 2),
                 (CX - CHIN_HALF, CY + fh_lo - CHIN_OFFSET - CHIN_T / 2,
                  CX + CHIN_HALF, CY + fh_hi - CHIN_OFFSET + CHIN_DROP + CHIN_T / 2)]
    else:
        raise UnsupportedAU(f"unsupported action unit {au!r}")
    return boxes


def region_mask(au: str, size: int = 64) -> np.ndarray:
    """Boolean ``size x size`` mask of pixels that ``au`` may change for any identity."""
    c = (np.arange(size) + 0.5) / size
    m = MASK_MARGIN_PX / size
    mask = np.zeros((size, size), dtype=bool)
    for x0, y0, x1, y1 in _mask_boxes(au):
        mask |= ((c[:, None] >= y0 - m) & (c[:, None] <= y1 + m)
                 & (c[None, :] >= x0 - m) & (c[None, :] <= x1 + m))
    return mask


def dilate(mask: np.ndarray, px: int = 2) -> np.ndarray:
    """Square (Chebyshev) dilation by ``px`` pixels."""
    out = mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, px)
    for dy in range(-px, px + 1):
        for dx in range(-px, px + 1):
            out |= padded[px + dy:px + dy + h, px + dx:px + dx + w]
    return out


def face_bbox(identity: IdentityParams) -> tuple[float, float, float, float]:
    return (CX - identity.face_width / 2, CY - identity.face_height / 2,
            CX + identity.face_width / 2, CY + identity.face_height / 2)


# -- images on disk --------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


# -- dataset ---------------------------------------------------------------

@dataclass
class Manifest:
    path: Path
    records: list[dict]

    @property
    def root(self) -> Path:
        return self.path.parent

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def image(self, record: dict, which: str) -> np.ndarray:
        return load_png(self.root / record[f"{which}_path"])


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return Manifest(path, records)


def sample_au(rng: np.random.Generator, max_active: int = 3) -> dict[str, int]:
    n = int(rng.integers(1, max_active + 1))
    keys = rng.choice(len(SUPPORTED_AUS), size=n, replace=False)
    return canonical_au({SUPPORTED_AUS[i]: int(rng.integers(1, 6)) for i in keys})


def generate_dataset(out_dir, n_identities: int = 50, samples_per_identity: int = 10,
                     protocols: Sequence[Protocol | str] = tuple(Protocol), seed: int = 0,
                     size: int = 64, test_fraction: float = 0.2) -> Manifest:
    """Render a paired neutral/target dataset split by identity and write a JSONL manifest."""
    if n_identities < 2:
        raise ValueError("need at least two identities for a train/test split")
    protocols = [Protocol(p) for p in protocols]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    id_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=n_identities)]
    n_test = min(max(1, round(test_fraction * n_identities)), n_identities - 1)
    records = []
    for ident, id_seed in enumerate(id_seeds):
        identity = IdentityParams.from_seed(id_seed)
        gender = gender_for_seed(id_seed)
        neutral_rel = f"images/id{ident:04d}_neutral.png"
        save_png(render(identity, {}, size), out / neutral_rel)
        split = "test" if ident >= n_identities - n_test else "train"
        for j in range(samples_per_identity):
            sid = f"s{len(records):06d}"
            au = sample_au(rng)
            protocol = protocols[int(rng.integers(len(protocols)))]
            target_rel = f"images/{sid}_target.png"
            save_png(render(identity, au, size), out / target_rel)
            records.append({
                "id": sid,
                "identity": ident,
                "identity_seed": id_seed,
                "split": split,
                "gender": gender.value,
                "protocol": protocol.value,
                "au": au,
                "text": describe_text(au, gender, protocol),
                "neutral_path": neutral_rel,
                "target_path": target_rel,
            })
    records.sort(key=lambda r: r["id"])
    path = out / "manifest.jsonl"
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    os.replace(tmp, path)
    return Manifest(path, records)


def check_manifest(manifest: Manifest) -> None:
    """Raise if any record's text does not parse back to its stored AU vector."""
    for r in manifest.records:
        au, gender = parse(r["text"])
        if au != r["au"] or gender.value != r["gender"]:
            raise RenderError(f"record {r['id']} text does not match its AU vector")


def identity_dict(identity: IdentityParams) -> dict:
    return asdict(identity)
