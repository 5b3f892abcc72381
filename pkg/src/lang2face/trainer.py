"""Encoder pretraining, alternating critic/generator training and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import objectives as obj
from .au_codec import Vocab, grammar_vocab, tokenize
from .config import Config
from .critics import Critics
from .generator import Generator, kl_to_standard_normal, resize
from .lvsn import (TextEncoder, VisualEncoder, _batch_order, freeze, matching_loss,
                   pretrain_encoders, retrieval_accuracy)
from .renderer import Manifest, load_manifest

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, report: dict):
        self.step, self.report = step, report
        super().__init__(f"non-finite loss at step {step}: {report}")


def set_threads() -> None:
    n = os.environ.get("LANG2FACE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def param_hash(*modules: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def to_tensor(images) -> torch.Tensor:
    """Stack H x W x 3 arrays into a B x 3 x H x W float tensor."""
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().float()


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


@dataclass
class SplitData:
    records: list[dict]
    neutral: torch.Tensor
    target: torch.Tensor
    tokens: torch.Tensor

    def __len__(self):
        return len(self.records)


def load_split(manifest: Manifest, split: str | None, vocab: Vocab, n_max: int) -> SplitData:
    records = manifest.records if split is None else manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    neutral_cache = {}
    neutral, target = [], []
    for r in records:
        if r["neutral_path"] not in neutral_cache:
            neutral_cache[r["neutral_path"]] = manifest.image(r, "neutral")
        neutral.append(neutral_cache[r["neutral_path"]])
        target.append(manifest.image(r, "target"))
    tokens = torch.tensor([tokenize(r["text"], vocab, n_max) for r in records], dtype=torch.long)
    return SplitData(records, to_tensor(neutral), to_tensor(target), tokens)


# -- LVSN --------------------------------------------------------------------

@dataclass
class LVSN:
    text: TextEncoder
    visual: VisualEncoder
    vocab: Vocab

    def hash(self) -> str:
        return param_hash(self.text, self.visual)


def build_lvsn(cfg: Config, vocab: Vocab | None = None) -> LVSN:
    vocab = vocab or grammar_vocab()
    torch.manual_seed(cfg.seed)
    text = TextEncoder(len(vocab), cfg.word_dim, cfg.embed_dim, cfg.n_max)
    visual = VisualEncoder(cfg.word_dim, cfg.vse_channels, cfg.image_size)
    return LVSN(text, visual, vocab)


def save_lvsn(lvsn: LVSN, cfg: Config, out_dir, extra: dict | None = None) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"text": lvsn.text.state_dict(), "visual": lvsn.visual.state_dict()}, out / "lvsn.pt")
    (out / "vocab.txt").write_text(lvsn.vocab.dumps())
    cfg.save(out / "config.json")
    digest = lvsn.hash()
    info = {"format": "lang2face-lvsn/1", "param_hash": digest, **(extra or {})}
    (out / "lvsn.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return digest


def load_lvsn(path) -> tuple[LVSN, Config]:
    path = Path(path)
    cfg = Config.load(path / "config.json")
    vocab = Vocab.loads((path / "vocab.txt").read_text())
    lvsn = build_lvsn(cfg, vocab)
    state = torch.load(path / "lvsn.pt", weights_only=True)
    lvsn.text.load_state_dict(state["text"])
    lvsn.visual.load_state_dict(state["visual"])
    freeze(lvsn.text)
    freeze(lvsn.visual)
    info = json.loads((path / "lvsn.json").read_text())
    if info["param_hash"] != lvsn.hash():
        raise ValueError(f"LVSN checkpoint {path} does not match its recorded hash")
    return lvsn, cfg


def run_pretrain(cfg: Config, manifest, out_dir) -> tuple[Path, str]:
    """Pretrain and freeze the encoders on the training split; returns (dir, hash)."""
    set_threads()
    cfg.validate()
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    lvsn = build_lvsn(cfg)
    train = load_split(manifest, "train", lvsn.vocab, cfg.n_max)
    curve = pretrain_encoders(lvsn.text, lvsn.visual, train.tokens, train.target,
                              steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch_size,
                              lr=cfg.lr_pretrain, gammas=cfg.gammas, seed=cfg.seed, betas=cfg.betas)
    acc = None
    if "test" in {r["split"] for r in manifest.records}:
        acc = lvsn_retrieval(lvsn, load_split(manifest, "test", lvsn.vocab, cfg.n_max),
                             cfg.pretrain_batch_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pretrain_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "sentence", "word"])
        w.writeheader()
        w.writerows(curve)
    digest = save_lvsn(lvsn, cfg, out, {"retrieval_top1": acc, "final_loss": curve[-1]["loss"]})
    logger.info("pretrained LVSN %s (held-out top-1 %.3f)", digest[:12], acc or float("nan"))
    return out, digest


def lvsn_retrieval(lvsn: LVSN, data: SplitData, batch_size: int = 16) -> float:
    """Mean top-1 matched-pair retrieval over consecutive batches of held-out pairs."""
    accs = []
    with torch.no_grad():
        perm = np.random.default_rng(0).permutation(len(data))
        for i in range(0, len(data) - batch_size + 1, batch_size):
            idx = torch.as_tensor(perm[i:i + batch_size])
            accs.append(retrieval_accuracy(lvsn.text(data.tokens[idx]), lvsn.visual(data.target[idx])))
    return float(np.mean(accs))


# -- main training -----------------------------------------------------------

def step_noise(cfg: Config, step: int, batch: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
    return torch.randn(batch, cfg.face_channels, generator=g)


class Trainer:
    def __init__(self, cfg: Config, lvsn: LVSN):
        self.cfg = cfg
        self.lvsn = lvsn
        torch.manual_seed(cfg.seed)
        self.gen = Generator(cfg)
        self.critics = Critics(cfg)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr_main, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.critics.parameters(), lr=cfg.lr_main, betas=cfg.betas)
        self.step = 0

    def state_dict(self) -> dict:
        return {"generator": self.gen.state_dict(), "critics": self.critics.state_dict(),
                "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(), "step": self.step}

    def load_state_dict(self, state: dict) -> None:
        self.gen.load_state_dict(state["generator"])
        self.critics.load_state_dict(state["critics"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = state["step"]

    def train_step(self, neutral, target, tokens) -> dict:
        cfg, c, gen = self.cfg, self.critics, self.gen
        s1, s2, s3 = cfg.sizes
        with torch.no_grad():
            text = self.lvsn.text(tokens)
        noise = step_noise(cfg, self.step, tokens.shape[0])
        out = gen(neutral, text.words, text.mask, text.sentence, noise)
        fakes = out.images
        cond = out.sentence.vector
        targets = [resize(target, s) for s in (s1, s2)] + [target]
        neutrals = [resize(neutral, s) for s in (s1, s2)]

        # critics, on detached generator output
        c.requires_grad_(True)
        cd = cond.detach()
        l_fv, l_ev = [], []
        for n in range(2):
            fv = c.face[n]
            l_fv.append(obj.loss_fv_logits(fv.logits(targets[n], cd), fv.logits(fakes[n].detach(), cd)))
            ev = c.expression[n]
            l_ev.append(obj.loss_ev_logits(ev.logits(targets[n], neutrals[n], cd),
                                           ev.logits(fakes[n].detach(), neutrals[n], cd)))
        l_syn = obj.loss_fv_logits(c.synthesis.logits(target, cd), c.synthesis.logits(fakes[2].detach(), cd))
        l_d = obj.loss_d_total(l_syn, l_fv, l_ev)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()

        # generator: adversarial + identity + recon, matching loss, CA KL
        c.requires_grad_(False)
        ffe_params = {k: v.detach() for k, v in gen.ffe.named_parameters()}

        def ffe_frozen(x):
            return torch.func.functional_call(gen.ffe, ffe_params, (x,))

        l_adv, l_id, l_rec = [], [], []
        for m in range(3):
            l_adv.append(obj.loss_adv_logits(c.adversary(m + 1).logits(fakes[m], cond)))
            with torch.no_grad():
                f_t = ffe_frozen(resize(targets[m], s3))
            l_id.append((f_t - ffe_frozen(resize(fakes[m], s3))).pow(2).mean())
            l_rec.append(obj.loss_recon(targets[m], fakes[m]))
        l_g = obj.loss_g_total(l_adv, l_id, l_rec, cfg.weights)
        kl = kl_to_standard_normal(out.sentence.mu, out.sentence.logvar)
        if cfg.disable_lvm:
            l_lvm = torch.zeros(())
        else:
            l_lvm = matching_loss(text, self.lvsn.visual(fakes[2]), cfg.gammas).total
        self.opt_g.zero_grad(set_to_none=True)
        (l_g + cfg.weights.lvm * l_lvm + cfg.weights.ca_kl * kl).backward()
        self.opt_g.step()

        report = {"L_LVM": l_lvm, "L_FV1": l_fv[0], "L_FV2": l_fv[1], "L_EV1": l_ev[0], "L_EV2": l_ev[1],
                  "L_syn": l_syn, "L_CA_KL": kl, "L_D_total": l_d, "L_G_total": l_g,
                  "total": obj.loss_total(l_lvm, l_d, l_g)}
        for m in range(3):
            report[f"L_adv{m + 1}"] = l_adv[m]
            report[f"L_id{m + 1}"] = l_id[m]
            report[f"L_recon{m + 1}"] = l_rec[m]
        report = {k: float(torch.as_tensor(report[k]).detach()) for k in obj.REPORT_KEYS}
        if not all(np.isfinite(v) for v in report.values()):
            raise NonFiniteLoss(self.step, report)
        self.step += 1
        return report


LOG_FIELDS = ("step",) + obj.REPORT_KEYS


def checkpoint_dir(out_dir, step: int) -> Path:
    return Path(out_dir) / f"step_{step:06d}"


def save_checkpoint(trainer: Trainer, out_dir) -> Path:
    path = checkpoint_dir(out_dir, trainer.step)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    state = trainer.state_dict()
    torch.save({"generator": state["generator"]}, tmp / "generator.pt")
    torch.save({"critics": state["critics"]}, tmp / "critics.pt")
    torch.save({"opt_g": state["opt_g"], "opt_d": state["opt_d"]}, tmp / "optimizers.pt")
    trainer.cfg.save(tmp / "config.json")
    meta = {"format": "lang2face-checkpoint/1", "step": trainer.step,
            "generator_hash": param_hash(trainer.gen), "critics_hash": param_hash(trainer.critics),
            "lvsn_hash": trainer.lvsn.hash(),
            # batches and noise are pure functions of (seed, step); nothing else to restore
            "rng": {"seed": trainer.cfg.seed, "next_step": trainer.step}}
    (tmp / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path, lvsn: LVSN | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` from ``path`` (a ``step_XXXXXX`` directory)."""
    path = Path(path)
    cfg = Config.load(path / "config.json")
    meta = json.loads((path / "state.json").read_text())
    if lvsn is None:
        lvsn, _ = load_lvsn(path.parent / "lvsn")
    if lvsn.hash() != meta["lvsn_hash"]:
        raise ValueError("LVSN parameters differ from the ones this checkpoint was trained with")
    trainer = Trainer(cfg, lvsn)
    opt = torch.load(path / "optimizers.pt", weights_only=True)
    trainer.load_state_dict({
        "generator": torch.load(path / "generator.pt", weights_only=True)["generator"],
        "critics": torch.load(path / "critics.pt", weights_only=True)["critics"],
        "opt_g": opt["opt_g"], "opt_d": opt["opt_d"], "step": meta["step"]})
    return trainer


def latest_checkpoint(out_dir) -> Path:
    steps = sorted(p for p in Path(out_dir).glob("step_*") if not p.name.endswith(".tmp"))
    if not steps:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return steps[-1]


def run_train(cfg: Config, manifest, lvsn_dir, out_dir, resume: str | Path | None = None,
              stop_at: int | None = None) -> Iterator[Path]:
    """Train the generator and critics, yielding each checkpoint directory as it is written.

    ``resume`` continues from a checkpoint directory; the loss log is truncated
    to that step so a resumed run reproduces the uninterrupted log.
    """
    set_threads()
    cfg.validate()
    torch.use_deterministic_algorithms(True)
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lvsn_copy = out / "lvsn"
    if Path(lvsn_dir).resolve() != lvsn_copy.resolve():
        if lvsn_copy.exists():
            shutil.rmtree(lvsn_copy)
        shutil.copytree(lvsn_dir, lvsn_copy)
    lvsn, _ = load_lvsn(lvsn_copy)
    frozen_hash = lvsn.hash()
    data = load_split(manifest, "train", lvsn.vocab, cfg.n_max)

    if resume is not None:
        trainer = load_checkpoint(resume, lvsn)
        if trainer.cfg != cfg:
            raise ValueError("resume checkpoint was written with a different config")
    else:
        trainer = Trainer(cfg, lvsn)
    cfg.save(out / "config.json")

    log_path = out / "train_log.csv"
    rows = []
    if resume is not None and log_path.exists():
        with open(log_path) as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) < trainer.step]
    with open(log_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)

    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    order = _batch_order(len(data), cfg.batch_size, cfg.steps, cfg.seed)
    with open(log_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        for step, idx in enumerate(order):
            if step >= end:
                break
            if step < trainer.step:
                continue
            idx = torch.as_tensor(idx)
            report = trainer.train_step(data.neutral[idx], data.target[idx], data.tokens[idx])
            w.writerow({"step": step, **{k: repr(v) for k, v in report.items()}})
            if step % 100 == 0:
                fh.flush()
                logger.info("step %d  L_D %.4f  L_G %.4f  recon3 %.4f  LVM %.4f", step,
                            report["L_D_total"], report["L_G_total"], report["L_recon3"], report["L_LVM"])
            if trainer.step % cfg.checkpoint_every == 0 or trainer.step == end:
                fh.flush()
                if lvsn.hash() != frozen_hash:
                    raise RuntimeError("LVSN parameters changed during training")
                yield save_checkpoint(trainer, out)


def train_to_end(cfg: Config, manifest, lvsn_dir, out_dir, **kw) -> Path:
    last = None
    for last in run_train(cfg, manifest, lvsn_dir, out_dir, **kw):
        pass
    return last if last is not None else latest_checkpoint(out_dir)


def read_log(out_dir) -> list[dict]:
    with open(Path(out_dir) / "train_log.csv") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
