"""Command-line entry point: ``lang2face <command> ...``.

Every command that takes ``--out`` refuses a non-empty directory, writes
``run_manifest.json`` before doing any work and ``outputs.json`` (content
hashes of everything it produced) when done.  ``lang2face replay`` re-runs a
command from its manifest into a new directory and compares the hashes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__

logger = logging.getLogger("lang2face")

RUN_MANIFEST = "run_manifest.json"
OUTPUTS = "outputs.json"
_BOOKKEEPING = {RUN_MANIFEST, OUTPUTS}


class CLIError(Exception):
    pass


def content_hash(path) -> str:
    """sha256 of a file, or of every file under a directory (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if path.is_dir():
            if f.name in _BOOKKEEPING and f.parent == path:
                continue
            h.update(str(f.relative_to(path)).encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def output_hashes(out: Path) -> dict:
    return {str(p.relative_to(out)): content_hash(p) for p in sorted(out.rglob("*"))
            if p.is_file() and str(p.relative_to(out)) not in _BOOKKEEPING}


# -- config ------------------------------------------------------------------

def build_config(args):
    from .config import Config
    if getattr(args, "config", None):
        cfg = Config.load(args.config)
    elif getattr(args, "full_scale", False):
        cfg = Config.full_scale()
    else:
        cfg = Config()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "pretrain_steps", None) is not None:
        over["pretrain_steps"] = args.pretrain_steps
    if getattr(args, "full_scale", False) and getattr(args, "config", None):
        over["base_resolution"] = 64
    if getattr(args, "ablate_lvm", False):
        over["disable_lvm"] = True
    if getattr(args, "ablate_attention", False):
        over["disable_attention"] = True
    return Config.from_dict({**cfg.to_dict(), **over}) if over else cfg


# -- commands ----------------------------------------------------------------

def cmd_dataset(args, out: Path) -> None:
    from .renderer import generate_dataset
    cfg = build_config(args)
    seed = cfg.seed if args.seed is not None else 0
    m = generate_dataset(out, n_identities=args.identities, samples_per_identity=args.per_identity,
                         seed=seed, size=cfg.image_size)
    print(f"wrote {len(m.records)} triples to {m.path}")


def cmd_pretrain(args, out: Path) -> None:
    from .trainer import run_pretrain
    path, digest = run_pretrain(build_config(args), args.manifest, out)
    info = json.loads((path / "lvsn.json").read_text())
    print(f"LVSN {digest[:12]} held-out top-1 retrieval {info['retrieval_top1']:.3f}")


def cmd_train(args, out: Path) -> None:
    from .trainer import run_train
    cfg = build_config(args)
    lvsn_dir = args.lvsn
    if args.resume:
        resume = Path(args.resume)
        lvsn_dir = lvsn_dir or resume.parent / "lvsn"
        log = resume.parent / "train_log.csv"
        if log.exists():
            shutil.copy(log, out / "train_log.csv")
    if lvsn_dir is None:
        raise CLIError("train needs --lvsn (or --resume)")
    for ckpt in run_train(cfg, args.manifest, lvsn_dir, out, resume=args.resume):
        print(ckpt)


def _neutral(args, size: int):
    from .renderer import IdentityParams, load_png, render
    if args.neutral:
        img = load_png(args.neutral)
        if img.shape[:2] != (size, size):
            raise CLIError(f"neutral image must be {size}x{size}, got {img.shape[1]}x{img.shape[0]}")
        return img
    return render(IdentityParams.from_seed(args.identity_seed), {}, size)


def cmd_synthesize(args, out: Path) -> None:
    import torch
    from .evaluation import Model
    from .renderer import save_png
    from .trainer import to_images, to_tensor
    model = Model.load(args.ckpt)
    neutral = to_tensor([_neutral(args, model.cfg.image_size)])
    noise = None
    if args.noise_seed is not None:
        g = torch.Generator().manual_seed(args.noise_seed)
        noise = torch.randn(1, model.cfg.face_channels, generator=g)
    for level, img in enumerate(model.synthesize(neutral, [args.text], noise), 1):
        save_png(to_images(img)[0], out / f"level{level}.png")
        print(out / f"level{level}.png")


def _parse_edit(text: str):
    from .evaluation import EditSpec
    parts = text.split(":")
    if len(parts) not in (2, 3) or parts[0] not in ("adverb_swap", "phrase_remove", "phrase_add"):
        raise CLIError(f"edit must look like KIND:AU[:INTENSITY], got {text!r}")
    return EditSpec(parts[0], parts[1], int(parts[2]) if len(parts) == 3 else None)


def cmd_manipulate(args, out: Path) -> None:
    from .evaluation import Model, manipulate, manipulation_suite
    from .renderer import load_manifest
    model, manifest = Model.load(args.ckpt), load_manifest(args.manifest)
    if args.cases:
        summary = manipulation_suite(model, manifest, args.cases, out)
        summary.pop("rows")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(json.dumps(summary))
        return
    rec = next((r for r in manifest.records if r["id"] == args.sample), None)
    if rec is None:
        raise CLIError(f"no sample {args.sample!r} in {args.manifest}")
    res = manipulate(model, manifest, rec, _parse_edit(args.edit), out / "grid.png")
    scores = {"sample": rec["id"], "original": res.original_text, "edited": res.edited_text,
              "locality": res.locality, "consistency": res.consistency}
    (out / "scores.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    print(json.dumps(scores))


def cmd_evaluate(args, out: Path) -> None:
    from .evaluation import Model, ablation_matrix, evaluate, table1_ordering_holds
    if args.ablation:
        if not args.lvsn:
            raise CLIError("evaluate --ablation needs --lvsn")
        rows = ablation_matrix(build_config(args), args.manifest, args.lvsn, out)
        for r in rows:
            print(f"{r['variant']:<18} SSIM {r['SSIM']:.4f}  FID {r['FID']:.4f}")
        print("ordering holds" if table1_ordering_holds(rows) else "ordering does NOT hold")
        return
    if not args.ckpt:
        raise CLIError("evaluate needs --ckpt (or --ablation)")
    model = Model.load(args.ckpt)
    report = evaluate(model, args.manifest)
    report.write(out / f"eval_{report.checkpoint_hash[:12]}")
    print(json.dumps(report.summary()))


def cmd_verify(args, out: Path | None) -> int:
    from .verify import run_all
    results = run_all()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<18} {r.seconds:6.1f}s  {r.detail}")
    if out is not None:
        (out / "verify.json").write_text(json.dumps([r._asdict() for r in results], indent=2) + "\n")
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {"dataset": cmd_dataset, "pretrain": cmd_pretrain, "train": cmd_train,
            "synthesize": cmd_synthesize, "manipulate": cmd_manipulate, "evaluate": cmd_evaluate,
            "verify": cmd_verify}

# arguments naming files/dirs whose content the run depends on
_INPUT_ARGS = ("config", "manifest", "lvsn", "ckpt", "resume", "neutral")


def _validate(args) -> None:
    if args.command == "synthesize":
        from .au_codec import parse
        parse(args.text)
        if (args.neutral is None) == (args.identity_seed is None):
            raise CLIError("give exactly one of --neutral or --identity-seed")
    if args.command == "manipulate" and not args.cases:
        if not (args.sample and args.edit):
            raise CLIError("manipulate needs --sample and --edit (or --cases N)")
        _parse_edit(args.edit)
    for name in _INPUT_ARGS:
        value = getattr(args, name, None)
        if value and not Path(value).exists():
            raise CLIError(f"--{name.replace('_', '-')} {value} does not exist")


def _absolute(args) -> None:
    for name in _INPUT_ARGS + ("out",):
        value = getattr(args, name, None)
        if value:
            setattr(args, name, str(Path(value).resolve()))


def write_run_manifest(args, out: Path) -> dict:
    stored = {k: v for k, v in vars(args).items() if k not in ("out", "verbose")}
    inputs = {name: {"path": getattr(args, name), "sha256": content_hash(getattr(args, name))}
              for name in _INPUT_ARGS if getattr(args, name, None)}
    config = None
    if args.command in ("dataset", "pretrain", "train") or getattr(args, "ablation", False):
        config = build_config(args).to_dict()
    manifest = {"format": "lang2face-run/1", "version": __version__, "command": args.command,
                "args": stored, "config_path": getattr(args, "config", None), "config": config,
                "seed": getattr(args, "seed", None), "inputs": inputs, "out": str(out)}
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _prepare_out(out: str) -> Path:
    path = Path(out)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise CLIError(f"{path} exists and is not empty; runs never write into a previous run's directory")
    path.mkdir(parents=True, exist_ok=True)
    return path


def execute(args) -> int:
    _absolute(args)
    _validate(args)
    out = _prepare_out(args.out) if args.out else None
    if out is None and args.command != "verify":
        raise CLIError(f"{args.command} needs --out")
    if out is not None:
        write_run_manifest(args, out)
    status = COMMANDS[args.command](args, out) or 0
    if out is not None:
        (out / OUTPUTS).write_text(json.dumps(output_hashes(out), indent=2, sort_keys=True) + "\n")
    return status


def cmd_replay(args) -> int:
    run = json.loads(Path(args.run_manifest).read_text())
    for name, info in run["inputs"].items():
        if content_hash(info["path"]) != info["sha256"]:
            raise CLIError(f"input {name} ({info['path']}) changed since the original run")
    ns = argparse.Namespace(**run["args"], out=str(Path(args.out).resolve()), verbose=args.verbose)
    status = execute(ns)
    original = Path(args.run_manifest).parent / OUTPUTS
    if not original.exists():
        print("original run has no outputs.json; nothing to compare")
        return status
    before = json.loads(original.read_text())
    after = json.loads((Path(args.out) / OUTPUTS).read_text())
    differ = sorted(k for k in before.keys() | after.keys() if before.get(k) != after.get(k))
    for k in differ:
        print(f"MISMATCH {k}")
    print(f"{len(after)} outputs, {len(differ)} differ")
    return status or (1 if differ else 0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lang2face", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help, out_required=True):
        s = sub.add_parser(name, help=help)
        s.add_argument("--out", required=out_required, help="new, empty output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    def model_flags(s):
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--full-scale", action="store_true", help="64/128/256 pyramid and full-size layers")

    s = add("dataset", "render a toy dataset (manifest + PNGs)")
    model_flags(s)
    s.add_argument("--identities", type=int, default=50)
    s.add_argument("--per-identity", type=int, default=10)

    s = add("pretrain", "pretrain and freeze the text/visual encoders")
    model_flags(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--pretrain-steps", type=int)

    s = add("train", "train generator and critics")
    model_flags(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--lvsn", help="pretrained encoder directory")
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--steps", type=int)
    s.add_argument("--ablate-lvm", action="store_true", help="drop the matching loss")
    s.add_argument("--ablate-attention", action="store_true", help="drop word attention")

    s = add("synthesize", "synthesize the three pyramid levels for one description")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--neutral", help="neutral face PNG")
    s.add_argument("--identity-seed", type=int, help="render the neutral face of this identity")
    s.add_argument("--noise-seed", type=int, help="sample augmentation noise (default: zero)")

    s = add("manipulate", "edit one description and compare before/after")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--sample", help="sample id from the manifest")
    s.add_argument("--edit", help="KIND:AU[:INTENSITY], e.g. adverb_swap:AU9:1 or phrase_remove:AU26")
    s.add_argument("--cases", type=int, help="run the held-out edit suite with this many cases")

    s = add("evaluate", "SSIM/FID on held-out identities, or the ablation table")
    model_flags(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--ablation", action="store_true", help="train and compare full / without_lvm / without_attention")
    s.add_argument("--lvsn")
    s.add_argument("--steps", type=int)

    add("verify", "run the property and oracle checks", out_required=False)

    s = sub.add_parser("replay", help="re-run a command from its run_manifest.json and compare outputs")
    s.add_argument("run_manifest")
    s.add_argument("--out", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    from .trainer import set_threads
    set_threads()
    from .au_codec import ParseError
    try:
        if args.command == "replay":
            return cmd_replay(args)
        return execute(args)
    except ParseError as e:
        print(f"error: cannot parse description: {e}", file=sys.stderr)
        return 2
    except (CLIError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
