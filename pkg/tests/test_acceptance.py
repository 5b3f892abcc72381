"""End-to-end acceptance run.

Criteria 1-6 are quick oracle checks. Criteria 7-10 share one session pipeline
driven through the command line: a 500-triple dataset, one pretrained encoder
pair, the full model plus two ablations trained for 2,000 steps each, and a
resumed run. Each test prints an ``ACCEPTANCE <n> PASS|FAIL`` line.
"""
import json
import math
import time

import pytest

from lang2face import verify
from lang2face.cli import content_hash, main
from lang2face.config import Config
from lang2face.trainer import load_lvsn, read_log

STEPS = 2000
RESUME_FROM = 1500
LOCALITY_MIN, CONSISTENT_MIN, MIN_CASES = 0.6, 0.7, 50


@pytest.fixture
def announce(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return say


def timed(fn):
    t = time.perf_counter()
    detail = fn()
    return detail, time.perf_counter() - t


def run(*argv):
    t = time.perf_counter()
    code = main([str(a) for a in argv])
    assert code == 0, f"lang2face {' '.join(map(str, argv))} exited {code}"
    return time.perf_counter() - t


# -- 1-6: oracles --------------------------------------------------------------

def test_1_codec_round_trip(announce):
    detail, secs = timed(lambda: verify.check_codec(1000))
    announce(1, secs < 10, f"{detail} in {secs:.1f}s (limit 10s)")


def test_2_renderer_locality(announce):
    detail, secs = timed(lambda: verify.check_renderer(20, 64))
    announce(2, secs < 60, f"{detail}, no leaks, monotone, {secs:.1f}s (limit 60s)")


def test_3_attention(announce):
    detail, _ = timed(lambda: verify.check_attention(1000))
    announce(3, True, detail + "; rows sum to 1, PAD weights 0, N=1 exact")


def test_4_loss_anchors(announce):
    announce(4, True, verify.check_anchors())


def test_5_gradients(announce):
    detail, secs = timed(verify.check_gradients)
    announce(5, secs < 120, f"{detail} in {secs:.1f}s (limit 120s)")


def test_6_metric_oracles(announce):
    announce(6, True, verify.check_metrics())


# -- 7-10: one trained pipeline -----------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    ds = root / "ds"
    manifest = ds / "manifest.jsonl"
    times = {}
    times["dataset"] = run("dataset", "--identities", 50, "--per-identity", 10, "--seed", 7, "--out", ds)
    times["pretrain"] = run("pretrain", "--manifest", manifest, "--out", root / "lvsn")
    for name, flags in (("full", []), ("without_lvm", ["--ablate-lvm"]),
                        ("without_attention", ["--ablate-attention"])):
        times[name] = run("train", "--manifest", manifest, "--lvsn", root / "lvsn", *flags,
                          "--out", root / name)
    times["resume"] = run("train", "--manifest", manifest, "--resume",
                          root / "full" / f"step_{RESUME_FROM:06d}", "--out", root / "resumed")
    for name in ("full", "without_lvm", "without_attention"):
        run("evaluate", "--ckpt", root / name / f"step_{STEPS:06d}", "--manifest", manifest,
            "--out", root / f"eval_{name}")
    run("manipulate", "--ckpt", root / "full" / f"step_{STEPS:06d}", "--manifest", manifest,
        "--cases", 60, "--out", root / "edits")
    rec = json.loads(manifest.read_text().splitlines()[-1])
    run("manipulate", "--ckpt", root / "full" / f"step_{STEPS:06d}", "--manifest", manifest,
        "--sample", rec["id"], "--edit", f"phrase_remove:{next(iter(rec['au']))}", "--out", root / "edit_one")
    run("synthesize", "--ckpt", root / "full" / f"step_{STEPS:06d}", "--identity-seed", 3,
        "--text", "She highly parted lips and significantly dropped jaw .", "--out", root / "syn")
    return root, times


def _summary(root, name):
    (path,) = (root / f"eval_{name}").glob("eval_*/summary.json")
    return json.loads(path.read_text())


def test_7_smoke_training(pipeline, announce):
    root, times = pipeline
    cfg = Config.load(root / "full" / "config.json")
    n_triples = len((root / "ds" / "manifest.jsonl").read_text().splitlines())
    log = read_log(root / "full")
    finite = all(math.isfinite(v) for row in log for v in row.values())
    first, last = log[0]["L_recon3"], log[-1]["L_recon3"]
    resumed_same = (root / "resumed" / "train_log.csv").read_text() == (root / "full" / "train_log.csv").read_text()
    same_weights = content_hash(root / "resumed" / f"step_{STEPS:06d}") == \
        content_hash(root / "full" / f"step_{STEPS:06d}")
    checks = {
        "pyramid 16/32/64": cfg.sizes == (16, 32, 64),
        "500 triples": n_triples == 500,
        f"{len(log)} steps <= 2000": len(log) == cfg.steps <= 2000,
        "all losses finite": finite,
        f"recon3 {first:.4f} -> {last:.4f} (ratio {last / first:.3f} <= 0.5)": last <= 0.5 * first,
        f"resume from step {RESUME_FROM} reproduces the log": resumed_same,
        "resume reproduces the final checkpoint": same_weights,
        f"training {times['full'] / 60:.1f} min <= 45": times["full"] <= 45 * 60,
    }
    failed = [k for k, ok in checks.items() if not ok]
    announce(7, not failed, "; ".join(("FAILED " if k in failed else "") + k for k in checks))


def test_8_ablation_ordering(pipeline, announce):
    root, _ = pipeline
    rows = {name: _summary(root, name) for name in ("full", "without_lvm", "without_attention")}
    full = rows["full"]
    ok = all(full["ssim_mean"] > r["ssim_mean"] and full["fid"] < r["fid"]
             for name, r in rows.items() if name != "full")
    same_lvsn = len({r["lvsn_hash"] for r in rows.values()}) == 1
    table = ", ".join(f"{name} SSIM {r['ssim_mean']:.4f} FID {r['fid']:.6f}" for name, r in rows.items())
    announce(8, ok and same_lvsn, f"{table} (n={full['n_samples']} held-out)")


def test_9_manipulation_locality(pipeline, announce):
    root, _ = pipeline
    s = json.loads((root / "edits" / "summary.json").read_text())
    ok = (s["n_cases"] >= MIN_CASES and s["median_locality"] >= LOCALITY_MIN
          and s["fraction_consistent"] >= CONSISTENT_MIN)
    announce(9, ok, f"{s['n_cases']} cases, median locality {s['median_locality']:.3f} (>= {LOCALITY_MIN}), "
                    f"consistent {s['fraction_consistent']:.1%} (>= {CONSISTENT_MIN:.0%})")


def test_10_freeze_and_replay(pipeline, announce, tmp_path):
    root, _ = pipeline
    lvsn_hash = load_lvsn(root / "lvsn")[0].hash()
    ckpts = [p for name in ("full", "without_lvm", "without_attention", "resumed")
             for p in sorted((root / name).glob("step_*"))]
    frozen = all(json.loads((p / "state.json").read_text())["lvsn_hash"] == lvsn_hash for p in ckpts)
    replays = {}
    for name in ("ds", "lvsn", "resumed", "eval_full", "edits", "edit_one", "syn"):
        code = main(["replay", str(root / name / "run_manifest.json"), "--out", str(tmp_path / name)])
        replays[name] = code == 0 and (tmp_path / name / "outputs.json").read_text() == \
            (root / name / "outputs.json").read_text()
    bad = [k for k, ok in replays.items() if not ok]
    announce(10, frozen and not bad,
             f"LVSN hash constant over {len(ckpts)} checkpoints: {frozen}; "
             f"replayed {len(replays)} commands, mismatched: {bad or 'none'}")
