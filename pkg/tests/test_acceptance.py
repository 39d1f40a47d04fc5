"""Acceptance suite: one test per criterion, each recording PASS/FAIL.

The training criteria (5-8) share one experiment: for each of three seeds a
40-pair desk corpus (10 clean scenes x 4 kinds, 64x64) is synthesized and the
desk model is trained for 20 epochs, once with the full objective and once
with the balance and contrastive weights set to zero. Held-out means the
union of the val and test splits.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from phydae import cli, scenes
from phydae import losses as L
from phydae.degrade import CorpusManifest, apply_haze, apply_lowlight, build_corpus
from phydae.experts import DehazeExpert, LowlightExpert, direction_weights
from phydae.gradsuite import run_suite
from phydae.image_core import psnr
from phydae.nn import functional as F
from phydae.nn import no_grad
from phydae.pipeline import (ModelConfig, TrainConfig, build_model, evaluate, evaluate_identity,
                             inspect_routing, load_checkpoint, load_split, train)

SEEDS = (0, 1, 2)
HELD_OUT = ["val", "test"]
ALL = ["train", "val", "test"]


# ---------------------------------------------------------------- 1
def test_c1_physics_inversion_oracles(record_criterion):
    t0 = time.perf_counter()
    worst = math.inf
    for i in range(20):
        rng = np.random.default_rng(np.random.SeedSequence([2024, i]))
        clean = scenes.make_scene(64, rng).data
        t, A = rng.uniform(0.3, 0.9), rng.uniform(0.7, 1.0, size=3)
        hazy = apply_haze(clean, t, A).data
        worst = min(worst, psnr(DehazeExpert.oracle(hazy[None], t, A).data[0], clean))
        gamma = rng.uniform(1.5, 3.5)
        dark = apply_lowlight(clean, gamma).data
        worst = min(worst, psnr(LowlightExpert.oracle(dark[None], 1.0, gamma).data[0], clean))
    secs = time.perf_counter() - t0
    ok = record_criterion(1, worst >= 60.0 and secs < 10.0,
                          f"worst PSNR {worst:.2f} dB (metric capped at 100) over 20 images "
                          f"x 2 oracles (>= 60), {secs:.2f} s (< 10)")
    assert ok


# ---------------------------------------------------------------- 2
def test_c2_gradient_suite(record_criterion):
    rep = run_suite(tolerance=1e-4, seed=0)
    worst = max(rep.cases, key=lambda c: c.max_rel_error / c.tolerance)
    ok = record_criterion(
        2, rep.passed and rep.seconds < 120.0,
        f"{len(rep.cases)} ops, failing {rep.failing or 'none'}, worst {worst.name} "
        f"{worst.max_rel_error:.2e} (tol {worst.tolerance:g}), {rep.seconds:.1f} s (< 120)")
    assert ok, rep.to_dict()


# ---------------------------------------------------------------- 3
def test_c3_closed_form_fixtures(record_criterion):
    checks = {}
    checks["balance"] = abs(float(L.balance_loss(np.array([1.0, 0, 0, 0])).data) - 3.0) <= 1e-6
    e = np.exp([1.0, 0.0, 0.0])
    ref = e / e.sum()
    checks["w_dir"] = all(
        np.abs(direction_weights(np.array([0.0]), np.array([th])).data[0] - ref).max() <= 1e-4
        for th in (0.0, 0.25, 0.5, 0.9))
    checks["total_2.11"] = L.total_loss(1.0, 1.0, 1.0, 1.0).total == 2.11
    rng = np.random.default_rng(3)
    simplex = shift = True
    for _ in range(1000):
        x = rng.normal(0, 5, size=rng.integers(2, 9))
        p = F.softmax(x).data
        simplex &= bool(np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9)
        shift &= bool(np.abs(F.softmax(x + rng.normal(0, 50)).data - p).max() <= 1e-12)
    checks["softmax_simplex"], checks["softmax_shift"] = simplex, shift
    ok = record_criterion(3, all(checks.values()), ", ".join(f"{k}={'ok' if v else 'FAIL'}"
                                                             for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 4
def _exact_w2_assignment(a, b):
    """Squared W2 between equal-mass 1-D samples via an optimal assignment."""
    cost = (a[:, None] - b[None, :]) ** 2
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


def test_c4_sliced_w2_oracle(record_criterion):
    worst, self_max = 0.0, 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 60))
        a, b = rng.normal(size=(m, 1)), rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 3), size=(m, 1))
        got = float(L.sliced_wasserstein(a, b, np.array([[1.0]])).data)
        worst = max(worst, abs(got - _exact_w2_assignment(a[:, 0], b[:, 0])))
        self_max = max(self_max, abs(float(L.sliced_wasserstein(a, a, np.array([[1.0]])).data)))
        x = rng.uniform(size=(2, 8, 8, 3))
        self_max = max(self_max, abs(float(L.w2_distance(x, x).data)))
    ok = record_criterion(4, worst <= 1e-9 and self_max == 0.0,
                          f"max |sliced - assignment W2| {worst:.1e} (<= 1e-9), max W2(mu,mu) {self_max:g}")
    assert ok


# ---------------------------------------------------------------- 5-8 shared experiment
def _held_out_eval(model, manifest):
    data = load_split(manifest, HELD_OUT, 64)
    return evaluate(model, data).avg_psnr, evaluate_identity(data).avg_psnr


def _route_inspect(ckpt, manifest_path, out, split, k=1):
    code = cli.main(["route-inspect", "--checkpoint", str(ckpt), "--manifest", str(manifest_path),
                     "--out", str(out), "--k", str(k), "--split", split])
    assert code == 0
    return json.loads((out / "routing.json").read_text())


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in SEEDS:
        base = root / f"seed{seed}"
        scenes.write_scenes(base / "clean", 10, size=64, seed=seed)
        manifest = build_corpus(base / "clean", base / "corpus", seed=seed)
        mpath = base / "corpus" / "manifest.json"
        for variant in ("full", "ablated"):
            tc = TrainConfig.desk(seed=seed)
            if variant == "ablated":
                tc = tc.replace(lambda2=0.0, lambda3=0.0)
            t0 = time.perf_counter()
            res = train(manifest, ModelConfig.desk(), tc, out_dir=base / variant)
            held = _route_inspect(res.checkpoint, mpath, base / variant / "routes_held", ",".join(HELD_OUT))
            secs = time.perf_counter() - t0
            full = _route_inspect(res.checkpoint, mpath, base / variant / "routes_all", ",".join(ALL))
            model = build_model(load_checkpoint(res.checkpoint))
            psnr_model, psnr_base = _held_out_eval(model, manifest)
            runs[seed, variant] = {
                "seconds": secs, "held": held, "all": full, "model": model,
                "psnr": psnr_model, "baseline": psnr_base, "manifest": manifest,
            }
    return runs


def test_c5_routing_accuracy(experiment, record_criterion):
    parts, good = [], 0
    for seed in SEEDS:
        r = experiment[seed, "full"]
        acc, post = r["held"]["routing_accuracy"], r["held"]["posterior_accuracy"]
        hold = acc >= 0.8 and post >= 0.8 and r["seconds"] < 1800
        good += hold
        parts.append(f"seed{seed}: route {acc:.3f} post {post:.3f} ({r['seconds']:.0f} s)")
    ok = record_criterion(5, good >= 2, f"{good}/3 seeds hold (need 2); " + "; ".join(parts))
    assert ok


def test_c6_psnr_beats_baseline(experiment, record_criterion):
    gains = {s: experiment[s, "full"]["psnr"] - experiment[s, "full"]["baseline"] for s in SEEDS}
    ok = record_criterion(6, all(g >= 1.0 for g in gains.values()),
                          "4D-AVG gain over degraded input " +
                          ", ".join(f"seed{s} {g:+.2f} dB" for s, g in gains.items()) + " (>= 1.0 each)")
    assert ok


def test_c7_sparsity_and_usage(experiment, record_criterion):
    counts_ok = True
    for seed in SEEDS:
        r = experiment[seed, "full"]
        model, data = r["model"], load_split(r["manifest"], HELD_OUT, 64)
        bank = model.stage2.experts
        for k in (1, 2):
            bank.reset_counts()
            with no_grad():
                model.forward(data.degraded, k=k)
            counts_ok &= int(bank.calls.sum()) == len(data) * k and int(bank.calls.max()) <= len(data)
            rep = inspect_routing(model, data, k=k)
            counts_ok &= int(rep.usage.sum()) == len(data) * k
    cvs = {s: experiment[s, "full"]["all"]["usage_cv"] for s in SEEDS}
    ok = record_criterion(7, counts_ok and all(cv < 0.5 for cv in cvs.values()),
                          f"calls == k per sample for k in (1, 2): {counts_ok}; usage CV on all 40 pairs "
                          + ", ".join(f"seed{s} {cv:.3f}" for s, cv in cvs.items()) + " (< 0.5 each)")
    assert ok


def test_c8_ablation_never_improves_routing(experiment, record_criterion):
    parts, never = [], True
    for seed in SEEDS:
        full = experiment[seed, "full"]["held"]["routing_accuracy"]
        abl = experiment[seed, "ablated"]["held"]["routing_accuracy"]
        never &= abl <= full
        parts.append(f"seed{seed}: full {full:.3f} ablated {abl:.3f}")
    ok = record_criterion(8, never, "held-out routing accuracy; " + "; ".join(parts))
    assert ok


# ---------------------------------------------------------------- 9
def test_c9_reproducibility(tmp_path, record_criterion):
    scenes.write_scenes(tmp_path / "clean", 4, size=32, seed=5)
    blobs = []
    for rep in ("a", "b"):
        build_corpus(tmp_path / "clean", tmp_path / rep, seed=11)
        blobs.append((tmp_path / rep / "manifest.json").read_bytes())
    manifests_same = blobs[0] == blobs[1]
    images_same = all((tmp_path / "a" / p.relative_to(tmp_path / "b")).read_bytes() == p.read_bytes()
                      for p in (tmp_path / "b").rglob("*.png"))
    manifest = CorpusManifest.read(tmp_path / "a" / "manifest.json")
    outs = []
    for rep in ("r1", "r2"):
        tc = TrainConfig.desk(seed=3, image_size=32, epochs=2)
        train(manifest, ModelConfig.desk(), tc, out_dir=tmp_path / rep, max_steps=4)
        outs.append({n: (tmp_path / rep / n).read_bytes()
                     for n in ("checkpoint.bin", "checkpoint.bin.json", "metrics.jsonl", "epochs.jsonl")})
    ckpt_same = outs[0]["checkpoint.bin"] == outs[1]["checkpoint.bin"]
    logs_same = all(outs[0][n] == outs[1][n] for n in ("metrics.jsonl", "epochs.jsonl", "checkpoint.bin.json"))
    steps = len(outs[0]["metrics.jsonl"].splitlines())
    ok = record_criterion(9, manifests_same and images_same and ckpt_same and logs_same and steps == 4,
                          f"manifest bytes {manifests_same}, corpus images {images_same}, checkpoint bits "
                          f"{ckpt_same}, metric logs {logs_same} ({steps} steps)")
    assert ok
