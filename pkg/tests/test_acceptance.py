"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest

from replaycl.audio import colored_noise, stft
from replaycl.cli import main
from replaycl.config import MethodConfig, default_config_path, load_config
from replaycl.engine import build_task_stream, compute_acc, compute_bwt, strip_timing
from replaycl.experiment import build_dataset, measure_mua_cost, run_experiment, trained_reference_model
from replaycl.model import Classifier, ClassifierConfig, gradient_check
from replaycl.numerics import cross_entropy_loss
from replaycl.replay import (EmbeddingPerturbConfig, WaveformPerturbConfig, herding, perturb_embedding,
                             score_uncertainty_embedding, score_uncertainty_waveform, select_reservoir,
                             uncertainty_from_probs)
from replaycl.datasets import LabeledClip

from test_replay import TableModel, greedy_oracle

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def bundled():
    cfg = load_config(default_config_path())
    return cfg, build_dataset(cfg)


def test_numerics(verdict):
    start = time.perf_counter()
    errs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = Classifier(ClassifierConfig(num_classes=10, seed=seed))
        errs.append(gradient_check(m, rng.standard_normal((8, 64)), rng.integers(0, 10, 8), seed=seed))
    ce = [abs(cross_entropy_loss(np.zeros((3, C)), [0, C - 1, C // 2])[0] - math.log(C)) for C in (2, 10, 50)]
    elapsed = time.perf_counter() - start
    ok = max(errs) < 1e-4 and max(ce) <= 1e-9 and elapsed < 10
    verdict(1, "gradient check and uniform-logit cross-entropy", ok,
            f"max rel err {max(errs):.2e}, CE dev {max(ce):.1e}, {elapsed:.1f}s")


def test_reservoir_frequency(verdict):
    start = time.perf_counter()
    N, L, trials = 20, 5, 100_000
    counts = np.zeros(N)
    for s in range(trials):
        counts[select_reservoir(list(range(N)), L, s)] += 1
    dev = float(np.max(np.abs(counts / trials - L / N)))
    elapsed = time.perf_counter() - start
    verdict(2, "reservoir inclusion frequency L/N", dev <= 0.01 and elapsed < 30,
            f"max |freq-0.25| {dev:.4f}, {elapsed:.1f}s")


def test_herding_oracle(verdict):
    start = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=int(rng.integers(3, 25)))
        pts = rng.standard_normal((labels.size, 2))
        for c in np.unique(labels):
            cls = pts[labels == c][:8]
            q = int(rng.integers(1, 4))
            mismatches += herding(cls, q) != greedy_oracle(cls, q)
    elapsed = time.perf_counter() - start
    verdict(3, "herding trace equals brute-force greedy oracle", mismatches == 0 and elapsed < 10,
            f"{mismatches} mismatching sets, {elapsed:.2f}s")


def test_uncertainty_arithmetic(verdict):
    ident, feat = (lambda w, s: w), (lambda s: s[:4])
    clip = [LabeledClip(0, 0, np.zeros(4), np.ones(16), 16000)]
    u0 = score_uncertainty_waveform(clip, TableModel([1.0] * 4), WaveformPerturbConfig(K=4),
                                    perturb_fn=ident, featurize_fn=feat)[0]
    u1 = score_uncertainty_waveform(clip, TableModel([0.0] * 4), WaveformPerturbConfig(K=4),
                                    perturb_fn=ident, featurize_fn=feat)[0]
    u3 = score_uncertainty_waveform(clip, TableModel([0.8, 0.6]), WaveformPerturbConfig(K=2),
                                    perturb_fn=ident, featurize_fn=feat)[0]
    rng = np.random.default_rng(0)
    m = Classifier(ClassifierConfig(num_classes=5, seed=0))
    clips = [LabeledClip(i, int(rng.integers(0, 5)), rng.standard_normal(64) * 3) for i in range(1000)]
    u = score_uncertainty_embedding(clips, m, EmbeddingPerturbConfig(1.5, 4, 0))
    random_probs = uncertainty_from_probs(rng.uniform(0, 1, (1000, 4)))
    in_range = bool(np.all((u >= 0) & (u <= 1)) and np.all((random_probs >= 0) & (random_probs <= 1)))
    ok = abs(u0) <= 1e-12 and abs(u1 - 1) <= 1e-12 and abs(u3 - 0.3) <= 1e-12 and in_range
    verdict(4, "Monte-Carlo uncertainty arithmetic", ok, f"u={u0:g}, {u1:g}, {u3:.15f}; range ok={in_range}")


def test_embedding_perturbation_contracts(verdict):
    rng = np.random.default_rng(0)
    e = rng.standard_normal(64)
    exact = np.array_equal(perturb_embedding(e, 0.0, 8, rng), np.tile(e, (8, 1)))
    worst = 0.0
    for _ in range(10_000):
        lam = rng.uniform(0, 4)
        e = rng.standard_normal(16) * rng.uniform(0.01, 10)
        d = np.abs(perturb_embedding(e, lam, 1, rng)[0] - e)
        bound = lam / 2 * e.std()
        worst = max(worst, float(np.max(d - bound)))
    const = np.full(16, -2.5)
    flat = np.array_equal(perturb_embedding(const, 3.0, 4, rng), np.tile(const, (4, 1)))
    verdict(5, "embedding perturbation contracts", exact and worst <= 0 and flat,
            f"lambda=0 exact={exact}, max bound excess {worst:.2e}, std=0 exact={flat}")


def test_cost_claim(verdict, bundled):
    start = time.perf_counter()
    cfg, ds = bundled
    stream = build_task_stream(ds, cfg.classes_per_task, cfg.stream.tasks, cfg.seeds[0])
    model = trained_reference_model(ds, stream, cfg, cfg.seeds[0])
    pool = [c for t in stream.tasks for c in t.train][:200]
    N = len(pool)
    counts_ok, times = True, {}
    for K in (2, 4, 6):
        w = measure_mua_cost(model, pool, MethodConfig("uncertainty", K=K, family="shift"), 50, ds.frontend)
        e = measure_mua_cost(model, pool, MethodConfig("uncertainty++", K=K), 50, ds.frontend, repeats=3)
        counts_ok &= w["backbone_passes"] == N * K and e["backbone_passes"] == N
        times[K] = (w["avg_seconds"], e["avg_seconds"])
    ratio = times[6][0] / times[6][1]
    elapsed = time.perf_counter() - start
    verdict(6, "backbone passes N*K vs N and wall-time ratio at K=6", N == 200 and counts_ok and ratio > 2
            and elapsed < 180, f"N={N}, counts exact={counts_ok}, ratio {ratio:.1f}x, {elapsed:.1f}s")


def test_forgetting_reproduction(verdict, bundled):
    start = time.perf_counter()
    cfg, ds = bundled
    doc = run_experiment(cfg, ds)
    m = doc["methods"]
    ft = m["finetune"]
    replay = [k for k in doc["method_order"] if k != "finetune"]
    a = ft["bwt"] < -0.15 and all(m[k]["bwt"] > ft["bwt"] + 0.05 for k in replay)
    b = all(m[k]["acc"] >= ft["acc"] + 0.10 for k in replay)
    c = m["uncertainty++"]["acc"] >= m["random"]["acc"] - 0.02
    elapsed = time.perf_counter() - start
    table = ", ".join(f"{k} {m[k]['acc']:.3f}/{m[k]['bwt']:.3f}" for k in doc["method_order"])
    verdict(7, "forgetting trend on the bundled synthetic stream (3 seeds)", a and b and c and elapsed < 600,
            f"(a)={a} (b)={b} (c)={c}; ACC/BWT {table}; {elapsed:.0f}s")


def test_metric_identities(verdict):
    nan = np.nan
    R_same = np.array([[0.6, nan, nan], [0.6, 0.8, nan], [0.6, 0.8, 0.7]])
    zero = compute_bwt(R_same) == 0.0
    two = abs(compute_bwt([[0.9, nan], [0.7, 0.85]]) - (-0.2)) <= 1e-12
    acc = abs(compute_acc([[nan] * 3, [nan] * 3, [0.9, 0.7, 0.5]]) - 0.7) <= 1e-12
    verdict(8, "ACC/BWT identities", zero and two and acc, f"BWT=0 {zero}, two-task -0.2 {two}, ACC 0.7 {acc}")


def test_determinism(verdict, tmp_path):
    outs = []
    for name in ("first", "second"):
        assert main(["run", str(default_config_path()), "--seed", "0", "--out", str(tmp_path / name)]) == 0
        doc = json.loads((tmp_path / name / "results.json").read_text(encoding="utf-8"))
        outs.append(json.dumps(strip_timing(doc), indent=2, sort_keys=True).encode())
    verdict(9, "run twice gives byte-identical results.json (timing excluded)", outs[0] == outs[1],
            f"{len(outs[0])} bytes")


def test_frontend(verdict):
    start = time.perf_counter()
    peaks_ok, slopes = True, []
    sr = 16000
    for seed in range(5):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(5, 500))
        t = np.arange(sr) / sr
        spec = stft(np.sin(2 * np.pi * k * sr / 1024 * t + rng.uniform(0, 2 * np.pi)))
        peaks_ok &= bool(np.all(np.argmax(np.abs(spec), axis=1) == k))
        for alpha in (0.0, 2.0):
            x = colored_noise(2 ** 15, alpha, rng)
            p = np.abs(np.fft.rfft(x)) ** 2
            f = np.fft.rfftfreq(x.size)
            slope = np.polyfit(np.log(f[1:]), np.log(p[1:]), 1)[0]
            slopes.append(abs(slope + alpha))
    elapsed = time.perf_counter() - start
    verdict(10, "STFT bin-centre peak and colored-noise PSD slope", peaks_ok and max(slopes) <= 0.3 and elapsed < 30,
            f"peaks ok={peaks_ok}, max |slope+alpha| {max(slopes):.3f}, {elapsed:.2f}s")
