"""Acceptance criteria 1-9, each at its stated tolerance."""
import math
import time
from itertools import combinations
from fractions import Fraction

import numpy as np
import pytest

from pinleak.attack import attempts_to_guess, base_attack
from pinleak.audio import detect_keystrokes, match_ground_truth
from pinleak.cli import main
from pinleak.evaluation import (
    AD_CRITICAL_1PCT,
    Condition,
    anderson_darling,
    baseline,
    chi_square_2x2,
    condition_ranks,
    extraction_error_report,
    guessing_cdf,
)
from pinleak.keypad import CLASSES, parse_triplet, pins_of_triplet, thermal_candidates
from pinleak.synth import GeneratorConfig, generate_traces, render_audio, stream_rng
from pinleak.timing import GammaParams, TimingModel, fit_model

K = 100
CLASSES_BY_SQ = {c.squared: c for c in CLASSES}


def brute_force_groups():
    """PINs grouped by triplet with plain loops over key coordinates."""
    pos = {1: (0, 0), 2: (0, 1), 3: (0, 2), 4: (1, 0), 5: (1, 1), 6: (1, 2), 7: (2, 0), 8: (2, 1), 9: (2, 2), 0: (3, 1)}
    groups = {}
    for n in range(10_000):
        d = [int(ch) for ch in f"{n:04d}"]
        key = tuple(
            (pos[a][0] - pos[b][0]) ** 2 + (pos[a][1] - pos[b][1]) ** 2 for a, b in zip(d, d[1:])
        )
        groups.setdefault(key, []).append(f"{n:04d}")
    return groups


def test_criterion_1_keypad_oracle(acceptance):
    t0 = time.perf_counter()
    groups = brute_force_groups()
    zero = pins_of_triplet(parse_triplet("Z,Z,Z"))
    unit = pins_of_triplet(parse_triplet("U1,U1,U1"))
    zu3z = pins_of_triplet(parse_triplet("Z,U3,Z"))
    same = all(pins_of_triplet(parse_triplet([CLASSES_BY_SQ[s] for s in key])) == pins for key, pins in groups.items())
    elapsed = time.perf_counter() - t0
    ok = (len(zero) == 10 and len(unit) == 216 and set(zu3z) == {"0022", "2200"}
          and same and len(groups) == 454 and elapsed < 1.0)
    acceptance(1, ok, f"|ZZZ|={len(zero)} |U1U1U1|={len(unit)} ZU3Z={zu3z} "
                      f"all {len(groups)} triplets equal brute force={same} ({elapsed:.2f}s)")
    assert ok


def test_criterion_2_thermal(acceptance):
    t0 = time.perf_counter()
    sizes = {}
    total = 0
    for j in range(1, 5):
        counts = {len(thermal_candidates(keys)) for keys in combinations(range(10), j)}
        n_sets = math.comb(10, j)
        sizes[j] = counts
        total += n_sets * next(iter(counts))
    elapsed = time.perf_counter() - t0
    ok = sizes == {1: {1}, 2: {14}, 3: {36}, 4: {24}} and total == 10_000 and elapsed < 1.0
    acceptance(2, ok, f"class sizes {sizes}, weighted sum {total} ({elapsed:.2f}s)")
    assert ok


def test_criterion_3_audio_round_trip(acceptance):
    t0 = time.perf_counter()
    cfg = GeneratorConfig(seed=2024, noise_snr_db=0.0)
    traces = generate_traces(cfg, 500, 1)
    reports, worst = [], 0.0
    for i, tr in enumerate(traces):
        clip = render_audio(tr, cfg, stream_rng(cfg.seed, 2, i))
        det = detect_keystrokes(clip)
        reports.append(match_ground_truth(det, tr.timestamps_ms, 25.0))
        # any detection near a press but outside 25 ms would show up here
        wide = match_ground_truth(det, tr.timestamps_ms, 100.0)
        if wide.matches:
            worst = max(worst, float(np.max(np.abs(wide.errors))))
    rep = extraction_error_report(reports)
    elapsed = time.perf_counter() - t0
    ok = rep["detection_rate"] >= 0.98 and worst <= 25.0 and rep["mean_abs_gap_error_ms"] <= 8.0 and elapsed < 120
    acceptance(3, ok, f"rate={rep['detection_rate']:.4f} max|err|={worst:.2f}ms "
                      f"mean|gap err|={rep['mean_abs_gap_error_ms']:.3f}ms "
                      f"p75/p97={rep['abs_gap_error_p75_ms']:.2f}/{rep['abs_gap_error_p97_ms']:.2f}ms "
                      f"fp={rep['false_positives']} ({elapsed:.1f}s)")
    assert ok


def test_criterion_4_generator_fitter(acceptance):
    t0 = time.perf_counter()
    cfg = GeneratorConfig(seed=4)
    model = fit_model(generate_traces(cfg, 10_000, 1), mode_filter="single_finger")
    worst = 0.0
    for c in CLASSES:
        want, got = cfg.class_params[c], model.per_class[c]
        worst = max(worst, abs(got.shape / want.shape - 1), abs(got.scale / want.scale - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.10 and not model.fallback and elapsed < 60
    acceptance(4, ok, f"worst relative error {worst:.4f} over 8 classes x (shape, scale) ({elapsed:.1f}s)")
    assert ok


def sf_setup(n_test=2000):
    cfg = GeneratorConfig(seed=5)
    model = fit_model(generate_traces(cfg, 10_000, 1), mode_filter="single_finger")
    test = generate_traces(GeneratorConfig(seed=6), n_test, 1)
    return model, test


def test_criterion_5_dominance(acceptance):
    model, test = sf_setup()
    conds = [
        Condition("BA"),
        Condition("VPK1", vpk_position=0),
        Condition("T", thermal=True),
        Condition("ALL", vpk_position=0, thermal=True, typist_mode="truth"),
    ]
    ranks = condition_ranks({"single_finger": model}, test, conds)
    c = {name: guessing_cdf(r, K).cdf for name, r in ranks.items()}
    n = len(test)
    rg = baseline("RG", K).values

    def excess(lo, hi, ks):
        """Largest shortfall of hi below lo, in units of the two-sample binomial sigma."""
        worst = -math.inf
        for k in ks:
            a, b = lo[k - 1], hi[k - 1]
            sd = math.sqrt((a * (1 - a) + b * (1 - b)) / n) or 1.0 / n
            worst = max(worst, float((a - b) / sd))
        return worst

    ks = range(1, K + 1)
    checks = {
        "BA>=RG": excess(rg, c["BA"], ks),
        "VPK1>=BA": excess(c["BA"], c["VPK1"], ks),
        "T>=VPK1@k<=3": excess(c["VPK1"], c["T"], range(1, 4)),
        "ALL>=BA": excess(c["BA"], c["ALL"], ks),
        "ALL>=VPK1": excess(c["VPK1"], c["ALL"], ks),
        "ALL>=T": excess(c["T"], c["ALL"], ks),
    }
    ok = all(v <= 2.0 for v in checks.values())
    at = {name: round(float(v[4]), 4) for name, v in c.items()}
    acceptance(5, ok, f"max shortfall (sigma) {({k: round(v, 2) for k, v in checks.items()})}; CDF@5 {at}")
    assert ok


def test_criterion_6_mode_effect(acceptance):
    sf_cfg, op_cfg = GeneratorConfig(seed=7), GeneratorConfig(seed=8, typist_mode="other")
    bank = {
        "single_finger": fit_model(generate_traces(sf_cfg, 10_000, 1), mode_filter="single_finger"),
        "other": fit_model(generate_traces(op_cfg, 10_000, 1), mode_filter="other"),
    }
    sf_test = generate_traces(GeneratorConfig(seed=9), 2000, 1)
    op_test = generate_traces(GeneratorConfig(seed=10, typist_mode="other"), 2000, 1)
    cond = [Condition("MODE", typist_mode="truth")]
    sf5 = guessing_cdf(condition_ranks(bank, sf_test, cond)["MODE"], 5).at(5)
    op5 = guessing_cdf(condition_ranks(bank, op_test, cond)["MODE"], 5).at(5)
    ok = sf5 > op5 and sf5 - op5 >= 0.05
    acceptance(6, ok, f"CDF@5 SFP={sf5:.4f} OP={op5:.4f} gap={100 * (sf5 - op5):.2f} pp "
                      f"(OP model distance_flat={bank['other'].distance_flat})")
    assert ok


def test_criterion_7_baselines(acceptance):
    k = np.arange(1, 10_001)
    rg_exact = np.array_equal(baseline("RG", 10_000).values, k / 10_000)
    rgvpk_exact = np.array_equal(baseline("RGVPK", 10_000).values, np.minimum(k / 1000, 1.0))
    flat = TimingModel.uniform(GammaParams(8.0, 40.0))
    ranking = base_attack(flat, (250.0, 250.0, 250.0))
    rng = np.random.default_rng(77)
    pins = rng.integers(0, 10_000, 10_000)
    ranks = [attempts_to_guess(ranking, f"{p:04d}") for p in pins]
    mean_rank = float(np.mean(ranks))
    cdf = guessing_cdf(ranks, 10_000)
    max_dev = float(np.max(np.abs(cdf.cdf - k / 10_000)))
    ok = rg_exact and rgvpk_exact and abs(mean_rank / 5000.5 - 1) <= 0.02 and max_dev <= 0.02
    acceptance(7, ok, f"RG exact={rg_exact} RGVPK exact={rgvpk_exact} "
                      f"uninformative mean rank={mean_rank:.1f} (5000.5) max|CDF-RG|={max_dev:.4f}")
    assert ok


def hand_chi_square(a, b, c, d):
    """Yates-corrected 2x2 statistic in exact rational arithmetic."""
    n = a + b + c + d
    rows, cols = (a + b, c + d), (a + c, b + d)
    total = Fraction(0)
    for i, row in enumerate(((a, b), (c, d))):
        for j, obs in enumerate(row):
            e = Fraction(rows[i] * cols[j], n)
            dev = max(abs(obs - e) - Fraction(1, 2), Fraction(0))
            total += dev * dev / e
    return total


@pytest.mark.slow
def test_criterion_8_statistics(acceptance):
    tables = [(90, 100, 50, 100), (30, 200, 12, 200), (120, 500, 160, 480), (7, 50, 19, 60)]
    chi_ok = True
    for a, an, b, bn in tables:
        got = chi_square_2x2(a, an, b, bn).statistic
        want = float(hand_chi_square(a, an - a, b, bn - b))
        chi_ok &= round(got, 6) == round(want, 6)
    ref = chi_square_2x2(90, 100, 50, 100).statistic
    rng = np.random.default_rng(11)
    reps = 1000
    passed = sum(anderson_darling(rng.standard_normal(10_000)).normal_at_1pct for _ in range(reps))
    bimodal = rng.choice([-5.0, 5.0], 1000) + rng.standard_normal(1000)
    rejects = anderson_darling(bimodal).statistic > AD_CRITICAL_1PCT
    ok = chi_ok and passed / reps >= 0.98 and rejects
    acceptance(8, ok, f"chi2 tables match to 6 dp={chi_ok} (90/10 vs 50/50: {ref:.6f}); "
                      f"AD normal pass {passed}/{reps}; bimodal rejected={rejects}")
    assert ok


def test_criterion_9_determinism(acceptance, tmp_path):
    def pipeline(root):
        d = root / "data"
        steps = [
            ["synth", "--pins", "20", "--entries", "3", "--seed", "99", "--out", d],
            ["extract", "--data", d, "--truth", "--jobs", "2"],
            ["train", "--truth", d / "truth.jsonl", "--out", root / "model.txt"],
            ["attack", "--model", root / "model.txt", "--detections", d / "detections.jsonl",
             "--truth", d / "truth.jsonl", "--out", root / "ba.jsonl"],
            ["attack", "--model", root / "model.txt", "--truth", d / "truth.jsonl", "--oracle-vpk", "0",
             "--oracle-thermal", "--out", root / "all.jsonl", "--jobs", "2"],
            ["eval", "--rankings", root / "ba.jsonl", "--rankings", root / "all.jsonl",
             "--detections", d / "detections.jsonl", "--baseline", "rg", "--p50", "--out", root / "report"],
        ]
        for argv in steps:
            assert main([str(a) for a in argv]) == 0
        files = [d / "manifest.json", d / "truth.jsonl", d / "detections.jsonl", root / "model.txt",
                 root / "ba.jsonl", root / "all.jsonl", root / "report/report.json", root / "report/p50.txt"]
        files += sorted((d / "clips").glob("*.wav"))
        return {f.relative_to(root).as_posix(): f.read_bytes() for f in files}

    a, b = pipeline(tmp_path / "run1"), pipeline(tmp_path / "run2")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = not differing and a.keys() == b.keys()
    acceptance(9, ok, f"{len(a)} artifacts compared, byte-identical={ok}" + (f", differing {differing}" if differing else ""))
    assert ok
