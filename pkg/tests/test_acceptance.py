"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy cross-validation results are computed once per session and shared by
criteria 4, 5 and 6.
"""

import csv
import time
from dataclasses import replace

import numpy as np
import pytest

from smile_ssl.cli import dispatch
from smile_ssl.config import benchmark_config
from smile_ssl.data import generate_synthetic, kfold_subject_split, rank_pool
from smile_ssl.evaluation import (VARIANTS, AblationResult, cross_domain_datasets, run_cross_domain,
                                  run_cross_validation, write_report)
from smile_ssl.gradcheck import gradient_report
from smile_ssl.losses import mv_bt_loss, vl_align_loss
from smile_ssl.tensor import Tensor
from smile_ssl.train import build_model, probe_correlation, run_training

ABLATION_SEEDS = [0, 1, 2, 3, 4]
LEARNABILITY_SEEDS = [0, 1, 2]


@pytest.fixture(scope="session")
def ablations():
    """Per seed: dataset, AblationResult and the wall time of the full-objective CV."""
    runs = {}
    for seed in ABLATION_SEEDS:
        cfg = benchmark_config().with_seed(seed)
        start = time.perf_counter()
        ds = generate_synthetic(cfg.data)
        cv = {"full": run_cross_validation(ds, cfg.eval.k, cfg.train)}
        full_time = time.perf_counter() - start
        for name, disabled in VARIANTS.items():
            if disabled:
                cv[name] = run_cross_validation(ds, cfg.eval.k, replace(cfg.train, disabled_components=list(disabled)))
        runs[seed] = (ds, AblationResult({n: r.mean_accuracy for n, r in cv.items()}, cv), full_time)
    return runs


def test_criterion_1_gradient_oracle(acceptance):
    start = time.perf_counter()
    reports = {seed: gradient_report(seed, batch=4, views=3, dim=8, h=1e-5) for seed in (0, 1, 7)}
    elapsed = time.perf_counter() - start
    worst = {name: max(r[name] for r in reports.values()) for name in reports[0]}
    passed = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    acceptance(1, passed, f"max rel. err per check: {detail}")
    assert passed


def test_criterion_2_closed_forms(acceptance):
    mv = mv_bt_loss(Tensor([[1.0, 0.5], [0.5, 1.0]]), 0.005).item()
    b = 6
    same = Tensor(np.ones((b, 4)))
    uniform = vl_align_loss([same, same, same], same, same).item()
    eye = Tensor(np.eye(2))
    two = vl_align_loss([eye], eye, eye, tau=1.0).item()
    rng = np.random.default_rng(0)
    pools = [rank_pool(np.tile(rng.normal(size=5) * 10.0 ** rng.integers(-3, 4), (t, 1))) for t in range(1, 33)]
    checks = {
        "mv_bt 0.0025": abs(mv - 0.0025) <= 1e-12,
        "vl_align ln B": abs(uniform - np.log(b)) <= 1e-9,
        "vl_align 0.313262": abs(two - 0.313262) <= 1e-6,
        "rank_pool constant = 0": all(not p.any() for p in pools),
    }
    passed = all(checks.values())
    acceptance(2, passed, f"mv_bt={mv!r}, lnB err={abs(uniform - np.log(b)):.1e}, "
                          f"B2 case={two:.7f}, rank_pool zero for T=1..32: {checks['rank_pool constant = 0']}")
    assert passed, checks


def test_criterion_3_decorrelation(acceptance):
    start = time.perf_counter()
    ratios, diags = [], []
    for seed in ABLATION_SEEDS:
        run = benchmark_config().with_seed(seed)
        ds = generate_synthetic(run.data)
        cfg = run.train
        # the multi-view decorrelation objective on its own
        cfg.disabled_components = ["vl_align", "red_min"]
        idx = np.arange(len(ds))
        _, off0 = probe_correlation(build_model(ds, cfg), ds, idx, cfg)
        diag, off = probe_correlation(run_training(ds, None, cfg).model, ds, idx, cfg)
        ratios.append(off / off0)
        diags.append(diag)
    elapsed = time.perf_counter() - start
    ratio, diag = float(np.median(ratios)), float(np.median(diags))
    passed = ratio <= 0.5 and 0.8 <= diag <= 1.2 and elapsed < 600
    # context only: the same probe under the full joint objective
    run = benchmark_config()
    ds = generate_synthetic(run.data)
    idx = np.arange(len(ds))
    _, f0 = probe_correlation(build_model(ds, run.train), ds, idx, run.train)
    _, f1 = probe_correlation(run_training(ds, None, run.train).model, ds, idx, run.train)
    acceptance(3, passed, f"mv-bt objective: median off-diag ratio {ratio:.3f} (<= 0.5), median diag {diag:.3f} "
                          f"(in [0.8, 1.2]); {elapsed:.0f}s; full objective seed 0 ratio {f1 / f0:.3f} (info)")
    assert passed


def test_criterion_4_zero_shot_learnability(ablations, acceptance):
    accs = [ablations[s][1].accuracy["full"] for s in LEARNABILITY_SEEDS]
    oracles = [ablations[s][0].oracle_accuracy for s in LEARNABILITY_SEEDS]
    runtime = sum(ablations[s][2] for s in LEARNABILITY_SEEDS)
    median = float(np.median(accs))
    passed = median >= 0.85 and min(oracles) > 0.95 and runtime < 1800
    acceptance(4, passed, f"median 10-fold accuracy {100 * median:.2f}% (>= 85%), per seed "
                          f"{[round(100 * a, 2) for a in accs]}, oracle min {min(oracles):.3f}; {runtime:.0f}s")
    assert passed


def test_criterion_5_ablation_direction(ablations, acceptance, tmp_path):
    names = ["full", "no_mv_bt", "no_vl_align", "no_red_min"]
    med = {n: float(np.median([ablations[s][1].accuracy[n] for s in ABLATION_SEEDS])) for n in names}
    direction = all(med["full"] >= med[n] for n in names[1:])
    res = ablations[ABLATION_SEEDS[0]][1]
    write_report(tmp_path, "acceptance", ablation=res)
    with open(tmp_path / "report" / "improvement_matrix_acceptance.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    emitted = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    antisymmetric = all(np.array_equal(ablations[s][1].improvement_matrix(), -ablations[s][1].improvement_matrix().T)
                        for s in ABLATION_SEEDS) and np.array_equal(emitted, -emitted.T)
    passed = direction and antisymmetric
    acceptance(5, passed, "median accuracy " + ", ".join(f"{n} {100 * v:.2f}%" for n, v in med.items())
               + f"; improvement matrix antisymmetric: {antisymmetric}")
    assert passed


def test_criterion_6_protocol_invariants(ablations, acceptance):
    disjoint = True
    for seed in ABLATION_SEEDS:
        ds = ablations[seed][0]
        for k in (2, 5, 10):
            for tr, te in kfold_subject_split(ds, k, seed):
                disjoint &= not set(ds.subject_ids[tr]) & set(ds.subject_ids[te])
    simplex = max(max(cv.max_simplex_error) for s in ABLATION_SEEDS for cv in ablations[s][1].cv.values())
    frozen = all(all(cv.frozen_unchanged) for s in ABLATION_SEEDS for cv in ablations[s][1].cv.values())
    runs = sum(len(cv.folds) for s in ABLATION_SEEDS for cv in ablations[s][1].cv.values())
    passed = disjoint and simplex <= 1e-12 and frozen
    acceptance(6, passed, f"subject-disjoint k=2,5,10: {disjoint}; max simplex error {simplex:.1e} over {runs} runs; "
                          f"frozen text bit-identical: {frozen}")
    assert passed


def test_criterion_7_determinism(acceptance, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [dispatch(["cross-val", "--seed", "0", "--out", str(o)]) for o in outs]
    texts = [(o / "report" / "metrics_cross_val.csv").read_bytes() for o in outs]
    passed = codes == [0, 0] and texts[0] == texts[1] and len(texts[0]) > 0
    acceptance(7, passed, f"exit codes {codes}; metrics CSVs byte-identical: {texts[0] == texts[1]} "
                          f"({len(texts[0])} bytes)")
    assert passed


def test_criterion_8_cross_domain(acceptance):
    cross, within, valid = [], [], True
    for seed in ABLATION_SEEDS:
        run = benchmark_config().with_seed(seed)
        source, target, held = cross_domain_datasets(run.data, run.eval.target_domain_shift,
                                                     run.eval.target_noise_sd, run.eval.target_seed_offset)
        res = run_cross_domain(source, target, run.eval.class_subset, run.train, held)
        m = res.metrics
        valid &= (len(m.class_names) == 2 and m.confusion.shape == (2, 2) and m.n > 0
                  and 0.0 <= m.accuracy <= 1.0 and np.isfinite(m.macro_f1) and not res.degenerate)
        cross.append(m.accuracy)
        within.append(res.in_domain.accuracy)
    mc, mi = float(np.median(cross)), float(np.median(within))
    passed = mc <= mi and valid
    acceptance(8, passed, f"median cross-domain {100 * mc:.2f}% <= in-domain {100 * mi:.2f}% "
                          f"(2-class subset, valid report: {valid})")
    assert passed
