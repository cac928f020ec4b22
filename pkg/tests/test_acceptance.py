"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The zoo-level criteria train five zoos (seeds 0-4). Checkpoints are cached in
``$DUALATTACK_CACHE`` (default ``<repo>/.cache``), together with the wall time
of each original build. Study reports are written next to them under
``reports/`` for inspection. A cold run takes roughly an hour on one core.
"""
from __future__ import annotations

import functools
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dualattack import data as D
from dualattack import harness as H
from dualattack import models as M
from dualattack import numerics as nx
from dualattack.attacks import (
    AttackConfig,
    dual_attack,
    mask_from_indices,
    sample_patch_mask,
    ten_patch_stacking,
)
from dualattack.oracles import GRADCHECK_TOL, kronecker_checks, model_checks
from dualattack.rng import RngStream

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
BUDGET = 256
ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DUALATTACK_CACHE", ROOT / ".cache"))
JOBS = os.cpu_count() or 1


def _record(log, n, passed, detail):
    log[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def _fmt(values):
    return "[" + ", ".join(f"{v:.1f}" for v in values) + "]"


# -- shared zoo state ---------------------------------------------------------------------


def _zoo_dir():
    d = CACHE / "zoo"
    d.mkdir(parents=True, exist_ok=True)
    return d


@functools.cache
def zoo(seed):
    """(lab, build_seconds or None) for one zoo seed.

    The build time is recorded only by a cold build (no cached member), so a
    partially cached zoo never reports a misleadingly short time.
    """
    d = _zoo_dir()
    timing = d / f"build_seconds_seed{seed}.json"
    cold = not any(d.glob(f"zoo_seed{seed}_*.pgrd"))
    t0 = time.perf_counter()
    models, _, ev = D.model_zoo(seed, str(d), jobs=JOBS, return_data=True)
    if cold:
        timing.write_text(json.dumps({"seconds": time.perf_counter() - t0, "jobs": JOBS}))
    build = json.loads(timing.read_text())["seconds"] if timing.exists() else None
    return H.make_lab(seed, models, ev, budget=BUDGET), build


def _write(report):
    report.write(CACHE / "reports")
    return report


def _surrogate(lab):
    # the depth-3 surrogate: it serves the three-chunk path study too
    return lab.model("S0")


@functools.cache
def ablation(seed):
    return _write(H.run_ablation(zoo(seed)[0], jobs=JOBS))


@functools.cache
def pna_paths(seed):
    lab = zoo(seed)[0]
    return _write(H.run_pna_paths(lab, _surrogate(lab), jobs=JOBS))


@functools.cache
def stacking(seed):
    lab = zoo(seed)[0]
    return _write(H.run_patch_stacking(lab, _surrogate(lab), stages=(max(H.STAGES),), jobs=JOBS))


@functools.cache
def t_sweep(seed):
    lab = zoo(seed)[0]
    return _write(H.run_sweeps(lab, _surrogate(lab), lams=(), jobs=JOBS))


# -- criteria 1-3: gradient oracles --------------------------------------------------------


@functools.cache
def _model_checks():
    t0 = time.perf_counter()
    errs = model_checks(0, n_images=10)
    return errs, time.perf_counter() - t0


def test_criterion_01_gradient_correctness(acceptance_log):
    errs, secs = _model_checks()
    ok = errs["full"] < GRADCHECK_TOL and secs < 60
    _record(acceptance_log, 1, ok, f"full-policy rel-err {errs['full']:.2e} (< {GRADCHECK_TOL:g}), {secs:.1f}s")


def test_criterion_02_pna_correctness(acceptance_log):
    errs, _ = _model_checks()
    chunks = {k: v for k, v in errs.items() if k.startswith("frozen")}
    gap = errs["pna_vs_full_maxabs"]
    ok = errs["pna"] < GRADCHECK_TOL and gap > 1e-8 and max(chunks.values()) < GRADCHECK_TOL
    detail = (f"pna rel-err {errs['pna']:.2e}, per-chunk max {max(chunks.values()):.2e}, "
              f"pna-vs-full max-abs {gap:.2e}")
    _record(acceptance_log, 2, ok, detail)


def test_criterion_03_kronecker_identity(acceptance_log):
    t0 = time.perf_counter()
    err = kronecker_checks(range(20), (3, 4, 2))
    secs = time.perf_counter() - t0
    _record(acceptance_log, 3, err < 1e-6 and secs < 30, f"max err {err:.2e} over 20 seeds, {secs:.2f}s")


# -- criteria 4-5: attack invariants on a trained surrogate ---------------------------------------


def _reference_bim(model, x, y, eps, iters, alpha):
    delta = np.zeros_like(x)
    for _ in range(iters):
        logits, cache = M.vit_forward(model, x + delta)
        _, gl = nx.cross_entropy_fwd_bwd(logits, y, reduction="none")
        g, _ = M.vit_backward(model, cache, gl)
        delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
        delta = np.clip(delta, -x, 1 - x)
    return x + delta


def test_criterion_04_degeneracy(acceptance_log):
    lab = zoo(0)[0]
    s = _surrogate(lab)
    x, y = lab.images[:32], lab.labels[:32]
    eps = 16 / 255
    off = AttackConfig(use_pna=False, use_patchout=False, use_l2=False)
    bim = np.array_equal(dual_attack(s, x, y, off)[0], _reference_bim(s, x, y, eps, 10, eps / 10))
    fgsm_cfg = off.replace(iterations=1, step_size=eps)
    fgsm = np.array_equal(dual_attack(s, x, y, fgsm_cfg)[0], _reference_bim(s, x, y, eps, 1, eps))
    _record(acceptance_log, 4, bim and fgsm,
            f"all-off == reference BIM: {bim}; I=1, alpha=eps == FGSM: {fgsm} ({len(x)} images)")


def test_criterion_05_constraint_invariants(acceptance_log):
    lab = zoo(0)[0]
    x, y = lab.images[:32], lab.labels[:32]
    # every attack step calls check_constraints, which raises on violation; the
    # battery below re-checks the invariants from the outside as well
    cfgs = [AttackConfig.dual(), AttackConfig.bim(), AttackConfig.mi(), AttackConfig.dual(sign_step=False),
            AttackConfig.dual(sgm_decay=0.5), AttackConfig.dual(lam=10.0), AttackConfig.dual(l2_unmasked=True),
            AttackConfig.bim(use_patchout=True, patch_count=1), AttackConfig.dual(epsilon=4 / 255)]
    problems = []
    for s in lab.surrogates:
        for cfg in cfgs:
            xa, trace = dual_attack(s, x, y, cfg)
            if not (all(np.all(v <= cfg.epsilon) for v in trace.linf) and xa.min() >= 0 and xa.max() <= 1):
                problems.append(f"{s.label}/{cfg.digest()}")
        xa, _ = ten_patch_stacking(s, x, y, 3, AttackConfig.bim(iterations=3))
        if np.max(np.abs(xa - x)) > 16 / 255 + 1e-15 or xa.min() < 0 or xa.max() > 1:
            problems.append(f"{s.label}/stacking")
    mask_bad = 0
    for seed in range(200):
        s = lab.surrogates[seed % 4]
        c = s.config
        rng = RngStream(seed)
        t = 1 + int(rng.integers(0, c.num_patches))
        pm = sample_patch_mask(rng, c.num_patches, t, (c.image_h, c.image_w, c.channels, c.patch_size))
        mask_bad += int(pm.mask.sum()) != t * c.patch_size**2 * c.channels
    outside = 0
    s = _surrogate(lab)
    g = (s.config.image_h, s.config.image_w, s.config.channels, s.config.patch_size)
    cfg = AttackConfig.dual(lam=0.0, iterations=1, seed=5)
    xa, trace = dual_attack(s, x, y, cfg)
    for i in range(len(x)):
        m = mask_from_indices(trace.selected[0][i], g)
        outside += int(np.count_nonzero(xa[i][m == 0] != x[i][m == 0]))
    ok = not problems and mask_bad == 0 and outside == 0
    detail = (f"{len(cfgs) * 4 + 4} attack runs clean: {not problems}; bad masks {mask_bad}/200; "
              f"lambda=0 updates outside patches {outside}")
    _record(acceptance_log, 5, ok, detail)


# -- criterion 6: zoo gate and white-box potency --------------------------------------------------


def test_criterion_06_whitebox_potency(acceptance_log):
    details, ok, runtime = [], True, None
    for seed in SEEDS:
        lab, build = zoo(seed)  # model_zoo raises ZooGateError below 85%
        t0 = time.perf_counter()
        rep = H.run_transfer_matrix(lab, [AttackConfig.bim()], jobs=JOBS, whitebox=True)
        attack_secs = time.perf_counter() - t0
        if seed == SEEDS[0] and build is not None:
            runtime = build + attack_secs
        asrs = [r.asr for r in rep.rows]
        ok &= len(lab.labels) == BUDGET and min(asrs) >= 95.0
        details.append(f"s{seed}:{min(asrs):.1f}")
    ok &= runtime is not None and runtime < 600
    timing = f"{runtime:.0f}s" if runtime is not None else "unknown (clear the seed-0 cache for a cold build)"
    detail = (f"9 models gated >= 85%; min white-box BIM ASR per seed {' '.join(details)}; "
              f"seed-0 zoo build + attack {timing} on {JOBS} core(s)")
    _record(acceptance_log, 6, ok, detail)


def test_zoo_members_disagree():
    # every member is near 100% on the eval split, so argmax agreement there is
    # saturated; probe with clean renders at twice the zoo noise instead
    models = D.model_zoo(0, str(_zoo_dir()))
    _, probe = D.gen_dataset(D.DatasetSpec(seed=0, noise_std=2 * D.ZOO_NOISE))
    preds = [M.predict(m, probe.images) for m in models]
    agree = [np.mean(preds[i] == preds[j]) for i in range(len(preds)) for j in range(i + 1, len(preds))]
    assert max(agree) < 1.0


# -- criteria 7-10: desk-scale directional claims ---------------------------------------------


def test_criterion_07_dual_beats_bim_and_ablation(acceptance_log):
    wins_bim, wins_abl, duals, bims = 0, 0, [], []
    for seed in SEEDS:
        lab, rep = zoo(seed)[0], ablation(seed)
        m = {a: H.vit_victim_mean(rep, lab, a) for a in rep.attacks()}
        duals.append(m["PatchOut+L2+PNA"])
        bims.append(m["BIM"])
        wins_bim += m["PatchOut+L2+PNA"] > m["BIM"]
        wins_abl += all(m["PatchOut+L2+PNA"] > m[a] for a in ("PatchOut", "L2", "PNA"))
    ok = wins_bim == len(SEEDS) and wins_abl >= 4
    detail = (f"dual > BIM in {wins_bim}/5 seeds (dual {_fmt(duals)} vs BIM {_fmt(bims)}); "
              f"all-on > every single component in {wins_abl}/5")
    _record(acceptance_log, 7, ok, detail)


def test_criterion_08_attention_skipped_path(acceptance_log):
    wins, skip, none = 0, [], []
    for seed in SEEDS:
        rep = pna_paths(seed)
        skip.append(rep.mean_asr("paths-111"))
        none.append(rep.mean_asr("paths-000"))
        wins += skip[-1] > none[-1]
    _record(acceptance_log, 8, wins == len(SEEDS),
            f"all-skipped > none-skipped in {wins}/5 seeds ({_fmt(skip)} vs {_fmt(none)})")


def test_criterion_09_patch_stacking(acceptance_log):
    s = max(H.STAGES)
    wins, st, wh = 0, [], []
    for seed in SEEDS:
        rep = stacking(seed)
        st.append(rep.mean_asr(f"stacked-{s}"))
        wh.append(rep.mean_asr(f"whole-{s}"))
        wins += st[-1] > wh[-1]
    _record(acceptance_log, 9, wins >= 4,
            f"stacked-{s} > whole-{s} in {wins}/5 seeds ({_fmt(st)} vs {_fmt(wh)})")


def test_criterion_10_interior_patch_count(acceptance_log):
    interior, argmax = 0, []
    for seed in SEEDS:
        rep = t_sweep(seed)
        grid = rep.metadata["t_grid"]
        curve = [rep.mean_asr(f"T={t}") for t in grid]
        best = grid[int(np.argmax(curve))]
        argmax.append(best)
        interior += grid[0] < best < grid[-1]
    _record(acceptance_log, 10, interior >= 4,
            f"argmax T interior in {interior}/5 seeds (argmax {argmax}, grid {rep.metadata['t_grid']})")


# -- criterion 11: CLI determinism ----------------------------------------------------------


CLI_RUNS = [  # (argv, writes artifacts under --out-dir)
    (["gen-data"], True),
    (["train", "--member", "V2", "--epochs", "1"], True),
    (["zoo"], False),
    (["attack", "--surrogate", "S0"], True),
    (["transfer-matrix"], True),
    (["ablate", "--surrogate", "S2"], True),
    (["pna-paths"], True),
    (["sweep"], True),
    (["patch-stacking", "--stages", "1,2"], True),
    (["gradcheck"], False),
]


def _cli(argv, out_dir, jobs):
    cmd = [sys.executable, "-m", "dualattack", *argv, "--seed", "0", "--out-dir", str(out_dir),
           "--jobs", str(jobs)]
    if argv[0] not in ("gen-data", "train", "gradcheck"):
        cmd += ["--zoo-dir", str(_zoo_dir()), "--budget", "32"]
    if argv[0] not in ("gen-data", "train", "zoo", "gradcheck"):
        cmd += ["--iters", "4"]
    proc = subprocess.run(cmd, capture_output=True, check=False)
    stdout = proc.stdout.replace(str(out_dir).encode(), b"<out>")
    files = {str(p.relative_to(out_dir)): p.read_bytes() for p in sorted(Path(out_dir).rglob("*")) if p.is_file()}
    return proc.returncode, stdout, files


def test_criterion_11_cli_determinism(acceptance_log, tmp_path):
    zoo(0)
    bad, n_files = [], 0
    for argv, writes in CLI_RUNS:
        runs = [_cli(argv, tmp_path / f"{argv[0]}_{i}", jobs) for i, jobs in enumerate((1, 1, 8))]
        n_files += len(runs[0][2])
        same = runs[0] == runs[1] == runs[2]
        if runs[0][0] != 0 or not same or (writes and not runs[0][2]):
            bad.append(argv[0])
    detail = (f"{len(CLI_RUNS)} commands run with jobs 1, 1, 8: {n_files} artifacts compared byte for byte, "
              f"mismatches: {', '.join(bad) or 'none'}")
    _record(acceptance_log, 11, not bad, detail)
