"""Acceptance gate: one test per shipping criterion, each printing a
PASS line with its measured numbers.

The desk-scale experiment (20 subjects, 5 folds, 4 variants, schedule
scale 0.1, fixed master seed) is executed twice into separate
directories by a module-scoped fixture and shared by the determinism,
headline-metric, detector, and leakage criteria.  Expected pooled
metrics live in ``tests/fixtures/desk_metrics.json``; regenerate them
with ``python3 tests/regen_fixtures.py`` after any intentional change
to the desk configuration (values are platform-pinned by the fixed
seed).
"""

import json
import os
import subprocess
import sys
import time
from itertools import combinations, product

import numpy as np
import pytest

from msrae import corrupt, detect, experiment, metrics, model, nn, phantom, train
from msrae.tensor import Rng

from helpers import (
    brute_force_u, check_loss_gradients, enumeration_ap, enumeration_mwu_p,
    fd_gradient, max_rel_err, naive_conv3d, pair_counting_auc,
)

FIXTURE_PATH = os.path.join(os.path.dirname(__file__), "fixtures", "desk_metrics.json")

DESK_RUNTIME_BUDGET_S = 45 * 60  # stated budget on a 4-core laptop CPU


def _ok(criterion: str, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS -- {detail}")


# --------------------------------------------------------------------- #
# criterion 1: gradient correctness                                      #
# --------------------------------------------------------------------- #


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = Rng(101)
    worst_layer = 0.0

    # conv layer (linear: no kink exclusion needed)
    layer = nn.ConvLayer(*(a.astype(np.float64) for a in
                           (nn.he_init(rng, 2, 2, 3).weights, np.zeros(2))))
    x = rng.normal((1, 2, 4, 4, 4)).astype(np.float64)
    gout = rng.normal((1, 2, 4, 4, 4)).astype(np.float64)
    grads = nn.conv3d_backward(layer, x, gout)

    def conv_value():
        return float(np.sum(nn.conv3d_forward(layer, x) * gout))

    for arr, got in ((layer.weights, grads.d_weights), (layer.bias, grads.d_bias),
                     (x, grads.d_input)):
        fd, _ = fd_gradient(conv_value, arr, eps=1e-3)
        worst_layer = max(worst_layer, max_rel_err(got, fd))

    # prelu (kinks at zero inputs)
    pl = nn.PReluLayer(np.full(2, 0.25))
    pgrads = nn.prelu_backward(pl, x, gout)

    def prelu_value():
        return float(np.sum(nn.prelu_forward(pl, x) * gout))

    fd, _ = fd_gradient(prelu_value, pl.slope, eps=1e-3)
    worst_layer = max(worst_layer, max_rel_err(pgrads.d_slope, fd))
    fd, valid = fd_gradient(prelu_value, x, eps=1e-3,
                            signature_fn=lambda: (x > 0).tobytes())
    worst_layer = max(worst_layer, max_rel_err(pgrads.d_input[valid], fd[valid]))

    # maxpool (ties) and upsample (linear)
    _, idx = nn.maxpool2_forward(x)
    dxp = nn.maxpool2_backward(idx, gout2 := rng.normal((1, 2, 2, 2, 2)).astype(np.float64))

    def pool_value():
        return float(np.sum(nn.maxpool2_forward(x)[0] * gout2))

    fd, valid = fd_gradient(pool_value, x, eps=1e-3,
                            signature_fn=lambda: nn.maxpool2_forward(x)[1].tobytes())
    worst_layer = max(worst_layer, max_rel_err(dxp[valid], fd[valid]))

    du = nn.upsample2_backward(gout3 := rng.normal((1, 2, 8, 8, 8)).astype(np.float64))

    def up_value():
        return float(np.sum(nn.upsample2_forward(x) * gout3))

    fd, _ = fd_gradient(up_value, x, eps=1e-3)
    worst_layer = max(worst_layer, max_rel_err(du, fd))

    # end-to-end loss on the stated patch and channel plan
    cfg = model.ModelConfig(enc_channels=(2, 3), dec_channels=(2, 2))
    params = model.init_params(cfg, rng).astype(np.float64)
    xc = rng.normal((1, 1, 4, 8, 8), 0.5, 0.2).astype(np.float64)
    xn = xc + rng.normal(xc.shape, 0.0, 0.02).astype(np.float64)
    worst_e2e, excluded = check_loss_gradients(params, xc, xn, model.LossConfig(), eps=1e-3)

    elapsed = time.perf_counter() - t0
    assert worst_layer < 1e-4
    assert worst_e2e < 1e-4
    assert elapsed < 60.0
    _ok("1", f"layer max rel err {worst_layer:.2e}, end-to-end {worst_e2e:.2e} "
             f"({excluded:.1%} kink-excluded), {elapsed:.1f}s")


# --------------------------------------------------------------------- #
# criterion 2: convolution oracle                                        #
# --------------------------------------------------------------------- #


def test_criterion_2_convolution_oracle():
    rng = Rng(202)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        spatial = tuple(int(rng.integers(1, 7)) for _ in range(3))
        kernel = 1 if rng.uniform() < 0.2 else 3
        layer = nn.he_init(rng, co, ci, kernel)
        x = rng.normal((b, ci) + spatial)
        got = nn.conv3d_forward(layer, x)
        want = naive_conv3d(layer.weights, layer.bias, x)
        worst = max(worst, max_rel_err(got, want))
    assert worst < 1e-5
    _ok("2", f"100 random shapes vs nested-loop oracle, max rel err {worst:.2e}")


# --------------------------------------------------------------------- #
# criterion 3: metric oracles                                            #
# --------------------------------------------------------------------- #


def test_criterion_3_metric_oracles():
    rng = Rng(303)
    worst_auc = worst_ap = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 101))
        scores = rng.integers(0, 12, size=n).astype(float)
        labels = (rng.uniform(size=n) > 0.5).astype(int)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[-1] = 0
        samples = [metrics.ScoredSample(s, int(l)) for s, l in zip(scores, labels)]
        _, auc = metrics.roc_auc(samples)
        worst_auc = max(worst_auc, abs(auc - pair_counting_auc(scores, labels)))
        _, ap = metrics.pr_ap(samples)
        worst_ap = max(worst_ap, abs(ap - enumeration_ap(scores, labels)))
    assert worst_auc <= 1e-9
    assert worst_ap <= 1e-9

    u_exact = p_exact = True
    for n, m in product(range(1, 9), range(1, 9)):
        a = rng.integers(0, 5, size=n).astype(float)
        b = rng.integers(0, 5, size=m).astype(float)
        u, p = metrics.mann_whitney_u(a, b, mode="exact")
        u_exact &= (u == brute_force_u(a, b))
        p_exact &= (p == enumeration_mwu_p(a, b))
    assert u_exact and p_exact
    _ok("3", f"AUC dev {worst_auc:.1e}, AP dev {worst_ap:.1e}, "
             f"exact U and p identical for all n,m <= 8")


# --------------------------------------------------------------------- #
# criterion 4: corruption contracts                                      #
# --------------------------------------------------------------------- #


def test_criterion_4_corruption_contracts():
    rng = Rng(404)
    pool = rng.normal((5, 1, 2, 4, 4))
    out, partner = corrupt.corrupt(corrupt.CorruptionSpec(0.0, 0.0), pool[1], pool, rng, 1)
    assert partner is None and out.tobytes() == pool[1].tobytes()
    out, partner = corrupt.corrupt(corrupt.CorruptionSpec(1.0, 0.0), pool[1], pool, rng, 1)
    assert partner != 1
    np.testing.assert_allclose(out, pool[partner], atol=1e-7)
    table = {"SAE": (0.0, 0.0), "SDAE": (0.0, 0.1),
             "SAE-MSR": (0.1, 0.0), "SDAE-MSR": (0.1, 0.001)}
    for name, (alpha, sigma) in table.items():
        spec = corrupt.spec_for_variant(name)
        assert (spec.alpha, spec.sigma) == (alpha, sigma), name
    _ok("4", "identity, partner swap, and variant table all exact")


# --------------------------------------------------------------------- #
# criterion 5: protocol fidelity of the --full training log header       #
# --------------------------------------------------------------------- #


def test_criterion_5_full_schedule_header(tmp_path):
    cfg = experiment.desk_config(out_dir=str(tmp_path / "out"))
    # tiny cohort so the polled subprocess starts instantly
    from dataclasses import replace
    cfg = replace(cfg, cohort=replace(
        cfg.cohort, n_subjects=3, k_folds=3, name="hdr",
        strata=(phantom.Stratum(0.0, 0.2, 4),)))
    cfg_path = tmp_path / "config.json"
    experiment.save_config(cfg_path, cfg)
    experiment.run_gen_data(cfg)

    proc = subprocess.Popen(
        [sys.executable, "-m", "msrae", "train", "--config", str(cfg_path),
         "--variant", "SAE", "--fold", "0", "--full"],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    log_path = os.path.join(experiment.job_dir(cfg, "SAE", 0), "train_log.csv")
    try:
        deadline = time.time() + 120
        lines: list[str] = []
        while time.time() < deadline:
            if os.path.exists(log_path):
                with open(log_path) as fp:
                    lines = fp.read().splitlines()
                if len(lines) >= 6:
                    break
            time.sleep(0.2)
    finally:
        proc.terminate()
        proc.wait()
    assert len(lines) >= 6, "training log header never appeared"
    assert lines[0] == "# schedule stage=1 epochs=100 minibatches=100 learning_rate=0.001"
    assert lines[1] == "# schedule stage=2 epochs=80 minibatches=200 learning_rate=0.0005"
    assert lines[2] == "# schedule stage=3 epochs=60 minibatches=300 learning_rate=0.00025"
    assert lines[3] == "# schedule stage=4 epochs=40 minibatches=500 learning_rate=0.0001"
    assert "momentum=0.9" in lines[4] and "batch_size=32" in lines[4]
    assert lines[5].startswith("stage,epoch,")
    _ok("5", "--full header lists the four stages, momentum 0.9, batch 32")


# --------------------------------------------------------------------- #
# criteria 6-9 share two full desk-scale runs                            #
# --------------------------------------------------------------------- #


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    runs = []
    for tag in ("a", "b"):
        out = str(tmp_path_factory.mktemp(f"desk_{tag}"))
        cfg = experiment.desk_config(out_dir=out)
        t0 = time.perf_counter()
        report = experiment.run_all(cfg, jobs=2)
        runs.append({"cfg": cfg, "out": out, "report": report,
                     "runtime_s": time.perf_counter() - t0})
    return runs


def _file_map(root: str, keep) -> dict[str, bytes]:
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            if keep(rel):
                with open(path, "rb") as fp:
                    out[rel] = fp.read()
    return out


def test_criterion_6_determinism_and_runtime(desk_runs):
    a, b = desk_runs

    def keep(rel: str) -> bool:
        base = os.path.basename(rel)
        return (base == "scores.csv" or "checkpoint" in rel.split(os.sep)
                or rel.startswith(os.path.join("desk20x5", "report")))

    files_a = _file_map(a["out"], keep)
    files_b = _file_map(b["out"], keep)
    assert files_a.keys() == files_b.keys()
    diff = [rel for rel in files_a if files_a[rel] != files_b[rel]]
    assert not diff, f"byte differences in: {diff[:10]}"

    # training logs must also agree once the wall-clock column is dropped
    logs_a = _file_map(a["out"], lambda r: r.endswith("train_log.csv"))
    logs_b = _file_map(b["out"], lambda r: r.endswith("train_log.csv"))
    for rel in logs_a:
        strip = lambda blob: [",".join(ln.split(",")[:-1]) for ln in blob.decode().splitlines()]
        assert strip(logs_a[rel]) == strip(logs_b[rel]), rel

    runtime = max(a["runtime_s"], b["runtime_s"])
    assert runtime <= DESK_RUNTIME_BUDGET_S, f"desk run took {runtime/60:.1f} min"
    _ok("6", f"{len(files_a)} artifacts byte-identical across runs; "
             f"slower run {runtime/60:.1f} min (budget 45)")


def test_criterion_7_headline_metrics(desk_runs):
    report = desk_runs[0]["report"]
    cfg = desk_runs[0]["cfg"]
    task_a = report["tasks"]["mild_vs_severe"]["variants"]

    # (a) tuned difficulty: best variant clears 0.85 pooled AUC and every
    # variant beats chance significantly across folds
    best = max(v["pooled_auc"] for v in task_a.values())
    assert best >= 0.85, f"best pooled Task-A AUC {best:.3f} < 0.85"
    for variant, rep in task_a.items():
        folds = rep["fold_auc"]
        _, p = metrics.mann_whitney_u(folds, [0.5] * len(folds), mode="exact")
        assert np.mean(folds) > 0.5 and p < 0.05, (
            f"{variant}: fold AUCs {folds} not significantly above 0.5 (p={p:.4f})")

    # (b) frozen regression fixtures at +/- 1e-9 under the fixed seed
    with open(FIXTURE_PATH) as fp:
        frozen = json.load(fp)
    for task_name, task_rep in report["tasks"].items():
        for variant in cfg.variants:
            got = task_rep["variants"][variant]
            want = frozen["tasks"][task_name][variant]
            assert abs(got["pooled_auc"] - want["pooled_auc"]) <= 1e-9, (task_name, variant)
            assert abs(got["pooled_ap"] - want["pooled_ap"]) <= 1e-9, (task_name, variant)

    # (c) the directional claim is recorded with p-values, not gated
    claim = report["directional_claim"]
    assert claim["task"] == "mild_vs_severe"
    assert len(claim["pairs"]) == 4
    for pair in claim["pairs"]:
        assert 0.0 <= pair["p_fold_auc"] <= 1.0
    summary = ", ".join(
        f"{v}={task_a[v]['pooled_auc']:.3f}" for v in cfg.variants)
    _ok("7", f"pooled Task-A AUC {summary}; fixtures reproduced to 1e-9; "
             f"directional claim all_hold={claim['all_hold']} (recorded, not gated)")


def test_criterion_8_detector_self_consistency(desk_runs):
    cfg = desk_runs[0]["cfg"]
    cohort = phantom.load_cohort(experiment.cohort_dir(cfg))
    fracs = []
    for variant in cfg.variants:
        for fold in range(cfg.cohort.k_folds):
            ckpt = os.path.join(experiment.job_dir(cfg, variant, fold), "checkpoint")
            params, _ = model.load_checkpoint(ckpt)
            normals = cohort.normal_patches(fold, "val", cfg.calibration_grade_threshold)
            stats = detect.calibrate(params, normals)
            grades = detect.score_patches(params, stats, normals)
            fracs.append(float(np.mean(grades / normals[0].size)))
    mean_frac = float(np.mean(fracs))
    assert mean_frac <= 0.015, f"mean over-threshold fraction {mean_frac:.4f} > 1.5%"

    # monotonicity of the grade under constant error inflation
    rng = Rng(808)
    stats = detect.CalibrationStats(mu=0.05, sigma=0.02, n_voxels=10_000)
    for _ in range(50):
        err = np.abs(rng.normal((300,), 0.05, 0.03))
        base = detect.grade_from_error_map(stats, err)
        for c in (1e-4, 0.01, 0.1):
            assert detect.grade_from_error_map(stats, err + c) >= base
    _ok("8", f"mean calibration over-threshold fraction {mean_frac:.4%} "
             f"(max job {max(fracs):.4%}); grade monotone under inflation")


def test_criterion_9_leakage_audit(desk_runs):
    cfg = desk_runs[0]["cfg"]
    # independent scan straight from the on-disk manifest
    with open(os.path.join(experiment.cohort_dir(cfg), "manifest.json")) as fp:
        manifest = json.load(fp)
    grade_by_subject: dict[str, list[float]] = {}
    for row in manifest["patches"]:
        grade_by_subject.setdefault(row["subject_id"], []).append(row["stenosis_grade"])
    for fold_no, fold in enumerate(manifest["folds"]):
        splits = {k: set(fold[k]) for k in ("train", "val", "test")}
        for a, b in combinations(splits, 2):
            assert not splits[a] & splits[b], f"fold {fold_no}: {a} and {b} overlap"

    # the pools the trainer consumed: re-check their grades from the manifest
    cohort = phantom.load_cohort(experiment.cohort_dir(cfg))
    grade_by_patch = {row["patch_id"]: row["stenosis_grade"] for row in manifest["patches"]}
    for fold in range(cfg.cohort.k_folds):
        _, pool_ids = cohort.train_pool(fold, experiment.TRAIN_GRADE_THRESHOLD)
        offenders = [pid for pid in pool_ids if grade_by_patch[pid] >= 0.2]
        assert not offenders, f"fold {fold}: {len(offenders)} patches at grade >= 0.2"
    report = phantom.audit_splits(cohort)
    assert report["splits_disjoint"] and report["train_normals_only"]
    _ok("9", "subject splits disjoint per fold; training pools free of grade >= 0.2")
