"""Independent oracles used across the test suite.

Nothing here may call back into the code paths it checks: convolution is
re-done with nested loops, metrics with brute-force pair counting and
threshold enumeration, gradients with central finite differences.  The
finite-difference helpers also report, per coordinate, whether the
perturbation crossed a kink (PReLU branch flip, pooling argmax flip, or
an absolute-value sign flip), since difference quotients are meaningless
across those points.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from msrae import model as model_mod
from msrae import nn


# --------------------------------------------------------------------- #
# convolution oracle                                                     #
# --------------------------------------------------------------------- #


def naive_conv3d(weights: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Seven-nested-loop same-padded stride-1 convolution in float64."""
    w = weights.astype(np.float64)
    b, ci, d, h, ww = x.shape
    co, _, kd, kh, kw = w.shape
    out = np.zeros((b, co, d, h, ww))
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (kd // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))
    for n in range(b):
        for o in range(co):
            for z in range(d):
                for y in range(h):
                    for q in range(ww):
                        acc = float(bias[o])
                        for i in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        acc += xp[n, i, z + a, y + bb, q + c] * w[o, i, a, bb, c]
                        out[n, o, z, y, q] = acc
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --------------------------------------------------------------------- #
# finite differences with kink exclusion                                 #
# --------------------------------------------------------------------- #


def fd_gradient(value_fn, arr: np.ndarray, eps: float = 1e-3,
                signature_fn=None) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of ``value_fn`` w.r.t. ``arr`` (in place).

    Returns (gradient, valid_mask); a coordinate is invalid when the
    ``signature_fn()`` output differs between the +eps and -eps
    evaluations, i.e. the perturbation stepped across a kink or tie.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    valid = np.ones(arr.shape, dtype=bool)
    flat, gflat, vflat = arr.reshape(-1), grad.reshape(-1), valid.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value_fn()
        sig_hi = signature_fn() if signature_fn else None
        flat[i] = orig - eps
        lo = value_fn()
        sig_lo = signature_fn() if signature_fn else None
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
        if signature_fn and sig_hi != sig_lo:
            vflat[i] = False
    return grad, valid


def loss_value_and_signature(params, x_clean, x_corrupted, cfg):
    """Loss recomputed from raw forward pieces, plus its kink signature.

    The value is assembled directly from the cached activations (an
    independent restatement of the objective), and the signature captures
    every branch decision: PReLU input signs, pooling argmax choices, the
    reconstruction-difference signs, and the code signs under the L1
    sparsity term.
    """
    code, ec = model_mod._encode_cached(params, x_corrupted)
    y, dc = model_mod._decode_cached(params, code)
    diff = y.astype(np.float64) - x_clean.astype(np.float64)
    if cfg.recon_norm == "l1":
        recon = float(np.mean(np.abs(diff)))
    else:
        recon = float(np.mean(diff * diff))
    weight = cfg.lam * sum(
        float(np.sum(np.square(getattr(params, n).weights.astype(np.float64))))
        for n in ("enc1_conv", "enc2_conv", "dec1_conv", "dec2_conv", "head"))
    sparsity = cfg.gamma * float(np.mean(np.abs(code.astype(np.float64))))
    value = recon + weight + sparsity
    signature = (
        (ec["a1"] > 0).tobytes(), ec["idx1"].tobytes(),
        (ec["a2"] > 0).tobytes(), ec["idx2"].tobytes(),
        (dc["a3"] > 0).tobytes(), (dc["a4"] > 0).tobytes(),
        np.sign(diff).tobytes(), np.sign(code).tobytes(),
    )
    return value, signature


def check_loss_gradients(params, x_clean, x_corrupted, cfg, eps: float = 1e-3):
    """FD-check every parameter of the full loss; returns the worst valid
    relative error and the fraction of kink-excluded coordinates."""
    _, _, grads = model_mod.loss_backward(params, x_clean, x_corrupted, cfg)
    worst = 0.0
    excluded = total = 0
    for name, arr in params.param_items():
        fd, valid = fd_gradient(
            lambda: loss_value_and_signature(params, x_clean, x_corrupted, cfg)[0],
            arr, eps,
            signature_fn=lambda: loss_value_and_signature(params, x_clean, x_corrupted, cfg)[1])
        total += valid.size
        excluded += int((~valid).sum())
        if valid.any():
            worst = max(worst, max_rel_err(grads[name][valid], fd[valid]))
    return worst, excluded / total


# --------------------------------------------------------------------- #
# metric oracles                                                         #
# --------------------------------------------------------------------- #


def pair_counting_auc(scores, labels) -> float:
    """AUC as explicit pair counting with half-credit ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(float(p > q) + 0.5 * float(p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def enumeration_ap(scores, labels) -> float:
    """Average precision by enumerating every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= thr
        tp = int(labels[keep].sum())
        fp = int(keep.sum()) - tp
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def brute_force_u(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(sum(float(x > y) + 0.5 * float(x == y) for x in a for y in b))


def enumeration_mwu_p(a, b) -> float:
    """Two-sided exact p over all C(n+m, n) assignments, by pair counting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    n, m = len(a), len(b)
    nm = n * m
    dev_obs = abs(brute_force_u(a, b) - nm / 2.0)
    extreme = total = 0
    idx = set(range(n + m))
    for subset in combinations(range(n + m), n):
        rest = list(idx - set(subset))
        u = brute_force_u(pooled[list(subset)], pooled[rest])
        total += 1
        if abs(u - nm / 2.0) >= dev_obs - 1e-9:
            extreme += 1
    return extreme / total
