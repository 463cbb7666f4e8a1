"""Built-in oracle suites behind the ``selftest`` command.

Each suite checks a fast, self-contained slice of the package against an
independent reference implementation (nested-loop convolution, central
finite differences, brute-force pair counting).  The full test suite
covers far more; this is the smoke check shipped inside the package.
"""

from __future__ import annotations

import io
from itertools import combinations

import numpy as np

from . import corrupt, metrics, model, nn
from .tensor import Rng, read_tensor, write_tensor


def _naive_conv3d(layer: nn.ConvLayer, x: np.ndarray) -> np.ndarray:
    w, bias = layer.weights.astype(np.float64), layer.bias.astype(np.float64)
    b, ci, d, h, ww = x.shape
    co, _, kd, kh, kw = w.shape
    out = np.zeros((b, co, d, h, ww))
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (kd // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))
    for n in range(b):
        for o in range(co):
            for z in range(d):
                for y in range(h):
                    for xx in range(ww):
                        acc = bias[o]
                        for i in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        acc += xp[n, i, z + a, y + bb, xx + c] * w[o, i, a, bb, c]
                        out[n, o, z, y, xx] = acc
    return out


def _fd_gradient(fn, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def _max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _check_container(rng: Rng) -> str | None:
    arr = rng.normal((3, 4, 5))
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    if back.tobytes() != arr.tobytes() or back.shape != arr.shape:
        return "round-trip is not bit-exact"
    return None


def _check_rng() -> str | None:
    a = Rng(7).normal((4, 4))
    b = Rng(7).normal((4, 4))
    if a.tobytes() != b.tobytes():
        return "identical seeds diverged"
    if Rng(7).split(0).normal((2,)).tobytes() == Rng(7).split(1).normal((2,)).tobytes():
        return "split streams collided"
    return None


def _check_conv(rng: Rng) -> str | None:
    for trial in range(5):
        ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        shape = (1, ci, int(rng.integers(2, 5)) * 2, int(rng.integers(2, 4)) * 2, 4)
        layer = nn.he_init(rng, co, ci, 3)
        x = rng.normal(shape)
        got = nn.conv3d_forward(layer, x).astype(np.float64)
        want = _naive_conv3d(layer, x)
        err = _max_rel_err(got, want)
        if err > 1e-5:
            return f"trial {trial}: relative error {err:.2e}"
    return None


def _check_gradients(rng: Rng) -> str | None:
    cfg = model.ModelConfig(enc_channels=(2, 3), dec_channels=(2, 2))
    params = model.init_params(cfg, rng).astype(np.float64)
    loss_cfg = model.LossConfig(lam=1e-3, gamma=5e-4)
    x = rng.normal((1, 1, 4, 4, 4), 0.5, 0.2).astype(np.float64)
    xc = x + rng.normal(x.shape, 0.0, 0.01).astype(np.float64)
    _, _, grads = model.loss_backward(params, x, xc, loss_cfg)
    for name, arr in params.param_items():
        def value() -> float:
            return model.loss(params, x, xc, loss_cfg)[0]
        fd = _fd_gradient(value, arr)
        err = _max_rel_err(grads[name].astype(np.float64), fd)
        if err > 1e-4:
            return f"{name}: max relative error {err:.2e}"
    return None


def _check_metrics(rng: Rng) -> str | None:
    for trial in range(20):
        n = int(rng.integers(5, 30))
        scores = rng.integers(0, 6, size=n).astype(float)
        labels = (rng.uniform(size=n) > 0.5).astype(int)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 1, 0
        samples = [metrics.ScoredSample(s, int(l)) for s, l in zip(scores, labels)]
        _, auc = metrics.roc_auc(samples)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        pairs = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        want = pairs / (len(pos) * len(neg))
        if abs(auc - want) > 1e-9:
            return f"trial {trial}: auc {auc} != pair counting {want}"
        _, ap = metrics.pr_ap(samples)
        want_ap = _enumerate_ap(scores, labels)
        if abs(ap - want_ap) > 1e-9:
            return f"trial {trial}: ap {ap} != enumeration {want_ap}"
    u, p = metrics.mann_whitney_u([1, 2, 3], [4, 5, 6], mode="exact")
    if u != 0.0 or abs(p - 0.1) > 1e-12:
        return f"exact U/p mismatch: {u}, {p}"
    return None


def _enumerate_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    total_pos = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        keep = scores >= thr
        tp = int(labels[keep].sum())
        fp = int(keep.sum() - tp)
        recall = tp / total_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _check_corruption(rng: Rng) -> str | None:
    table = {"SAE": (0.0, 0.0), "SDAE": (0.0, 0.1),
             "SAE-MSR": (0.1, 0.0), "SDAE-MSR": (0.1, 0.001)}
    for name, (alpha, sigma) in table.items():
        spec = corrupt.spec_for_variant(name)
        if (spec.alpha, spec.sigma) != (alpha, sigma):
            return f"{name}: ({spec.alpha}, {spec.sigma}) != ({alpha}, {sigma})"
    pool = rng.normal((4, 1, 2, 2, 2))
    same, partner = corrupt.corrupt(corrupt.CorruptionSpec(0.0, 0.0), pool[0], pool, rng, 0)
    if partner is not None or same.tobytes() != pool[0].tobytes():
        return "alpha=0 sigma=0 is not an identity"
    swapped, partner = corrupt.corrupt(corrupt.CorruptionSpec(1.0, 0.0), pool[0], pool, rng, 0)
    if partner == 0 or not np.allclose(swapped, pool[partner]):
        return "alpha=1 did not return the partner"
    return None


SUITES = (
    ("tensor container round-trip", _check_container),
    ("rng determinism", lambda rng: _check_rng()),
    ("conv3d vs nested-loop oracle", _check_conv),
    ("loss gradients vs finite differences", _check_gradients),
    ("ranking metrics vs counting oracles", _check_metrics),
    ("corruption contracts", _check_corruption),
)


def run(out=print) -> int:
    failures = 0
    for i, (name, check) in enumerate(SUITES):
        detail = check(Rng(1000 + i))
        if detail is None:
            out(f"ok -- {name}")
        else:
            failures += 1
            out(f"FAIL -- {name}: {detail}")
    return failures
