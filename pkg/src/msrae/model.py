"""Overcomplete convolutional autoencoder: assembly, loss, and gradients.

The network is two encode blocks (conv -> PReLU -> maxpool), two decode
blocks (conv -> PReLU -> upsample), and a final 1x1x1 projection back to
one channel.  Each pooling halves the spatial extents, so inputs must be
divisible by 4 and the latent code has ``enc_channels[-1]`` channels at
1/4 resolution.

The training objective combines three non-negative components:

* mean absolute reconstruction error between the *clean* input and the
  reconstruction of the (possibly corrupted) input,
* a weight penalty ``lam * sum(w**2)`` over all convolution weights,
* a sparsity penalty ``gamma * mean(|code|)`` on the latent activations.

``loss_backward`` returns analytic gradients for every parameter; they
are validated against finite differences in the tests.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .tensor import DTYPE, Rng, ShapeError, load_tensor, save_tensor


@dataclass(frozen=True)
class ModelConfig:
    """Channel plan: 1 -> enc_channels -> dec_channels -> 1."""

    in_channels: int = 1
    enc_channels: tuple[int, int] = (16, 96)
    dec_channels: tuple[int, int] = (32, 16)

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        if len(self.enc_channels) != 2 or len(self.dec_channels) != 2:
            raise ValueError("channel plan must list two encoder and two decoder widths")
        if min(self.enc_channels + self.dec_channels) < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-3
    gamma: float = 5e-4
    recon_norm: str = "l1"
    sparsity_on_clean: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.recon_norm not in ("l1", "l2"):
            raise ValueError(f"unknown reconstruction norm {self.recon_norm!r}")


@dataclass
class LossComponents:
    recon: float
    weight_penalty: float
    sparsity: float

    @property
    def total(self) -> float:
        return self.recon + self.weight_penalty + self.sparsity


@dataclass
class ModelParams:
    enc1_conv: nn.ConvLayer
    enc1_act: nn.PReluLayer
    enc2_conv: nn.ConvLayer
    enc2_act: nn.PReluLayer
    dec1_conv: nn.ConvLayer
    dec1_act: nn.PReluLayer
    dec2_conv: nn.ConvLayer
    dec2_act: nn.PReluLayer
    head: nn.ConvLayer
    config: ModelConfig = field(default_factory=ModelConfig)

    _CONVS = ("enc1_conv", "enc2_conv", "dec1_conv", "dec2_conv", "head")
    _ACTS = ("enc1_act", "enc2_act", "dec1_act", "dec2_act")

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """All learnable tensors in a fixed traversal order."""
        items = []
        for name in self._CONVS:
            layer = getattr(self, name)
            items.append((f"{name}.weights", layer.weights))
            items.append((f"{name}.bias", layer.bias))
        for name in self._ACTS:
            items.append((f"{name}.slope", getattr(self, name).slope))
        return items

    def set_param(self, name: str, value: np.ndarray) -> None:
        layer_name, attr = name.split(".")
        layer = getattr(self, layer_name)
        current = getattr(layer, attr)
        if current.shape != value.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {value.shape}")
        setattr(layer, attr, value)

    def conv_weight_names(self) -> list[str]:
        return [f"{name}.weights" for name in self._CONVS]

    def astype(self, dtype) -> "ModelParams":
        """Copy with every parameter cast to ``dtype`` (64-bit shadow mode)."""
        clone = init_zero_like(self)
        for name, arr in self.param_items():
            clone.set_param(name, arr.astype(dtype))
        return clone


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """He-initialized convolutions, 0.25 PReLU slopes, zero biases."""
    c_in = config.in_channels
    c1, c2 = config.enc_channels
    d1, d2 = config.dec_channels
    return ModelParams(
        enc1_conv=nn.he_init(rng, c1, c_in, 3),
        enc1_act=nn.prelu_init(c1),
        enc2_conv=nn.he_init(rng, c2, c1, 3),
        enc2_act=nn.prelu_init(c2),
        dec1_conv=nn.he_init(rng, d1, c2, 3),
        dec1_act=nn.prelu_init(d1),
        dec2_conv=nn.he_init(rng, d2, d1, 3),
        dec2_act=nn.prelu_init(d2),
        head=nn.he_init(rng, c_in, d2, 1),
        config=config,
    )


def init_zero_like(params: ModelParams) -> ModelParams:
    cfg = params.config

    def zconv(layer):
        return nn.ConvLayer(np.zeros_like(layer.weights), np.zeros_like(layer.bias))

    def zact(layer):
        return nn.PReluLayer(np.zeros_like(layer.slope))

    return ModelParams(
        enc1_conv=zconv(params.enc1_conv), enc1_act=zact(params.enc1_act),
        enc2_conv=zconv(params.enc2_conv), enc2_act=zact(params.enc2_act),
        dec1_conv=zconv(params.dec1_conv), dec1_act=zact(params.dec1_act),
        dec2_conv=zconv(params.dec2_conv), dec2_act=zact(params.dec2_act),
        head=zconv(params.head), config=cfg,
    )


def check_code_capacity(config: ModelConfig, patch_shape: tuple[int, int, int]) -> bool:
    """Warn when the latent code is smaller than the input (not overcomplete)."""
    d, h, w = patch_shape
    code_size = config.enc_channels[-1] * (d // 4) * (h // 4) * (w // 4)
    input_size = config.in_channels * d * h * w
    if code_size < input_size:
        warnings.warn(
            f"latent code ({code_size}) is smaller than the input ({input_size}); "
            "the autoencoder is not overcomplete for this patch shape",
            stacklevel=2,
        )
        return False
    return True


def _check_patch(x: np.ndarray, in_channels: int) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected [b, c, D, H, W] input, got {x.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"expected {in_channels} input channels, got {x.shape[1]}")
    if any(s % 4 for s in x.shape[2:]):
        raise ShapeError(f"spatial extents must be divisible by 4, got {x.shape[2:]}")


def _encode_cached(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, dict]:
    a1 = nn.conv3d_forward(params.enc1_conv, x)
    r1 = nn.prelu_forward(params.enc1_act, a1)
    m1, idx1 = nn.maxpool2_forward(r1)
    a2 = nn.conv3d_forward(params.enc2_conv, m1)
    r2 = nn.prelu_forward(params.enc2_act, a2)
    code, idx2 = nn.maxpool2_forward(r2)
    return code, {"x": x, "a1": a1, "idx1": idx1, "m1": m1, "a2": a2, "idx2": idx2}


def _decode_cached(params: ModelParams, code: np.ndarray) -> tuple[np.ndarray, dict]:
    a3 = nn.conv3d_forward(params.dec1_conv, code)
    r3 = nn.prelu_forward(params.dec1_act, a3)
    u3 = nn.upsample2_forward(r3)
    a4 = nn.conv3d_forward(params.dec2_conv, u3)
    r4 = nn.prelu_forward(params.dec2_act, a4)
    u4 = nn.upsample2_forward(r4)
    y = nn.conv3d_forward(params.head, u4)
    return y, {"code": code, "a3": a3, "u3": u3, "a4": a4, "u4": u4}


def encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Latent code at 1/4 spatial resolution."""
    _check_patch(x, params.config.in_channels)
    return _encode_cached(params, x)[0]


def decode(params: ModelParams, code: np.ndarray) -> np.ndarray:
    """Reconstruction with the input's spatial extents."""
    if code.ndim != 5 or code.shape[1] != params.config.enc_channels[-1]:
        raise ShapeError(
            f"decode: expected [b, {params.config.enc_channels[-1]}, d, h, w] code, got {code.shape}"
        )
    return _decode_cached(params, code)[0]


def reconstruct(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return decode(params, encode(params, x))


def _encoder_backward(params: ModelParams, cache: dict, d_code: np.ndarray, grads: dict) -> None:
    dr2 = nn.maxpool2_backward(cache["idx2"], d_code)
    g2 = nn.prelu_backward(params.enc2_act, cache["a2"], dr2)
    grads["enc2_act.slope"] += g2.d_slope
    c2 = nn.conv3d_backward(params.enc2_conv, cache["m1"], g2.d_input)
    grads["enc2_conv.weights"] += c2.d_weights
    grads["enc2_conv.bias"] += c2.d_bias
    dr1 = nn.maxpool2_backward(cache["idx1"], c2.d_input)
    g1 = nn.prelu_backward(params.enc1_act, cache["a1"], dr1)
    grads["enc1_act.slope"] += g1.d_slope
    # the gradient w.r.t. the network input is never consumed
    c1 = nn.conv3d_backward(params.enc1_conv, cache["x"], g1.d_input,
                            need_input_grad=False)
    grads["enc1_conv.weights"] += c1.d_weights
    grads["enc1_conv.bias"] += c1.d_bias


def _recon_value_and_grad(x_clean: np.ndarray, y: np.ndarray, norm: str):
    diff = y.astype(np.float64) - x_clean.astype(np.float64)
    n = diff.size
    if norm == "l1":
        value = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / n  # subgradient 0 at exact zeros
    else:
        value = float(np.mean(diff * diff))
        grad = 2.0 * diff / n
    return value, grad.astype(y.dtype)


def loss(params: ModelParams, x_clean: np.ndarray, x_corrupted: np.ndarray,
         cfg: LossConfig) -> tuple[float, LossComponents]:
    """Total training loss and its three components."""
    if x_clean.shape != x_corrupted.shape:
        raise ShapeError(f"loss: clean {x_clean.shape} vs corrupted {x_corrupted.shape}")
    _check_patch(x_corrupted, params.config.in_channels)
    code, _ = _encode_cached(params, x_corrupted)
    y, _ = _decode_cached(params, code)
    recon, _ = _recon_value_and_grad(x_clean, y, cfg.recon_norm)
    by_name = dict(params.param_items())
    weight = cfg.lam * sum(
        float(np.sum(np.square(by_name[name], dtype=np.float64)))
        for name in params.conv_weight_names()
    )
    if cfg.sparsity_on_clean:
        sparsity_code = encode(params, x_clean)
    else:
        sparsity_code = code
    sparsity = cfg.gamma * float(np.mean(np.abs(sparsity_code), dtype=np.float64))
    components = LossComponents(recon, weight, sparsity)
    return components.total, components


def loss_backward(params: ModelParams, x_clean: np.ndarray, x_corrupted: np.ndarray,
                  cfg: LossConfig) -> tuple[float, LossComponents, dict[str, np.ndarray]]:
    """Loss value, components, and gradients for every parameter tensor."""
    if x_clean.shape != x_corrupted.shape:
        raise ShapeError(f"loss: clean {x_clean.shape} vs corrupted {x_corrupted.shape}")
    _check_patch(x_corrupted, params.config.in_channels)
    code, enc_cache = _encode_cached(params, x_corrupted)
    y, dec_cache = _decode_cached(params, code)
    grads = {name: np.zeros_like(arr) for name, arr in params.param_items()}

    recon, dy = _recon_value_and_grad(x_clean, y, cfg.recon_norm)

    # decoder
    ch = nn.conv3d_backward(params.head, dec_cache["u4"], dy)
    grads["head.weights"] += ch.d_weights
    grads["head.bias"] += ch.d_bias
    dr4 = nn.upsample2_backward(ch.d_input)
    g4 = nn.prelu_backward(params.dec2_act, dec_cache["a4"], dr4)
    grads["dec2_act.slope"] += g4.d_slope
    c4 = nn.conv3d_backward(params.dec2_conv, dec_cache["u3"], g4.d_input)
    grads["dec2_conv.weights"] += c4.d_weights
    grads["dec2_conv.bias"] += c4.d_bias
    dr3 = nn.upsample2_backward(c4.d_input)
    g3 = nn.prelu_backward(params.dec1_act, dec_cache["a3"], dr3)
    grads["dec1_act.slope"] += g3.d_slope
    c3 = nn.conv3d_backward(params.dec1_conv, code, g3.d_input)
    grads["dec1_conv.weights"] += c3.d_weights
    grads["dec1_conv.bias"] += c3.d_bias
    d_code = c3.d_input

    # sparsity penalty on the latent code (L1 subgradient, 0 at exact zeros)
    if cfg.sparsity_on_clean:
        clean_code, clean_cache = _encode_cached(params, x_clean)
        sparsity = cfg.gamma * float(np.mean(np.abs(clean_code), dtype=np.float64))
        d_clean_code = (cfg.gamma * np.sign(clean_code) / clean_code.size).astype(clean_code.dtype)
        _encoder_backward(params, clean_cache, d_clean_code, grads)
    else:
        sparsity = cfg.gamma * float(np.mean(np.abs(code), dtype=np.float64))
        d_code = d_code + (cfg.gamma * np.sign(code) / code.size).astype(code.dtype)

    _encoder_backward(params, enc_cache, d_code, grads)

    # weight penalty lam * sum(w**2): value and 2*lam*w gradient
    by_name = dict(params.param_items())
    weight = 0.0
    for name in params.conv_weight_names():
        w = by_name[name]
        weight += float(np.sum(np.square(w, dtype=np.float64)))
        grads[name] += (2.0 * cfg.lam * w).astype(w.dtype)
    weight *= cfg.lam

    components = LossComponents(recon, weight, sparsity)
    return components.total, components, grads


# --------------------------------------------------------------------- #
# checkpoints                                                            #
# --------------------------------------------------------------------- #

_CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(directory, params: ModelParams, loss_cfg: LossConfig) -> None:
    """Write a manifest plus one MSRT blob per parameter (bit-exact)."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, arr in params.param_items():
        fname = f"{name}.msrt"
        save_tensor(os.path.join(directory, fname), arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "format": "msrae-checkpoint",
        "version": 1,
        "model": asdict(params.config),
        "loss": asdict(loss_cfg),
        "parameters": entries,
    }
    with open(os.path.join(directory, _CHECKPOINT_MANIFEST), "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_checkpoint(directory) -> tuple[ModelParams, LossConfig]:
    path = os.path.join(directory, _CHECKPOINT_MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as fp:
        manifest = json.load(fp)
    model_cfg = ModelConfig(
        in_channels=manifest["model"]["in_channels"],
        enc_channels=tuple(manifest["model"]["enc_channels"]),
        dec_channels=tuple(manifest["model"]["dec_channels"]),
    )
    loss_cfg = LossConfig(**manifest["loss"])
    rng = Rng(0)
    params = init_params(model_cfg, rng)
    for entry in manifest["parameters"]:
        arr = load_tensor(os.path.join(directory, entry["file"]))
        params.set_param(entry["name"], arr.astype(DTYPE))
    return params, loss_cfg
