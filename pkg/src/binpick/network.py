"""Fully-convolutional reward network on plain numpy.

Architecture (valid convolutions, SiLU hidden activations — smooth, so
finite-difference gradient checks are meaningful at coarse step sizes):

    conv 32 @ 5x5 /2 + BN + dropout 0.4
    conv 48 @ 5x5    + BN + dropout 0.4
    conv 64 @ 5x5    + BN + dropout 0.3
    conv 142 @ 6x6   + BN + dropout 0.3
    conv 128 @ 1x1        + dropout 0.3
    conv |M| @ 1x1   + sigmoid

A 31x31 training window maps to a 1x1x|M| output; a 109x109 full image maps
densely to 40x40x|M|, where output cell (i, j) equals the window forward
pass on the 31x31 crop with top-left (2i, 2j). Forward, backward (exact
gradients, summed over the batch), BN running statistics, inverted dropout,
SGD with momentum, MC-dropout variance, and a bit-exact weight container.

Everything is dtype-parametric: float32 for production, float64 for
finite-difference checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import defaults as dflt
from .heightmap import DepthImage, to_net_input

HIDDEN_GAIN = 2.0           # He-style init gain for the hidden activation
BN_EPS = 1e-5
BN_MOMENTUM = 0.99          # running = m * running + (1 - m) * batch
FCNQ_MAGIC = b"FCNQ"
FCNQ_VERSION = 1
_KIND_CONV = 1
_KIND_BN = 2


@dataclass(frozen=True)
class ConvDef:
    name: str
    out_channels: int | None     # None: |M|, bound at init time
    kernel: int
    stride: int = 1
    bn: bool = False
    dropout: float = 0.0
    final: bool = False


LAYER_DEFS: tuple[ConvDef, ...] = (
    ConvDef("conv1", 32, 5, stride=2, bn=True, dropout=0.4),
    ConvDef("conv2", 48, 5, bn=True, dropout=0.4),
    ConvDef("conv3", 64, 5, bn=True, dropout=0.3),
    ConvDef("conv4", 142, 6, bn=True, dropout=0.3),
    ConvDef("conv5", 128, 1, dropout=0.3),
    ConvDef("conv6", None, 1, final=True),
)

#                 31 -> 14 -> 10 -> 6 -> 1 -> 1 -> 1
WINDOW_SIDE = dflt.WINDOW_SIDE
DENSE_SIDE = dflt.FULL_IMAGE_SIDE


def _bn_name(conv_name: str) -> str:
    return "bn" + conv_name[len("conv"):]


@dataclass
class WeightStore:
    """Named parameter arrays for the fixed architecture."""
    params: dict[str, np.ndarray]
    n_primitives: int
    dtype: np.dtype = np.dtype(np.float32)

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.params.items()},
                           self.n_primitives, self.dtype)

    def astype(self, dtype) -> "WeightStore":
        dt = np.dtype(dtype)
        return WeightStore({k: v.astype(dt) for k, v in self.params.items()},
                           self.n_primitives, dt)

    def trainable_keys(self) -> list[str]:
        return [k for k in self.params if "running" not in k]


def layer_channels(n_primitives: int) -> list[tuple[ConvDef, int, int]]:
    """(definition, in_channels, out_channels) per conv layer."""
    chans = []
    c_in = 1
    for d in LAYER_DEFS:
        c_out = n_primitives if d.out_channels is None else d.out_channels
        chans.append((d, c_in, c_out))
        c_in = c_out
    return chans


def init_weights(n_primitives: int, seed: int = 0, dtype=np.float32) -> WeightStore:
    """He-normal kernels, zero biases, identity BN, tempered final layer."""
    if n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    params: dict[str, np.ndarray] = {}
    for d, c_in, c_out in layer_channels(n_primitives):
        fan_in = c_in * d.kernel * d.kernel
        gain = 1.0 if d.final else HIDDEN_GAIN
        std = np.sqrt(gain / fan_in)
        params[f"{d.name}.kernel"] = rng.normal(
            0.0, std, size=(c_out, c_in, d.kernel, d.kernel)).astype(dt)
        params[f"{d.name}.bias"] = np.zeros(c_out, dtype=dt)
        if d.bn:
            bn = _bn_name(d.name)
            params[f"{bn}.scale"] = np.ones(c_out, dtype=dt)
            params[f"{bn}.offset"] = np.zeros(c_out, dtype=dt)
            params[f"{bn}.running_mean"] = np.zeros(c_out, dtype=dt)
            params[f"{bn}.running_var"] = np.ones(c_out, dtype=dt)
    return WeightStore(params, n_primitives, dt)


# ---------- conv primitives ----------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """(B,C,H,W) -> column matrix (C*kh*kw, B*oh*ow) plus output dims."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(c, kh, kw, b, oh, ow),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride))
    return np.ascontiguousarray(view).reshape(c * kh * kw, b * oh * ow), oh, ow


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int):
    """Returns (out view (B,O,oh,ow), cols, out2 contiguous (O, B*oh*ow)).

    out2 owns the memory; elementwise work downstream should prefer it —
    transcendental ufuncs on the transposed view fall off numpy's SIMD path.
    """
    b = x.shape[0]
    o, c, kh, kw = kernel.shape
    if kh == 1 and kw == 1 and stride == 1:
        _, _, h, w = x.shape
        cols = x.transpose(1, 0, 2, 3).reshape(c, b * h * w)
        oh, ow = h, w
    else:
        cols, oh, ow = _im2col(x, kh, kw, stride)
    out2 = kernel.reshape(o, -1) @ cols
    out2 += bias[:, None]
    out = out2.reshape(o, b, oh, ow).transpose(1, 0, 2, 3)
    return out, cols, out2


def _conv_backward(d_out: np.ndarray, cols: np.ndarray, x_shape, kernel: np.ndarray,
                   stride: int, need_dx: bool):
    b, o = d_out.shape[:2]
    oh, ow = d_out.shape[2:]
    dmat = d_out.transpose(1, 0, 2, 3).reshape(o, b * oh * ow)
    d_kernel = (dmat @ cols.T).reshape(kernel.shape)
    d_bias = d_out.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        _, c, h, w = x_shape
        _, _, kh, kw = kernel.shape
        dcols = kernel.reshape(o, -1).T @ dmat            # (c*kh*kw, b*oh*ow)
        if kh == 1 and kw == 1 and stride == 1:
            dx = dcols.reshape(c, b, h, w).transpose(1, 0, 2, 3)
        else:
            d6 = dcols.reshape(c, kh, kw, b, oh, ow)
            dx = np.zeros(x_shape, dtype=d_out.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                        d6[:, i, j].transpose(1, 0, 2, 3)
    return d_kernel, d_bias, dx


# ---------- batch norm ----------

def _bn_forward_train(x, scale, offset, params, bn, update_running: bool):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))                 # biased, matches normalization
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = scale[None, :, None, None] * xhat + offset[None, :, None, None]
    if update_running:
        m = x.dtype.type(BN_MOMENTUM)
        params[f"{bn}.running_mean"] = (m * params[f"{bn}.running_mean"]
                                        + (1 - m) * mean.astype(x.dtype))
        params[f"{bn}.running_var"] = (m * params[f"{bn}.running_var"]
                                       + (1 - m) * var.astype(x.dtype))
    return y, (xhat, inv_std)


def _bn_backward(d_y, cache, scale):
    xhat, inv_std = cache
    n = d_y.shape[0] * d_y.shape[2] * d_y.shape[3]
    d_scale = (d_y * xhat).sum(axis=(0, 2, 3))
    d_offset = d_y.sum(axis=(0, 2, 3))
    d_xhat = d_y * scale[None, :, None, None]
    s1 = d_xhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (d_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (d_xhat - s1 / n - xhat * s2 / n) * inv_std[None, :, None, None]
    return dx, d_scale, d_offset


def _bn_forward_infer(x, scale, offset, mean, var):
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
    return (x - mean[None, :, None, None]) * (scale * inv_std)[None, :, None, None] \
        + offset[None, :, None, None]


# ---------- activations / losses ----------

def _hidden_act(x):
    """SiLU: x * sigmoid(x)."""
    return x * sigmoid(x)


def _hidden_act_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def sigmoid(z):
    # exp(-|z|) never overflows; each sign gets its stable form — for z >= 0
    # the numerator is 1, otherwise e — over the shared denominator 1 + e.
    # Branchless: boolean gather/scatter costs ~20x the straight ufuncs.
    z = np.asanyarray(z)
    e = np.abs(z)
    np.negative(e, out=e)
    np.exp(e, out=e)
    num = np.where(z >= 0, np.asarray(1.0, dtype=e.dtype), e)
    e += e.dtype.type(1.0)
    np.divide(num, e, out=num)
    return num


def _loss_and_logit_grad(z_sel: np.ndarray, targets: np.ndarray, loss: str):
    """Per-sample loss and dLoss/dlogit for the selected output channel."""
    p = sigmoid(z_sel)
    if loss == "bce":
        # stable: log(1+e^z) - t*z = max(z,0) - t*z + log1p(e^{-|z|})
        per = np.maximum(z_sel, 0) - targets * z_sel + np.log1p(np.exp(-np.abs(z_sel)))
        dz = p - targets
    elif loss == "mse":
        diff = p - targets
        per = diff * diff
        dz = 2.0 * diff * p * (1.0 - p)
    else:
        raise ValueError("loss must be 'bce' or 'mse'")
    return per, dz


# ---------- forward / backward ----------

def _as_net_input(window) -> np.ndarray:
    if isinstance(window, DepthImage):
        return to_net_input(window)
    return np.asarray(window)


def _dropout_rates(override):
    if override is None:
        return [d.dropout for d in LAYER_DEFS]
    rates = list(override)
    if len(rates) != len(LAYER_DEFS):
        raise ValueError(f"need {len(LAYER_DEFS)} dropout rates")
    return rates


def _forward(ws: WeightStore, x: np.ndarray, batch_bn: bool, dropout_rng,
             dropout_rates=None, update_running: bool = False, keep_cache: bool = False,
             dropout_per_sample: bool = False):
    """Shared forward pass. Returns final logits (B,M,oh,ow) and layer caches.

    Dropout masks are drawn once per layer and shared across the batch
    (keeps summed gradients exactly linear in duplicated samples); MC-dropout
    batching requests per-sample masks instead.
    """
    dt = ws.dtype
    x = np.ascontiguousarray(x, dtype=dt)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    rates = _dropout_rates(dropout_rates)
    caches = []
    for (d, _c_in, _c_out), rate in zip(layer_channels(ws.n_primitives), rates):
        kernel = ws.params[f"{d.name}.kernel"]
        bias = ws.params[f"{d.name}.bias"]
        x_in_shape = x.shape
        z, cols, z2 = _conv_forward(x, kernel, bias, d.stride)
        bn_cache = None
        if d.bn:
            z2 = None
            bn = _bn_name(d.name)
            if batch_bn:
                z, bn_cache = _bn_forward_train(
                    z, ws.params[f"{bn}.scale"], ws.params[f"{bn}.offset"],
                    ws.params, bn, update_running)
            else:
                z = _bn_forward_infer(
                    z, ws.params[f"{bn}.scale"], ws.params[f"{bn}.offset"],
                    ws.params[f"{bn}.running_mean"], ws.params[f"{bn}.running_var"])
        if d.final:
            caches.append((d, x_in_shape, cols if keep_cache else None,
                           None, bn_cache, None))
            return z, caches
        act_in = z
        if z2 is not None:
            x = _hidden_act(z2).reshape(
                z2.shape[0], z.shape[0], z.shape[2], z.shape[3]).transpose(1, 0, 2, 3)
        else:
            x = _hidden_act(z)
        mask = None
        if rate > 0.0 and dropout_rng is not None:
            mask_shape = x.shape if dropout_per_sample else (1,) + x.shape[1:]
            keep = dropout_rng.random(mask_shape) >= rate
            mask = keep.astype(dt) / dt.type(1.0 - rate)
            x = x * mask
        caches.append((d, x_in_shape, cols if keep_cache else None,
                       act_in if keep_cache else None, bn_cache, mask))
    raise AssertionError("unreachable")


def forward_window(weights: WeightStore, window, mode: str = "infer",
                   dropout_seed: int | None = None,
                   dropout_rates=None) -> np.ndarray:
    """Reward estimates (1, 1, |M|) for one 31x31 window.

    mode="train" uses batch BN statistics; dropout is active in train mode
    and, when dropout_seed is given, in infer mode too (MC-dropout).
    """
    x = _as_net_input(window)
    if x.shape != (WINDOW_SIDE, WINDOW_SIDE):
        raise ValueError(f"window must be {WINDOW_SIDE}x{WINDOW_SIDE}, got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    z, _ = _forward(weights, x, batch_bn=(mode == "train"), dropout_rng=rng,
                    dropout_rates=dropout_rates)
    return sigmoid(z[0]).transpose(1, 2, 0)


def forward_batch(weights: WeightStore, windows: np.ndarray, mode: str = "infer",
                  dropout_seed: int | None = None, dropout_rates=None) -> np.ndarray:
    """Reward estimates (B, |M|) for a stack of 31x31 net-input windows."""
    x = np.asarray(windows)
    if x.ndim != 3 or x.shape[1:] != (WINDOW_SIDE, WINDOW_SIDE):
        raise ValueError("windows must be (B, 31, 31) net-input arrays")
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    z, _ = _forward(weights, x, batch_bn=(mode == "train"), dropout_rng=rng,
                    dropout_rates=dropout_rates)
    return sigmoid(z[:, :, 0, 0])


def forward_dense(weights: WeightStore, image) -> np.ndarray:
    """Dense reward map (40, 40, |M|) for a 109x109 image (infer mode)."""
    x = _as_net_input(image)
    if x.shape != (DENSE_SIDE, DENSE_SIDE):
        raise ValueError(f"image must be {DENSE_SIDE}x{DENSE_SIDE}, got {x.shape}")
    z, _ = _forward(weights, x, batch_bn=False, dropout_rng=None)
    return sigmoid(z[0]).transpose(1, 2, 0)


def backward(weights: WeightStore, batch, loss: str = "bce",
             dropout_seed: int | None = None, dropout_rates=None,
             update_running: bool = False):
    """Exact gradients of the summed per-sample loss, masked per primitive.

    batch: sequence of (window, target, primitive_index) or a tuple of
    arrays (windows (B,31,31), targets (B,), primitive_indices (B,)).
    Only the executed primitive's output channel receives gradient. BN runs
    in batch-statistics mode. Returns (grads, loss_sum).
    """
    if (isinstance(batch, tuple) and len(batch) == 3
            and np.asarray(batch[0]).ndim == 3):
        windows, targets, prims = batch
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("empty batch")
        windows = np.stack([_as_net_input(w) for w, _, _ in batch])
        targets = np.array([t for _, t, _ in batch])
        prims = np.array([int(m) for _, _, m in batch])
    windows = np.ascontiguousarray(windows, dtype=weights.dtype)
    targets = np.asarray(targets, dtype=weights.dtype)
    prims = np.asarray(prims, dtype=np.int64)
    b = len(windows)
    if b == 0:
        raise ValueError("empty batch")
    if prims.min() < 0 or prims.max() >= weights.n_primitives:
        raise ValueError("primitive index out of range")

    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    z, caches = _forward(weights, windows, batch_bn=True, dropout_rng=rng,
                         dropout_rates=dropout_rates, update_running=update_running,
                         keep_cache=True)
    z_sel = z[np.arange(b), prims, 0, 0]
    per_loss, dz_sel = _loss_and_logit_grad(z_sel, targets, loss)
    d_out = np.zeros_like(z)
    d_out[np.arange(b), prims, 0, 0] = dz_sel

    grads: dict[str, np.ndarray] = {}
    for (d, x_in_shape, cols, act_in, bn_cache, mask), is_last in zip(
            reversed(caches), [True] + [False] * (len(caches) - 1)):
        if not is_last:
            d_out = d_out * mask if mask is not None else d_out
            d_out = d_out * _hidden_act_grad(act_in)
        if d.bn:
            bn = _bn_name(d.name)
            d_out, d_scale, d_offset = _bn_backward(
                d_out, bn_cache, weights.params[f"{bn}.scale"])
            grads[f"{bn}.scale"] = d_scale
            grads[f"{bn}.offset"] = d_offset
        kernel = weights.params[f"{d.name}.kernel"]
        first = d.name == LAYER_DEFS[0].name
        d_kernel, d_bias, dx = _conv_backward(
            d_out, cols, x_in_shape, kernel, d.stride, need_dx=not first)
        grads[f"{d.name}.kernel"] = d_kernel
        grads[f"{d.name}.bias"] = d_bias
        d_out = dx
    return grads, float(per_loss.sum())


# ---------- optimizer ----------

@dataclass
class SgdMomentum:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, weights: WeightStore, grads: dict[str, np.ndarray],
             batch_size: int) -> None:
        """Apply averaged gradients in place."""
        for key, g in grads.items():
            v = self.velocity.get(key)
            if v is None:
                v = np.zeros_like(weights.params[key])
            v = self.momentum * v - self.learning_rate * (g / batch_size)
            self.velocity[key] = v.astype(weights.dtype)
            weights.params[key] = weights.params[key] + self.velocity[key]


# ---------- MC dropout ----------

def mc_dropout_variance(weights: WeightStore, window, n_samples: int,
                        seed: int = 0, seeds=None, dropout_rates=None) -> np.ndarray:
    """Per-primitive variance of MC-dropout forward passes (infer-mode BN)."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    x = _as_net_input(window)
    if seeds is None:
        seeds = [seed + i for i in range(n_samples)]
    if len(seeds) != n_samples:
        raise ValueError("need one seed per sample")
    outs = np.stack([
        forward_window(weights, x, mode="infer", dropout_seed=int(s),
                       dropout_rates=dropout_rates)[0, 0]
        for s in seeds
    ]).astype(np.float64)
    # shifted two-pass: exactly zero when every pass is bit-identical
    d = outs - outs[0]
    var = (d * d).mean(axis=0) - d.mean(axis=0) ** 2
    return np.maximum(var, 0.0)


def mc_dropout_variance_batch(weights: WeightStore, windows: np.ndarray,
                              n_samples: int, seed: int = 0) -> np.ndarray:
    """Vectorized MC-dropout: (N, 31, 31) windows -> (N, |M|) variances.

    Runs n_samples forward passes over the whole stack with per-sample
    dropout masks (one generator drives all draws; infer-mode BN).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    x = np.asarray(windows)
    if x.ndim != 3 or x.shape[1:] != (WINDOW_SIDE, WINDOW_SIDE):
        raise ValueError("windows must be (N, 31, 31) net-input arrays")
    rng = np.random.default_rng(seed)
    acc = np.zeros((x.shape[0], weights.n_primitives), dtype=np.float64)
    acc_sq = np.zeros_like(acc)
    shift = None
    for _ in range(n_samples):
        z, _ = _forward(weights, x, batch_bn=False, dropout_rng=rng,
                        dropout_per_sample=True)
        p = sigmoid(z[:, :, 0, 0]).astype(np.float64)
        if shift is None:
            shift = p          # shifted accumulation: exactly zero variance
        d = p - shift          # when every pass is bit-identical
        acc += d
        acc_sq += d * d
    mean = acc / n_samples
    return np.maximum(acc_sq / n_samples - mean * mean, 0.0)


def mc_dropout_variance_dense(weights: WeightStore, images: np.ndarray,
                              n_samples: int, seed: int = 0,
                              dropout_rates=None) -> np.ndarray:
    """MC-dropout variance over dense passes: (B, 109, 109) -> (B, 40, 40, |M|).

    One mask realization per sample, shared across the image batch and all
    spatial positions of a feature map (infer-mode BN). Deterministic per
    (seed, n_samples).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (DENSE_SIDE, DENSE_SIDE):
        raise ValueError("images must be (B, 109, 109) net-input arrays")
    acc = acc_sq = 0.0
    shift = None
    for s in range(n_samples):
        rng = np.random.default_rng((seed, s))
        z, _ = _forward(weights, x, batch_bn=False, dropout_rng=rng,
                        dropout_rates=dropout_rates)
        p = sigmoid(z).astype(np.float64)
        if shift is None:
            shift = p          # shifted accumulation: exactly zero variance
        d = p - shift          # when every pass is bit-identical
        acc = acc + d
        acc_sq = acc_sq + d * d
    mean = acc / n_samples
    var = np.maximum(acc_sq / n_samples - mean * mean, 0.0)
    return var.transpose(0, 2, 3, 1)


# ---------- inference engine ----------

class InferenceEngine:
    """BN-folded float32 forward passes for production inference."""

    def __init__(self, weights: WeightStore):
        self.n_primitives = weights.n_primitives
        self.layers: list[tuple[np.ndarray, np.ndarray, int, bool]] = []
        for d, _c_in, _c_out in layer_channels(weights.n_primitives):
            kernel = weights.params[f"{d.name}.kernel"].astype(np.float32)
            bias = weights.params[f"{d.name}.bias"].astype(np.float32)
            if d.bn:
                bn = _bn_name(d.name)
                scale = weights.params[f"{bn}.scale"].astype(np.float64)
                offset = weights.params[f"{bn}.offset"].astype(np.float64)
                mean = weights.params[f"{bn}.running_mean"].astype(np.float64)
                var = weights.params[f"{bn}.running_var"].astype(np.float64)
                factor = scale / np.sqrt(var + BN_EPS)
                kernel = (kernel.astype(np.float64)
                          * factor[:, None, None, None]).astype(np.float32)
                bias = ((bias.astype(np.float64) - mean) * factor
                        + offset).astype(np.float32)
            self.layers.append((kernel, bias, d.stride, d.final))

    def _run(self, images: np.ndarray):
        """(B, H, W) stack -> (final logits (|M|, B*oh*ow), B, oh, ow).

        The whole chain stays on contiguous channel-major 2-D buffers; the
        1x1 layers reuse the previous activation as their column matrix.
        """
        x = np.ascontiguousarray(images, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        x = x[:, None]
        b = x.shape[0]
        z2 = None
        oh = ow = 0
        for kernel, bias, stride, final in self.layers:
            o, c, kh, kw = kernel.shape
            if kh == 1 and kw == 1 and stride == 1 and z2 is not None:
                cols = z2
            else:
                cols, oh, ow = _im2col(x, kh, kw, stride)
            z2 = kernel.reshape(o, -1) @ cols
            z2 += bias[:, None]
            if not final:
                z2 = _hidden_act(z2)
                x = z2.reshape(o, b, oh, ow).transpose(1, 0, 2, 3)
        return z2, b, oh, ow

    def logits(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W) net-input stack -> (B, oh, ow, |M|) logits."""
        z2, b, oh, ow = self._run(images)
        return z2.reshape(-1, b, oh, ow).transpose(1, 2, 3, 0)

    def dense(self, image: np.ndarray) -> np.ndarray:
        """One 109x109 net-input image -> (40, 40, |M|) reward map."""
        return self.dense_many(np.asarray(image, dtype=np.float32)[None])[0]

    def dense_many(self, images: np.ndarray, chunk: int = 20) -> np.ndarray:
        """(R, 109, 109) stack -> (R, 40, 40, |M|), chunked to bound memory."""
        parts = []
        for i in range(0, len(images), chunk):
            z2, b, oh, ow = self._run(images[i:i + chunk])
            probs = sigmoid(z2)
            parts.append(np.ascontiguousarray(
                probs.reshape(-1, b, oh, ow).transpose(1, 2, 3, 0)))
        return np.concatenate(parts, axis=0)


# ---------- FCNQ container ----------

def _weight_layer_order(n_primitives: int):
    for d, c_in, c_out in layer_channels(n_primitives):
        yield _KIND_CONV, d.name, (c_out, c_in, d.kernel, d.kernel)
        if d.bn:
            yield _KIND_BN, _bn_name(d.name), (4, c_out, 1, 1)


def save_weights(weights: WeightStore, path) -> None:
    """Write the FCNQ container (little-endian f32, bit-exact round trip)."""
    layers = list(_weight_layer_order(weights.n_primitives))
    out = [FCNQ_MAGIC, struct.pack("<II", FCNQ_VERSION, len(layers))]
    for kind, name, dims in layers:
        out.append(struct.pack("<5I", kind, *dims))
        if kind == _KIND_CONV:
            payload = [weights.params[f"{name}.kernel"], weights.params[f"{name}.bias"]]
        else:
            payload = [weights.params[f"{name}.scale"], weights.params[f"{name}.offset"],
                       weights.params[f"{name}.running_mean"],
                       weights.params[f"{name}.running_var"]]
        for arr in payload:
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != FCNQ_MAGIC:
        raise ValueError("not an FCNQ file (bad magic)")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != FCNQ_VERSION:
        raise ValueError(f"unsupported FCNQ version {version}")
    offset = 12
    raw: list[tuple[int, tuple[int, ...], list[np.ndarray]]] = []
    for _ in range(n_layers):
        if offset + 20 > len(blob):
            raise ValueError("FCNQ file truncated in layer header")
        kind, d0, d1, d2, d3 = struct.unpack_from("<5I", blob, offset)
        offset += 20
        if kind == _KIND_CONV:
            n_kernel = d0 * d1 * d2 * d3
            counts = [n_kernel, d0]
        elif kind == _KIND_BN:
            counts = [d1] * 4
        else:
            raise ValueError(f"unknown FCNQ layer kind {kind}")
        arrays = []
        for cnt in counts:
            end = offset + 4 * cnt
            if end > len(blob):
                raise ValueError("FCNQ file truncated in layer payload")
            arrays.append(np.frombuffer(blob, dtype="<f4", count=cnt,
                                        offset=offset).copy())
            offset += 4 * cnt
        raw.append((kind, (d0, d1, d2, d3), arrays))
    if offset != len(blob):
        raise ValueError("FCNQ file has trailing bytes")

    # bind |M| from the last conv layer and validate the full shape chain
    conv_dims = [dims for kind, dims, _ in raw if kind == _KIND_CONV]
    if not conv_dims:
        raise ValueError("FCNQ file contains no conv layers")
    n_primitives = conv_dims[-1][0]
    expected = list(_weight_layer_order(n_primitives))
    if len(expected) != n_layers:
        raise ValueError(f"FCNQ layer count {n_layers} does not match "
                         f"the architecture ({len(expected)})")
    params: dict[str, np.ndarray] = {}
    for (kind, dims, arrays), (want_kind, name, want_dims) in zip(raw, expected):
        if kind != want_kind or dims != want_dims:
            raise ValueError(
                f"FCNQ layer mismatch at {name}: kind={kind} dims={dims}, "
                f"expected kind={want_kind} dims={want_dims}")
        if kind == _KIND_CONV:
            params[f"{name}.kernel"] = arrays[0].reshape(dims)
            params[f"{name}.bias"] = arrays[1]
        else:
            params[f"{name}.scale"] = arrays[0]
            params[f"{name}.offset"] = arrays[1]
            params[f"{name}.running_mean"] = arrays[2]
            params[f"{name}.running_var"] = arrays[3]
    return WeightStore(params, n_primitives, np.dtype(np.float32))
