"""Tiny 3D U-Net sized for CPU training, with exact reverse-mode gradients.

The architecture is fixed by UNetConfig: ``depth`` encoder levels of
(conv-ReLU x2, 2x2x2 maxpool), a bottleneck, and mirrored decoder levels of
(nearest upsample x2, skip concat, conv-ReLU x2), finished by a 1x1x1 head.
Channel width doubles per level starting at ``base_channels``. All layers are
differentiated by hand; gradients are validated against central finite
differences in the test suite.

Weight files: magic ``SQW1``, then a length-prefixed config fingerprint,
then per-parameter records (u16 name length, name, u8 rank, u32 dims,
float32 C-order payload), everything little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .kernels import (
    ShapeError,
    conv3d_backward,
    conv3d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    relu_backward,
    upsample2_backward,
    upsample2_forward,
)

WEIGHTS_MAGIC = b"SQW1"

_AXES = "xyz"


class ModelError(ValueError):
    pass


class WeightFormatError(ModelError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2  # normalized image + soft-windowed image
    num_classes: int = 4  # background, spleen, liver, gallbladder
    depth: int = 2
    base_channels: int = 4
    kernel: int = 3
    patch_shape: tuple[int, int, int] = (16, 16, 16)

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError(f"depth must be >= 1, got {self.depth}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ModelError(f"kernel size must be odd, got {self.kernel}")
        step = 2**self.depth
        for axis, dim in zip(_AXES, self.patch_shape):
            if dim % step:
                raise ModelError(
                    f"patch dim {axis}={dim} not divisible by 2^depth={step}"
                )

    def fingerprint(self) -> str:
        px, py, pz = self.patch_shape
        return (
            f"unet-v1;in={self.in_channels};classes={self.num_classes};"
            f"depth={self.depth};base={self.base_channels};kernel={self.kernel};"
            f"patch={px}x{py}x{pz}"
        )

    @staticmethod
    def from_fingerprint(fp: str) -> "UNetConfig":
        try:
            kind, *parts = fp.split(";")
            if kind != "unet-v1":
                raise ValueError(f"unknown architecture tag {kind!r}")
            kv = dict(p.split("=", 1) for p in parts)
            patch = tuple(int(d) for d in kv["patch"].split("x"))
            return UNetConfig(
                in_channels=int(kv["in"]),
                num_classes=int(kv["classes"]),
                depth=int(kv["depth"]),
                base_channels=int(kv["base"]),
                kernel=int(kv["kernel"]),
                patch_shape=patch,  # type: ignore[arg-type]
            )
        except (KeyError, ValueError) as e:
            raise WeightFormatError(f"bad config fingerprint {fp!r}: {e}") from e


def _level_channels(cfg: UNetConfig, level: int) -> int:
    return cfg.base_channels * 2**level


def param_spec(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes for this architecture."""
    k = cfg.kernel
    spec: dict[str, tuple[int, ...]] = {}

    def conv_pair(prefix: str, cin: int, cout: int, ksize: int):
        spec[f"{prefix}.weight"] = (cout, cin, ksize, ksize, ksize)
        spec[f"{prefix}.bias"] = (cout,)

    for i in range(cfg.depth):
        cin = cfg.in_channels if i == 0 else _level_channels(cfg, i - 1)
        cout = _level_channels(cfg, i)
        conv_pair(f"enc{i}.conv1", cin, cout, k)
        conv_pair(f"enc{i}.conv2", cout, cout, k)
    cin = _level_channels(cfg, cfg.depth - 1)
    cout = _level_channels(cfg, cfg.depth)
    conv_pair("bottleneck.conv1", cin, cout, k)
    conv_pair("bottleneck.conv2", cout, cout, k)
    for i in reversed(range(cfg.depth)):
        cin = _level_channels(cfg, i + 1) + _level_channels(cfg, i)  # upsample + skip
        cout = _level_channels(cfg, i)
        conv_pair(f"dec{i}.conv1", cin, cout, k)
        conv_pair(f"dec{i}.conv2", cout, cout, k)
    conv_pair("head", cfg.base_channels, cfg.num_classes, 1)
    return spec


@dataclass
class ModelWeights:
    config: UNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        expected = param_spec(self.config)
        if list(self.params.keys()) != list(expected.keys()):
            raise ModelError(
                f"parameter names do not match architecture: "
                f"{sorted(set(self.params) ^ set(expected))}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ModelError(
                    f"parameter {name} has shape {self.params[name].shape}, "
                    f"expected {shape}"
                )

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})


def init_weights(cfg: UNetConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """He-normal kernels, zero biases, from the documented counter RNG."""
    params: dict[str, np.ndarray] = {}
    for idx, (name, shape) in enumerate(param_spec(cfg).items()):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            g = rng.gaussians(rng.derive_seed(seed, idx), int(np.prod(shape)))
            params[name] = (g.reshape(shape) * std).astype(dtype)
    return ModelWeights(cfg, params)


def _check_input(cfg: UNetConfig, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(
            f"input must be ({cfg.in_channels}, X, Y, Z), got {x.shape}"
        )
    step = 2**cfg.depth
    for axis, dim in zip(_AXES, x.shape[1:]):
        if dim % step:
            raise ShapeError(
                f"spatial dim {axis}={dim} not divisible by 2^depth={step}"
            )


def _forward_with_cache(weights: ModelWeights, x: np.ndarray):
    cfg = weights.config
    p = weights.params
    _check_input(cfg, x)

    def block(h, prefix, cache):
        z1 = conv3d_forward(h, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"])
        a1 = relu(z1)
        z2 = conv3d_forward(a1, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"])
        a2 = relu(z2)
        cache[prefix] = (h, z1, a1, z2)
        return a2

    cache: dict = {}
    skips = {}
    h = x
    for i in range(cfg.depth):
        a2 = block(h, f"enc{i}", cache)
        skips[i] = a2
        h, arg = maxpool2_forward(a2)
        cache[f"pool{i}"] = (arg, a2.shape)
    h = block(h, "bottleneck", cache)
    for i in reversed(range(cfg.depth)):
        up = upsample2_forward(h)
        cat = np.concatenate([up, skips[i]], axis=0)
        cache[f"cat{i}"] = up.shape[0]
        h = block(cat, f"dec{i}", cache)
    logits = conv3d_forward(h, p["head.weight"], p["head.bias"])
    cache["head_in"] = h
    return logits, cache


def unet_forward(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Logits with shape (num_classes, X, Y, Z)."""
    return _forward_with_cache(weights, x)[0]


def _backward_from_logits(weights: ModelWeights, cache, g_logits: np.ndarray):
    cfg = weights.config
    p = weights.params
    grads: dict[str, np.ndarray] = {}

    def block_backward(prefix, g):
        h, z1, a1, z2 = cache[prefix]
        g = relu_backward(z2, g)
        g, gw2, gb2 = conv3d_backward(a1, p[f"{prefix}.conv2.weight"], g)
        grads[f"{prefix}.conv2.weight"] = gw2
        grads[f"{prefix}.conv2.bias"] = gb2
        g = relu_backward(z1, g)
        g, gw1, gb1 = conv3d_backward(h, p[f"{prefix}.conv1.weight"], g)
        grads[f"{prefix}.conv1.weight"] = gw1
        grads[f"{prefix}.conv1.bias"] = gb1
        return g

    g, gw, gb = conv3d_backward(cache["head_in"], p["head.weight"], g_logits)
    grads["head.weight"] = gw
    grads["head.bias"] = gb

    skip_grads = {}
    for i in range(cfg.depth):
        g_cat = block_backward(f"dec{i}", g)
        up_ch = cache[f"cat{i}"]
        skip_grads[i] = g_cat[up_ch:]
        g = upsample2_backward(g_cat[:up_ch])
    g = block_backward("bottleneck", g)
    for i in reversed(range(cfg.depth)):
        arg, a2_shape = cache[f"pool{i}"]
        g = maxpool2_backward(arg, g, a2_shape) + skip_grads[i]
        g = block_backward(f"enc{i}", g)
    return grads, g


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-voxel channel softmax, computed in float64 for tight sums."""
    z = logits.astype(np.float64)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ModelError(
            f"label codes must lie in [0, {num_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float64)
    for c in range(num_classes):
        out[c] = labels == c
    return out


def soft_dice_loss(probs: np.ndarray, target_onehot: np.ndarray, epsilon: float = 1e-5) -> float:
    """1 - mean over classes of (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)."""
    if probs.shape != target_onehot.shape:
        raise ShapeError(
            f"probs shape {probs.shape} != target shape {target_onehot.shape}"
        )
    axes = tuple(range(1, probs.ndim))
    num = 2.0 * (probs * target_onehot).sum(axis=axes) + epsilon
    den = probs.sum(axis=axes) + target_onehot.sum(axis=axes) + epsilon
    return float(1.0 - (num / den).mean())


def _dice_softmax_backward(probs, target_onehot, epsilon: float):
    """d(soft dice loss)/d(logits), fused through the channel softmax."""
    axes = tuple(range(1, probs.ndim))
    num = 2.0 * (probs * target_onehot).sum(axis=axes) + epsilon
    den = probs.sum(axis=axes) + target_onehot.sum(axis=axes) + epsilon
    shape = (-1,) + (1,) * (probs.ndim - 1)
    n_classes = probs.shape[0]
    g_probs = -(2.0 * target_onehot * den.reshape(shape) - num.reshape(shape)) / (
        den.reshape(shape) ** 2
    )
    g_probs /= n_classes
    inner = (g_probs * probs).sum(axis=0, keepdims=True)
    return probs * (g_probs - inner)


def loss_and_gradients(
    weights: ModelWeights, x: np.ndarray, target_onehot: np.ndarray, epsilon: float = 1e-5
) -> tuple[float, dict[str, np.ndarray]]:
    logits, cache = _forward_with_cache(weights, x)
    probs = softmax_channels(logits)
    if probs.shape != target_onehot.shape:
        raise ShapeError(
            f"target shape {target_onehot.shape} != logits shape {probs.shape}"
        )
    loss = soft_dice_loss(probs, target_onehot, epsilon)
    g_logits = _dice_softmax_backward(probs, np.asarray(target_onehot, np.float64), epsilon)
    grads, _ = _backward_from_logits(weights, cache, g_logits.astype(x.dtype))
    ordered = {name: grads[name] for name in weights.params}
    return loss, ordered


def backward(
    weights: ModelWeights, x: np.ndarray, target_onehot: np.ndarray, epsilon: float = 1e-5
) -> dict[str, np.ndarray]:
    """Exact gradients of the soft-Dice objective w.r.t. every parameter."""
    return loss_and_gradients(weights, x, target_onehot, epsilon)[1]


def sgd_step(weights: ModelWeights, grads: dict[str, np.ndarray], lr: float) -> ModelWeights:
    if set(grads) != set(weights.params):
        raise ModelError(
            f"gradient names do not match weights: {sorted(set(grads) ^ set(weights.params))}"
        )
    new_params = {}
    for name, w in weights.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ModelError(
                f"gradient {name} has shape {g.shape}, expected {w.shape}"
            )
        new_params[name] = (w - lr * g).astype(w.dtype)
    return ModelWeights(weights.config, new_params)


def predict_labels(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Argmax class per voxel, as int32 (X, Y, Z)."""
    logits = unet_forward(weights, x)
    return logits.argmax(axis=0).astype(np.int32)


def save_weights(weights: ModelWeights) -> bytes:
    weights.validate()
    fp = weights.config.fingerprint().encode()
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<H", len(fp))
    out += fp
    out += struct.pack("<I", len(weights.params))
    for name, arr in weights.params.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def load_weights(buf: bytes) -> ModelWeights:
    view = memoryview(buf)

    def take(n: int, what: str) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise WeightFormatError(
                f"truncated weight file while reading {what}: "
                f"needed {n} bytes, had {len(view)}"
            )
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4, "magic")) != WEIGHTS_MAGIC:
        raise WeightFormatError(f"bad magic; expected {WEIGHTS_MAGIC!r}")
    (fp_len,) = struct.unpack("<H", take(2, "fingerprint length"))
    cfg = UNetConfig.from_fingerprint(bytes(take(fp_len, "fingerprint")).decode())
    (count,) = struct.unpack("<I", take(4, "record count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode()
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        nbytes = 4 * int(np.prod(shape))
        payload = take(nbytes, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    weights = ModelWeights(cfg, params)
    weights.validate()
    return weights
