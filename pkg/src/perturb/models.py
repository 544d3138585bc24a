"""Compact convolutional classifiers with optional spatial-attention gates.

Two variants share one backbone:

* ``attention_classifier`` — conv blocks with at least one spatial
  attention gate; its maps drive pixel clustering downstream.
* ``predictor`` — the same backbone without gates (the model actually
  shipped for inference).

A spatial attention gate compresses features to two channels
(channel-wise max and mean), convolves them down to one channel, squashes
through a sigmoid, and multiplies the result back onto every feature
channel.  Maps therefore live strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint, load_checkpoint

VARIANTS = ("attention_classifier", "predictor")
N_CLASSES = 7


class SpecError(ValueError):
    """Structurally invalid model description."""


class VariantError(TypeError):
    """Operation applied to the wrong model variant."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; immutable and validated on creation.

    ``pool_after`` / ``attention_after`` hold 1-based conv-block indices.
    Convolutions are stride-1 with same-padding, pools are 2x2/stride-2
    (so the running spatial size must stay even wherever a pool sits),
    and the head is global-average-pool -> dense.
    """

    variant: str = "attention_classifier"
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    pool_after: tuple[int, ...] = (1, 2, 3)
    attention_after: tuple[int, ...] = (2,)
    attention_kernel: int = 7
    classes: int = N_CLASSES
    in_channels: int = 1
    image_size: int = 48

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise SpecError(f"conv_channels must be positive and non-empty, got {self.conv_channels}")
        n = len(self.conv_channels)
        for name, sites in (("pool_after", self.pool_after), ("attention_after", self.attention_after)):
            if list(sites) != sorted(set(sites)) or any(not 1 <= s <= n for s in sites):
                raise SpecError(f"{name} must be sorted unique block indices in 1..{n}, got {sites}")
        for name, k in (("kernel_size", self.kernel_size), ("attention_kernel", self.attention_kernel)):
            if k < 1 or k % 2 == 0:
                raise SpecError(f"{name} must be odd and positive (same-padding), got {k}")
        if self.classes != N_CLASSES:
            raise SpecError(f"models are fixed at {N_CLASSES} output classes, got {self.classes}")
        if self.in_channels < 1 or self.image_size < 1:
            raise SpecError("in_channels and image_size must be positive")
        if self.variant == "attention_classifier" and not self.attention_after:
            raise SpecError("an attention classifier needs at least one attention site")
        size = self.image_size
        for i in range(1, n + 1):
            if i in self.pool_after:
                if size < 2 or size % 2:
                    raise SpecError(
                        f"spatial underflow: block {i} pools a {size}x{size} map; "
                        "2x2/stride-2 pooling needs an even size >= 2"
                    )
                size //= 2

    def feature_size(self) -> int:
        """Spatial edge length after the last conv block."""
        return self.image_size // (2 ** len(self.pool_after))


def default_attention_spec() -> ModelSpec:
    return ModelSpec()


def default_predictor_spec() -> ModelSpec:
    return ModelSpec(variant="predictor", attention_after=())


def init_params(spec: ModelSpec, seed: int) -> dict[str, T.Tensor]:
    """He-normal weights (fan-in), zero biases; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    params: dict[str, T.Tensor] = {}

    def he(shape, fan_in):
        return T.Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    cin = spec.in_channels
    k = spec.kernel_size
    for i, cout in enumerate(spec.conv_channels, start=1):
        params[f"block{i}.weight"] = he((cout, cin, k, k), cin * k * k)
        params[f"block{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)
        if i in spec.attention_after:
            ka = spec.attention_kernel
            params[f"attn{i}.weight"] = he((1, 2, ka, ka), 2 * ka * ka)
            params[f"attn{i}.bias"] = T.Tensor(np.zeros(1), requires_grad=True)
        cin = cout
    feat = spec.conv_channels[-1]
    params["head.weight"] = he((feat, spec.classes), feat)
    params["head.bias"] = T.Tensor(np.zeros(spec.classes), requires_grad=True)
    return params


def attention_gate(features: T.Tensor, weight: T.Tensor, bias: T.Tensor, kernel: int):
    """Gate features by a single-channel sigmoid map; returns (gated, map)."""
    desc = T.concat_channels(T.channel_max(features), T.channel_mean(features))
    amap = T.sigmoid(T.conv2d(desc, weight, bias, stride=1, padding=(kernel - 1) // 2))
    return features * amap, amap


def forward_pass(spec: ModelSpec, params: dict[str, T.Tensor], x, collect_attention: bool = False):
    """Run the backbone; returns logits, or (logits, attention maps)."""
    t = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if t.ndim != 4:
        raise T.ShapeError(f"model input must be (batch, channels, h, w), got {t.shape}")
    maps = []
    for i in range(1, len(spec.conv_channels) + 1):
        t = T.conv2d(t, params[f"block{i}.weight"], params[f"block{i}.bias"], stride=1, padding=spec.kernel_size // 2)
        t = T.relu(t)
        if i in spec.attention_after:
            t, amap = attention_gate(t, params[f"attn{i}.weight"], params[f"attn{i}.bias"], spec.attention_kernel)
            maps.append(amap)
        if i in spec.pool_after:
            t = T.maxpool2d(t, 2)
    t = T.avgpool2d(t, t.shape[2])
    t = T.flatten(t)
    logits = T.dense(t, params["head.weight"], params["head.bias"])
    return (logits, maps) if collect_attention else logits


@dataclass
class Model:
    """A spec plus its parameter tensors."""

    spec: ModelSpec
    params: dict[str, T.Tensor]

    def forward(self, x, collect_attention: bool = False):
        return forward_pass(self.spec, self.params, x, collect_attention)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, {**_encode_spec(self.spec), **{n: t.data for n, t in self.params.items()}})

    @staticmethod
    def load(path) -> "Model":
        arrays = load_checkpoint(path)
        spec = _decode_spec(arrays)
        params = {n: T.Tensor(a, requires_grad=True) for n, a in arrays.items() if not n.startswith("__spec__/")}
        expected = set(init_params(spec, 0))
        if set(params) != expected:
            raise SpecError(f"checkpoint parameters do not match spec: missing {expected - set(params)}")
        return Model(spec, params)


def build_model(spec: ModelSpec, seed: int) -> Model:
    return Model(spec, init_params(spec, seed))


def _encode_spec(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {
        "__spec__/variant": np.array([VARIANTS.index(spec.variant)], float),
        "__spec__/conv_channels": np.array(spec.conv_channels, float),
        "__spec__/kernel_size": np.array([spec.kernel_size], float),
        "__spec__/pool_after": np.array(spec.pool_after, float),
        "__spec__/attention_after": np.array(spec.attention_after, float),
        "__spec__/attention_kernel": np.array([spec.attention_kernel], float),
        "__spec__/classes": np.array([spec.classes], float),
        "__spec__/in_channels": np.array([spec.in_channels], float),
        "__spec__/image_size": np.array([spec.image_size], float),
    }


def _decode_spec(arrays: dict[str, np.ndarray]) -> ModelSpec:
    try:
        return ModelSpec(
            variant=VARIANTS[int(arrays["__spec__/variant"][0])],
            conv_channels=tuple(int(c) for c in arrays["__spec__/conv_channels"]),
            kernel_size=int(arrays["__spec__/kernel_size"][0]),
            pool_after=tuple(int(i) for i in arrays["__spec__/pool_after"]),
            attention_after=tuple(int(i) for i in arrays["__spec__/attention_after"]),
            attention_kernel=int(arrays["__spec__/attention_kernel"][0]),
            classes=int(arrays["__spec__/classes"][0]),
            in_channels=int(arrays["__spec__/in_channels"][0]),
            image_size=int(arrays["__spec__/image_size"][0]),
        )
    except KeyError as exc:
        raise SpecError(f"checkpoint lacks a model description ({exc})") from exc


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample/downsample with half-pixel (align_corners=False) sampling."""
    a = np.asarray(img, dtype=np.float64)
    H, W = a.shape
    r = np.clip((np.arange(out_h) + 0.5) * (H / out_h) - 0.5, 0, H - 1)
    c = np.clip((np.arange(out_w) + 0.5) * (W / out_w) - 0.5, 0, W - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    top = a[np.ix_(r0, c0)] * (1 - fc) + a[np.ix_(r0, c1)] * fc
    bot = a[np.ix_(r1, c0)] * (1 - fc) + a[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def _as_batch(images: np.ndarray, spec: ModelSpec) -> np.ndarray:
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4 or a.shape[2] != spec.image_size or a.shape[3] != spec.image_size:
        raise T.ShapeError(f"expected {spec.image_size}x{spec.image_size} grayscale images, got {a.shape}")
    return a


def extract_attention(model: Model, image: np.ndarray) -> np.ndarray:
    """Attention map of the *last* gate, bilinearly upsampled to input size.

    Only defined for attention-classifier models; predictors have no maps.
    """
    if model.spec.variant != "attention_classifier":
        raise VariantError(f"extract_attention needs an attention_classifier, got {model.spec.variant!r}")
    x = _as_batch(image, model.spec)
    if x.shape[0] != 1:
        raise T.ShapeError(f"extract_attention takes a single image, got batch of {x.shape[0]}")
    with T.no_grad():
        _, maps = forward_pass(model.spec, model.params, x, collect_attention=True)
    return bilinear_resize(maps[-1].data[0, 0], model.spec.image_size, model.spec.image_size)


def mean_attention_map(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Mean last-gate attention map over a set of images, upsampled to input size.

    Averaging commutes with the (linear) upsampling, so the mean is taken
    at native resolution and resized once.
    """
    if model.spec.variant != "attention_classifier":
        raise VariantError(f"mean_attention_map needs an attention_classifier, got {model.spec.variant!r}")
    x = _as_batch(images, model.spec)
    total = None
    with T.no_grad():
        for start in range(0, x.shape[0], batch_size):
            _, maps = forward_pass(model.spec, model.params, x[start : start + batch_size], collect_attention=True)
            part = maps[-1].data[:, 0].sum(axis=0)
            total = part if total is None else total + part
    mean = total / x.shape[0]
    return bilinear_resize(mean, model.spec.image_size, model.spec.image_size)


def forward_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-only logits for a stack of grayscale images."""
    x = _as_batch(images, model.spec)
    out = np.empty((x.shape[0], model.spec.classes))
    with T.no_grad():
        for start in range(0, x.shape[0], batch_size):
            out[start : start + batch_size] = model.forward(x[start : start + batch_size]).data
    return out


def saliency(model: Model, image: np.ndarray, class_index: int) -> np.ndarray:
    """|d logit[class] / d pixel|, max-normalized (zero map stays zero).

    Reads gradients only; model parameters are left exactly as they were.
    """
    if not 0 <= class_index < model.spec.classes:
        raise IndexError(f"class index {class_index} out of range [0, {model.spec.classes})")
    x = T.Tensor(_as_batch(image, model.spec), requires_grad=True)
    logits = forward_pass(model.spec, model.params, x)
    mask = np.zeros((1, model.spec.classes))
    mask[0, class_index] = 1.0
    T.backward((logits * T.Tensor(mask)).sum())
    g = np.abs(x.grad[0, 0])
    T.zero_grad(model.params)  # discard incidental parameter grads
    peak = g.max()
    return g / peak if peak > 0 else g


def ensemble_predict(models: list[Model], image: np.ndarray) -> tuple[np.ndarray, int]:
    """Average softmax probabilities across models; returns (probs, label)."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    classes = models[0].spec.classes
    probs = np.zeros(classes)
    for m in models:
        if m.spec.classes != classes:
            raise SpecError("ensemble members must agree on the number of classes")
        probs += T.softmax_probs(forward_logits(m, image)[0])
    probs /= len(models)
    return probs, int(probs.argmax())
