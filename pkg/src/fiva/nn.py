"""Flat-parameter segmentation networks with hand-written backprop.

Two architectures share one code path:

* ``"mlp"``  -- a per-pixel MLP (every layer is a 1x1 convolution). Used by the
  unit tests because it is small enough to check by hand.
* ``"unet"`` -- a 2-down / 2-up convolutional encoder-decoder with concatenating
  skip connections.

Every model has a shared backbone followed by one 1x1-conv segmentation head per
client. All parameters live in a single flat float64 vector; layers are views
into slices of it. Tensors are NHWC internally; the public ``forward`` takes and
returns NCHW arrays.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np

DICE_SMOOTH = 1e-5


class SpecError(ValueError):
    """Raised for an inconsistent :class:`ModelSpec`."""


@dataclass(frozen=True)
class HeadSpec:
    """One segmentation head.

    ``labels[c]`` is the global label predicted by output channel ``c``;
    channel 0 must be background (global label 0).
    """

    name: str
    labels: tuple[int, ...]

    @property
    def n_channels(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ModelSpec:
    heads: tuple[HeadSpec, ...]
    n_labels: int
    kind: str = "unet"
    in_channels: int = 1
    height: int = 32
    width: int = 32
    widths: tuple[int, ...] = (8, 16, 32)
    activation: str = "relu"
    dropout: float = 0.2

    def head(self, head) -> tuple[int, HeadSpec]:
        if isinstance(head, (int, np.integer)):
            if not 0 <= head < len(self.heads):
                raise SpecError(f"head index {head} out of range")
            return int(head), self.heads[head]
        for i, h in enumerate(self.heads):
            if h.name == head:
                return i, h
        raise SpecError(f"unknown head {head!r}")

    def validate(self) -> "ModelSpec":
        if self.kind not in ("mlp", "unet"):
            raise SpecError(f"unknown model kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise SpecError("backbone widths must be non-empty and positive")
        if self.kind == "unet":
            if len(self.widths) != 3:
                raise SpecError("unet needs exactly three widths (one per level)")
            if self.height % 4 or self.width % 4:
                raise SpecError("unet input size must be divisible by 4")
        if not self.heads:
            raise SpecError("at least one head is required")
        if len({h.name for h in self.heads}) != len(self.heads):
            raise SpecError("head names must be unique")
        for h in self.heads:
            if len(h.labels) < 2 or h.labels[0] != 0:
                raise SpecError(f"head {h.name!r}: channel 0 must be background")
            if len(set(h.labels)) != len(h.labels):
                raise SpecError(f"head {h.name!r}: duplicate labels")
            if any(not 0 <= lab < self.n_labels for lab in h.labels):
                raise SpecError(f"head {h.name!r}: label outside the global label set")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout rate must lie in [0, 1)")
        return self


class LossValue(NamedTuple):
    total: float
    ce_part: float
    dice_part: float


@dataclass(frozen=True)
class Conv:
    """A k x k convolution, 'same' padding, weights stored as (k*k*cin, cout)."""

    k: int
    cin: int
    cout: int
    stride: int = 1
    w_slice: slice = field(default=slice(0, 0))
    b_slice: slice = field(default=slice(0, 0))

    @property
    def fan_in(self) -> int:
        return self.k * self.k * self.cin


@dataclass(frozen=True)
class Layout:
    spec: ModelSpec
    backbone: tuple[Conv, ...]
    heads: tuple[Conv, ...]
    size: int

    def groups(self) -> dict[str, np.ndarray]:
        """Boolean masks over the ParamVector: ``"backbone"`` and one per head."""
        out = {}
        bb = np.zeros(self.size, dtype=bool)
        bb[: self.heads[0].w_slice.start] = True
        out["backbone"] = bb
        for hs, conv in zip(self.spec.heads, self.heads):
            m = np.zeros(self.size, dtype=bool)
            m[conv.w_slice.start : conv.b_slice.stop] = True
            out[f"head:{hs.name}"] = m
        return out

    def feature_channels(self) -> int:
        """Channels of the feature map fed to the heads (where dropout acts)."""
        return self.backbone[-1].cout


@lru_cache(maxsize=64)
def layout(spec: ModelSpec) -> Layout:
    spec.validate()
    w = spec.widths
    if spec.kind == "mlp":
        shapes = []
        cin = spec.in_channels
        for c in w:
            shapes.append((1, cin, c, 1))
            cin = c
    else:
        c1, c2, c3 = w
        shapes = [
            (3, spec.in_channels, c1, 1),  # enc1
            (3, c1, c2, 2),  # down1
            (3, c2, c3, 2),  # down2
            (3, c3 + c2, c2, 1),  # dec2 (upsampled c3 ++ skip c2)
            (3, c2 + c1, c1, 1),  # dec1 (upsampled c2 ++ skip c1)
        ]
    offset = 0
    backbone = []
    for k, cin, cout, stride in shapes:
        conv, offset = _place(k, cin, cout, stride, offset)
        backbone.append(conv)
    feat = backbone[-1].cout
    heads = []
    for h in spec.heads:
        conv, offset = _place(1, feat, h.n_channels, 1, offset)
        heads.append(conv)
    return Layout(spec, tuple(backbone), tuple(heads), offset)


def _place(k, cin, cout, stride, offset):
    nw = k * k * cin * cout
    conv = Conv(k, cin, cout, stride, slice(offset, offset + nw), slice(offset + nw, offset + nw + cout))
    return conv, offset + nw + cout


def n_params(spec: ModelSpec) -> int:
    return layout(spec).size


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
    """He-normal weights (variance 2/fan_in), zero biases."""
    lay = layout(spec)
    rng = np.random.default_rng(seed)
    theta = np.zeros(lay.size)
    for conv in lay.backbone + lay.heads:
        n = conv.w_slice.stop - conv.w_slice.start
        theta[conv.w_slice] = rng.normal(0.0, np.sqrt(2.0 / conv.fan_in), size=n)
    return theta


# ---------------------------------------------------------------- activations


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1.0 - a * a


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


def softmax(logits, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (channel axis of NCHW by default)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------- conv kernels


def _im2col(x, k, stride):
    """(N,H,W,C) -> (N,Ho,Wo,k*k*C) with zero 'same' padding."""
    if k == 1:
        return x[:, ::stride, ::stride, :] if stride > 1 else x
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, w, _ = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    cols = [
        xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
        for i in range(k)
        for j in range(k)
    ]
    return np.concatenate(cols, axis=-1)


def _col2im(dcols, x_shape, k, stride):
    n, h, w, c = x_shape
    if k == 1:
        if stride == 1:
            return dcols
        dx = np.zeros(x_shape)
        dx[:, ::stride, ::stride, :] = dcols
        return dx
    p = k // 2
    ho, wo = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    idx = 0
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[
                ..., idx * c : (idx + 1) * c
            ]
            idx += 1
    return dxp[:, p : p + h, p : p + w, :]


def _conv_forward(theta, conv: Conv, x):
    W = theta[conv.w_slice].reshape(conv.fan_in, conv.cout)
    cols = _im2col(x, conv.k, conv.stride)
    out = cols @ W + theta[conv.b_slice]
    return out, cols


def _conv_backward(theta, conv: Conv, cols, x_shape, dout, grad, need_dx=True):
    W = theta[conv.w_slice].reshape(conv.fan_in, conv.cout)
    flat_cols = cols.reshape(-1, conv.fan_in)
    flat_dout = dout.reshape(-1, conv.cout)
    grad[conv.w_slice] += (flat_cols.T @ flat_dout).ravel()
    grad[conv.b_slice] += flat_dout.sum(axis=0)
    if not need_dx:
        return None
    if conv.stride == 1 and conv.k > 1:
        # transposed conv of a stride-1 'same' conv = conv with the rotated kernel
        Wr = W.reshape(conv.k, conv.k, conv.cin, conv.cout)[::-1, ::-1].transpose(0, 1, 3, 2)
        return _im2col(dout, conv.k, 1) @ Wr.reshape(-1, conv.cin)
    dcols = dout @ W.T
    return _col2im(dcols, x_shape, conv.k, conv.stride)


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_backward(d):
    n, h, w, c = d.shape
    return d.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ----------------------------------------------------------- forward/backward


def _check(theta, x, lay: Layout):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != lay.size:
        raise ValueError(f"parameter vector has length {theta.size}, model needs {lay.size}")
    x = np.asarray(x, dtype=np.float64)
    s = lay.spec
    if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
        raise ValueError(
            f"input shape {x.shape} does not match (N, {s.in_channels}, {s.height}, {s.width})"
        )
    return theta, x


def _backbone_forward(theta, lay: Layout, x_nhwc):
    act, _ = _ACTIVATIONS[lay.spec.activation]
    cache = []
    if lay.spec.kind == "mlp":
        h = x_nhwc
        for conv in lay.backbone:
            z, cols = _conv_forward(theta, conv, h)
            a = act(z)
            cache.append((conv, cols, h.shape, z, a))
            h = a
        return h, cache
    enc1, down1, down2, dec2, dec1 = lay.backbone

    def step(conv, inp):
        z, cols = _conv_forward(theta, conv, inp)
        a = act(z)
        cache.append((conv, cols, inp.shape, z, a))
        return a

    e1 = step(enc1, x_nhwc)
    e2 = step(down1, e1)
    e3 = step(down2, e2)
    d2 = step(dec2, np.concatenate([_upsample(e3), e2], axis=-1))
    d1 = step(dec1, np.concatenate([_upsample(d2), e1], axis=-1))
    return d1, cache


def _backbone_backward(theta, lay: Layout, cache, dfeat, grad):
    _, act_grad = _ACTIVATIONS[lay.spec.activation]

    def back(entry, da, need_dx=True):
        conv, cols, in_shape, z, a = entry
        dz = da * act_grad(z, a)
        return _conv_backward(theta, conv, cols, in_shape, dz, grad, need_dx)

    if lay.spec.kind == "mlp":
        d = dfeat
        for i in range(len(cache) - 1, -1, -1):
            d = back(cache[i], d, need_dx=i > 0)
        return
    c_enc1, c_down1, c_down2, c_dec2, c_dec1 = cache
    c1 = c_enc1[0].cout
    c2 = c_down1[0].cout
    din = back(c_dec1, dfeat)
    dd2 = _upsample_backward(din[..., :c2])
    de1 = din[..., c2:].copy()
    din = back(c_dec2, dd2)
    c3 = c_down2[0].cout
    de3 = _upsample_backward(din[..., :c3])
    de2 = din[..., c3:].copy()
    de2 += back(c_down2, de3)
    de1 += back(c_down1, de2)
    back(c_enc1, de1, need_dx=False)
    assert de1.shape[-1] == c1


def forward(theta, x, head, spec: ModelSpec, dropout_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Head logits, shape (N, C_head, H, W).

    ``dropout_mask`` multiplies the head-input feature map (N, H, W, F); see
    :func:`dropout_mask`.
    """
    lay = layout(spec)
    theta, x = _check(theta, x, lay)
    hi, _ = spec.head(head)
    feat, _ = _backbone_forward(theta, lay, x.transpose(0, 2, 3, 1))
    if dropout_mask is not None:
        feat = feat * dropout_mask
    logits, _ = _conv_forward(theta, lay.heads[hi], feat)
    return logits.transpose(0, 3, 1, 2)


def forward_all_heads(theta, x, spec: ModelSpec) -> list[np.ndarray]:
    """Logits of every head from one shared backbone pass."""
    lay = layout(spec)
    theta, x = _check(theta, x, lay)
    feat, _ = _backbone_forward(theta, lay, x.transpose(0, 2, 3, 1))
    return [_conv_forward(theta, conv, feat)[0].transpose(0, 3, 1, 2) for conv in lay.heads]


def dropout_mask(spec: ModelSpec, n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask over the head-input features: 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    shape = (n, spec.height, spec.width, layout(spec).feature_channels())
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def loss_from_logits(logits_nhwc, target, smooth: float = DICE_SMOOTH):
    """CE + soft Dice and the gradient w.r.t. the logits.

    CE is averaged over all pixels. Dice is computed per sample and channel
    (background included) and averaged, so the loss is a plain mean over the
    batch and duplicating the batch leaves it unchanged.
    """
    n, h, w, c = logits_nhwc.shape
    p = softmax(logits_nhwc, axis=-1)
    y = np.zeros_like(p)
    np.put_along_axis(y, target[..., None], 1.0, axis=-1)
    npix = n * h * w
    logp = logits_nhwc - logits_nhwc.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    ce = -(y * logp).sum() / npix
    inter = (p * y).sum(axis=(1, 2))  # (n, c)
    union = p.sum(axis=(1, 2)) + y.sum(axis=(1, 2))
    den = union + smooth
    dice_coef = (2.0 * inter + smooth) / den
    dice = 1.0 - dice_coef.mean()
    # dDice_nc/dp = (2y*den - (2I+s)) / den^2
    ddice = (2.0 * y * den[:, None, None, :] - (2.0 * inter + smooth)[:, None, None, :]) / (
        den[:, None, None, :] ** 2
    )
    dp = -ddice / (n * c)
    dz_dice = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dz = (p - y) / npix + dz_dice
    return LossValue(float(ce + dice), float(ce), float(dice)), dz


def backward(theta, x, target, head, spec: ModelSpec, dropout_mask: Optional[np.ndarray] = None):
    """Loss and full-length gradient for one batch routed through ``head``.

    Entries belonging to other heads are exactly zero.
    """
    lay = layout(spec)
    theta, x = _check(theta, x, lay)
    hi, hs = spec.head(head)
    target = np.asarray(target)
    if target.shape != (x.shape[0], spec.height, spec.width):
        raise ValueError(f"target shape {target.shape} does not match input")
    if target.min() < 0 or target.max() >= hs.n_channels:
        raise ValueError(f"target values must lie in [0, {hs.n_channels})")
    feat, cache = _backbone_forward(theta, lay, x.transpose(0, 2, 3, 1))
    if dropout_mask is not None:
        feat = feat * dropout_mask
    hconv = lay.heads[hi]
    logits, hcols = _conv_forward(theta, hconv, feat)
    loss, dz = loss_from_logits(logits, target.astype(np.intp))
    if not np.isfinite(loss.total):
        raise FloatingPointError("non-finite loss")
    grad = np.zeros(lay.size)
    dfeat = _conv_backward(theta, hconv, hcols, feat.shape, dz, grad)
    if dropout_mask is not None:
        dfeat = dfeat * dropout_mask
    _backbone_backward(theta, lay, cache, dfeat, grad)
    return loss, grad


def mlp_spec(sizes: Sequence[int], head_labels: Sequence[Sequence[int]], n_labels: int, **kw) -> ModelSpec:
    """Per-pixel MLP with ``sizes = (in, hidden..., )`` and one head per label tuple."""
    heads = tuple(HeadSpec(f"h{i}", tuple(lab)) for i, lab in enumerate(head_labels))
    return ModelSpec(
        heads=heads,
        n_labels=n_labels,
        kind="mlp",
        in_channels=sizes[0],
        height=kw.pop("height", 1),
        width=kw.pop("width", 1),
        widths=tuple(sizes[1:]),
        **kw,
    ).validate()


def replace(spec: ModelSpec, **changes) -> ModelSpec:
    return dataclasses.replace(spec, **changes).validate()
