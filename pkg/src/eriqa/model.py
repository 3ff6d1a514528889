"""Unpaired-IQA: a distorted-image branch and an external-reference branch
joined stage by stage through a fusion module.

Parameters are plain :class:`~eriqa.tensor.Tensor` objects held in small
dataclasses; :meth:`UnpairedIqaModel.named_parameters` fixes the order used by
the optimiser and the checkpoint writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FUSION_KINDS = ("none", "cosine", "bottleneck", "mafe")
STAGE_WIDTHS = (16, 32, 64, 128)
BACKBONE_WIDTHS = (16, 32, 64)


def kaiming_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, c_in, c_out, k, dtype):
        return cls(kaiming_uniform(rng, (c_out, c_in, k, k), dtype), zeros((c_out,), dtype))

    def __call__(self, x):
        k = self.weight.shape[-1]
        return T.conv2d(x, self.weight, self.bias, padding=(k - 1) // 2)

    def params(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, d_in, d_out, dtype, zero=False):
        w = zeros((d_out, d_in), dtype) if zero else kaiming_uniform(rng, (d_out, d_in), dtype)
        return cls(w, zeros((d_out,), dtype))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def params(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass
class FebParams:
    conv1: Conv
    conv2: Conv

    @classmethod
    def init(cls, rng, c_in, width, dtype):
        return cls(Conv.init(rng, c_in, width, 3, dtype), Conv.init(rng, width, width, 3, dtype))

    def params(self, prefix):
        return self.conv1.params(f"{prefix}.conv1") + self.conv2.params(f"{prefix}.conv2")


def feb_forward(params, x):
    """Feature extraction block: two 3x3 conv + ReLU layers."""
    if x.shape[-3] != params.conv1.weight.shape[1]:
        raise ShapeError(f"FEB expects {params.conv1.weight.shape[1]} channels, got {x.shape[-3]}")
    return T.relu(params.conv2(T.relu(params.conv1(x))))


# ---------------------------------------------------------------------------
# Fusion modules


def _check_pair(f_d, f_er):
    if f_d.shape != f_er.shape:
        raise ShapeError(f"fusion operands differ: {f_d.shape} vs {f_er.shape}")


def cosine_fusion(f_d, f_er):
    """f_d + s * f_er with s the per-channel cosine similarity."""
    _check_pair(f_d, f_er)
    s = T.channel_cosine(f_d, f_er)
    return T.add(f_d, T.mul(f_er, s))


@dataclass
class BottleneckParams:
    fuse: Conv

    @classmethod
    def init(cls, rng, c, dtype):
        return cls(Conv.init(rng, 2 * c, c, 1, dtype))

    def params(self, prefix):
        return self.fuse.params(f"{prefix}.fuse")


def bottleneck_fusion(params, f_d, f_er):
    _check_pair(f_d, f_er)
    return params.fuse(T.concat_channels(f_d, f_er))


@dataclass
class MafeParams:
    pre_d: Conv
    pre_er: Conv
    squeeze: Dense

    @classmethod
    def init(cls, rng, c, dtype):
        return cls(Conv.init(rng, c, c, 1, dtype), Conv.init(rng, c, c, 1, dtype),
                   Dense.init(rng, 2 * c, c, dtype))

    def params(self, prefix):
        return (self.pre_d.params(f"{prefix}.pre_d") + self.pre_er.params(f"{prefix}.pre_er")
                + self.squeeze.params(f"{prefix}.squeeze"))


def mafe_attention(params, f_d, f_er):
    """Channel attention in (0, 1) from the pooled, concatenated branch features."""
    _check_pair(f_d, f_er)
    u = T.relu(params.pre_d(f_d))
    v = T.relu(params.pre_er(f_er))
    g = T.global_avg_pool(T.concat_channels(u, v))
    return T.sigmoid(params.squeeze(g))


def mafe_fusion(params, f_d, f_er):
    return T.mul(f_d, mafe_attention(params, f_d, f_er))


# ---------------------------------------------------------------------------
# Semantic backbone


@dataclass
class TinyBackbone:
    """Three conv stages (16/32/64) with 2x max-pool, plus a 10-way head used
    only for its own pre-training."""

    convs: list
    head: Dense

    @classmethod
    def init(cls, rng, dtype=np.float32, n_classes=10):
        convs, c = [], 3
        for w in BACKBONE_WIDTHS:
            convs.append(Conv.init(rng, c, w, 3, dtype))
            c = w
        return cls(convs, Dense.init(rng, c, n_classes, dtype))

    @property
    def out_channels(self):
        return BACKBONE_WIDTHS[-1]

    def features(self, x):
        for conv in self.convs:
            x = T.max_pool2(T.relu(conv(x)))
        return x

    def classify(self, x):
        return self.head(T.global_avg_pool(self.features(x)))

    def params(self, prefix="backbone"):
        out = []
        for i, conv in enumerate(self.convs):
            out += conv.params(f"{prefix}.conv{i}")
        return out + self.head.params(f"{prefix}.head")


# ---------------------------------------------------------------------------
# Full model


@dataclass
class Branch:
    stem: Conv
    febs: list

    @classmethod
    def init(cls, rng, dtype):
        stem = Conv.init(rng, 3, STAGE_WIDTHS[0], 3, dtype)
        febs, c = [], STAGE_WIDTHS[0]
        for w in STAGE_WIDTHS:
            febs.append(FebParams.init(rng, c, w, dtype))
            c = w
        return cls(stem, febs)

    def params(self, prefix):
        out = self.stem.params(f"{prefix}.stem")
        for i, feb in enumerate(self.febs):
            out += feb.params(f"{prefix}.feb{i}")
        return out


@dataclass
class UnpairedIqaModel:
    fusion_kind: str
    n_classes: int
    main: Branch
    aux: Branch | None
    fusions: list
    classifier: Dense
    score_head: Dense
    backbone: TinyBackbone | None = None
    dtype: type = np.float32
    feature_hook: list | None = field(default=None, repr=False)

    @classmethod
    def create(cls, fusion_kind="mafe", n_classes=26, seed=0, dtype=np.float32, backbone=None):
        if fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {fusion_kind!r}; expected one of {FUSION_KINDS}")
        rng = np.random.default_rng(seed)
        main = Branch.init(rng, dtype)
        aux = Branch.init(rng, dtype) if fusion_kind != "none" else None
        fusions = []
        for w in STAGE_WIDTHS:
            if fusion_kind == "bottleneck":
                fusions.append(BottleneckParams.init(rng, w, dtype))
            elif fusion_kind == "mafe":
                fusions.append(MafeParams.init(rng, w, dtype))
            else:
                fusions.append(None)
        c = STAGE_WIDTHS[-1]
        classifier = Dense.init(rng, c, n_classes, dtype, zero=True)
        c_sem = backbone.out_channels if backbone is not None else BACKBONE_WIDTHS[-1]
        score_head = Dense.init(rng, c * c_sem, 1, dtype, zero=True)
        return cls(fusion_kind, n_classes, main, aux, fusions, classifier, score_head, backbone, dtype)

    # -- parameters --------------------------------------------------------
    def named_parameters(self, include_backbone=True):
        out = self.main.params("main")
        if self.aux is not None:
            out += self.aux.params("aux")
        for i, fu in enumerate(self.fusions):
            if fu is not None:
                out += fu.params(f"fusion{i}")
        out += self.classifier.params("classifier")
        out += self.score_head.params("score_head")
        if include_backbone and self.backbone is not None:
            out += self.backbone.params("backbone")
        return out

    def parameters(self, include_backbone=True):
        return [p for _, p in self.named_parameters(include_backbone)]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward -----------------------------------------------------------
    def _fuse(self, i, f_d, f_er):
        kind = self.fusion_kind
        if kind == "cosine":
            return cosine_fusion(f_d, f_er)
        if kind == "bottleneck":
            return bottleneck_fusion(self.fusions[i], f_d, f_er)
        if kind == "mafe":
            return mafe_fusion(self.fusions[i], f_d, f_er)
        return f_d

    def main_features(self, i_d, i_er):
        """Main-branch output after the last fusion and pooling stage."""
        x_d = _as_input(i_d, self.dtype)
        if min(x_d.shape[-2:]) < 16:
            raise ShapeError(f"input {x_d.shape[-2:]} smaller than 16x16")
        f_d = self.main.stem(x_d)
        use_aux = self.fusion_kind != "none"
        if use_aux:
            x_er = _as_input(i_er, self.dtype)
            if x_er.shape != x_d.shape:
                raise ShapeError(f"reference {x_er.shape} and distorted {x_d.shape} differ in size")
            f_er = self.aux.stem(x_er)
        for i in range(len(STAGE_WIDTHS)):
            f_d = feb_forward(self.main.febs[i], f_d)
            if use_aux:
                f_er = feb_forward(self.aux.febs[i], f_er)
            if self.feature_hook is not None:
                self.feature_hook.append((i, f_d.data.copy(), f_er.data.copy() if use_aux else None))
            f_d = T.max_pool2(self._fuse(i, f_d, f_er) if use_aux else f_d)
            if use_aux:
                f_er = T.max_pool2(f_er)
        return f_d

    def forward_pretrain(self, i_d, i_er):
        """Raw class logits (N, K) or (K,) for a single image."""
        return self.classifier(T.global_avg_pool(self.main_features(i_d, i_er)))

    def forward_score(self, i_d, i_er):
        """Quality score per image (higher is better)."""
        if self.backbone is None:
            raise ValueError("forward_score needs a semantic backbone attached")
        f = self.main_features(i_d, i_er)
        sem = self.backbone.features(_as_input(i_d, self.dtype))
        sem = T.resize_nearest(sem, f.shape[-2:])
        z = T.bilinear_pool(f, sem)
        out = self.score_head(z)
        return T.reshape(out, out.shape[:-1])


def _as_input(img, dtype):
    """Accept a Tensor, float array in [0,1], or uint8 HWC/NHWC image."""
    if isinstance(img, Tensor):
        return img
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(dtype) / dtype(255.0)
        arr = np.moveaxis(arr, -1, -3)
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


def images_to_batch(images, dtype=np.float32):
    """Stack uint8 (H,W,3) images into an (N,3,H,W) tensor scaled to [0,1]."""
    arr = np.stack(images).astype(dtype) / dtype(255.0)
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
