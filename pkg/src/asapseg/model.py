"""The segmentation network: backbone, pyramid neck, normalization fusion,
directional self-attention and prediction heads."""

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, add, matmul, relu, reshape, transpose
from .errors import ContractError, ShapeError
from .layers import (ConvParams, NormParams, avg_pool, batch_norm, conv2d,
                     instance_norm, layer_norm, resize, softmax_lastdim,
                     upsample_nearest2x)

FFDN_MODES = ("sum", "ln_only", "in_only", "none")
ATTENTION_MODES = ("vertical", "horizontal", "none")


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ContractError("backbone needs exactly 4 stages")
        if self.blocks_per_stage < 1:
            raise ContractError("blocks_per_stage must be >= 1")


@dataclass
class AttentionConfig:
    channels: int
    reduced_channels: int = 0  # 0 means channels // 8, floor 1

    def __post_init__(self):
        if self.reduced_channels == 0:
            self.reduced_channels = max(1, self.channels // 8)
        if not 1 <= self.reduced_channels <= self.channels:
            raise ContractError("reduced channel count out of range")


@dataclass
class FeaturePyramid:
    """Features p1..p4 at strides 4/8/16/32, common channel width."""

    p1: Tensor
    p2: Tensor
    p3: Tensor
    p4: Tensor

    def __post_init__(self):
        prev = self.p1
        for cur in (self.p2, self.p3, self.p4):
            if cur.shape[1] != prev.shape[1]:
                raise ShapeError("pyramid levels must share channel width")
            if (prev.shape[2] != 2 * cur.shape[2]
                    or prev.shape[3] != 2 * cur.shape[3]):
                raise ShapeError(
                    f"pyramid spatial contract broken: {prev.shape} vs {cur.shape}")
            prev = cur

    @property
    def levels(self):
        return (self.p1, self.p2, self.p3, self.p4)


class Module:
    """Minimal parameter container; children discovered via attribute order."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, ConvParams, NormParams)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, ConvParams, NormParams)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        """Trainable tensors in deterministic traversal order."""
        for name, child in self._children():
            path = f"{prefix}{name}"
            if isinstance(child, ConvParams):
                yield f"{path}.weight", child.weight
                if child.bias is not None:
                    yield f"{path}.bias", child.bias
            elif isinstance(child, NormParams):
                yield f"{path}.gamma", child.gamma
                yield f"{path}.beta", child.beta
            else:
                yield from child.named_parameters(f"{path}.")

    def named_norms(self, prefix=""):
        """NormParams instances (for running-stat checkpointing)."""
        for name, child in self._children():
            path = f"{prefix}{name}"
            if isinstance(child, NormParams):
                yield path, child
            elif isinstance(child, Module):
                yield from child.named_norms(f"{path}.")

    def parameter_count(self):
        return sum(t.size for _, t in self.named_parameters())


def make_conv(rng, cin, cout, k, stride=1, padding=None, bias=True, init="kaiming"):
    if padding is None:
        padding = k // 2
    if init == "zero":
        w = np.zeros((cout, cin, k, k))
    elif init == "kaiming":
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k))
    else:
        raise ContractError(f"unknown init {init!r}")
    weight = Tensor(w, requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
    return ConvParams(weight, b, stride=stride, padding=padding)


def make_norm(channels, epsilon=1e-5):
    return NormParams(Tensor(np.ones(channels), requires_grad=True),
                      Tensor(np.zeros(channels), requires_grad=True),
                      epsilon=epsilon)


class ConvBlock(Module):
    """3x3 (or given k) convolution + batch norm + relu."""

    def __init__(self, rng, cin, cout, k=3, stride=1):
        self.conv = make_conv(rng, cin, cout, k, stride=stride, bias=False)
        self.bn = make_norm(cout)

    def __call__(self, x, training):
        return relu(batch_norm(conv2d(x, self.conv), self.bn, training))


class ResidualBlock(Module):
    """Two conv blocks with an additive skip and a trailing relu."""

    def __init__(self, rng, channels):
        self.conv1 = make_conv(rng, channels, channels, 3, bias=False)
        self.bn1 = make_norm(channels)
        self.conv2 = make_conv(rng, channels, channels, 3, bias=False)
        self.bn2 = make_norm(channels)

    def __call__(self, x, training):
        y = relu(batch_norm(conv2d(x, self.conv1), self.bn1, training))
        y = batch_norm(conv2d(y, self.conv2), self.bn2, training)
        return relu(add(y, x))


class Stage(Module):
    def __init__(self, rng, cin, cout, blocks):
        self.down = ConvBlock(rng, cin, cout, stride=2)
        self.blocks = [ResidualBlock(rng, cout) for _ in range(blocks)]

    def __call__(self, x, training):
        x = self.down(x, training)
        for block in self.blocks:
            x = block(x, training)
        return x


class Backbone(Module):
    """Four stages at strides 4/8/16/32 after a stride-2 stem."""

    def __init__(self, rng, cfg: BackboneConfig):
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem = ConvBlock(rng, 3, c[0], stride=2)
        self.stages = [
            Stage(rng, c[0], c[0], cfg.blocks_per_stage),
            Stage(rng, c[0], c[1], cfg.blocks_per_stage),
            Stage(rng, c[1], c[2], cfg.blocks_per_stage),
            Stage(rng, c[2], c[3], cfg.blocks_per_stage),
        ]

    def __call__(self, image, training):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected Nx3xHxW image, got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ShapeError(f"input spatial dims must be multiples of 32, "
                             f"got {image.shape[2]}x{image.shape[3]}")
        x = self.stem(image, training)
        feats = []
        for stage in self.stages:
            x = stage(x, training)
            feats.append(x)
        return feats


class StarFPN(Module):
    """Top-down pyramid neck: 1x1 laterals, nearest 2x merge, 3x3 refine."""

    def __init__(self, rng, stage_channels, width):
        self.width = width
        self.laterals = [make_conv(rng, c, width, 1) for c in stage_channels]
        self.refines = [ConvBlock(rng, width, width) for _ in range(4)]

    def __call__(self, feats, training):
        if len(feats) != 4:
            raise ShapeError("expected 4 stage features")
        for lo, hi in zip(feats, feats[1:]):
            if (lo.shape[2] != 2 * hi.shape[2]
                    or lo.shape[3] != 2 * hi.shape[3]):
                raise ShapeError("stage features must have doubling strides")
        lats = [conv2d(f, lat) for f, lat in zip(feats, self.laterals)]
        p4 = lats[3]
        p3 = add(lats[2], upsample_nearest2x(p4))
        p2 = add(lats[1], upsample_nearest2x(p3))
        p1 = add(lats[0], upsample_nearest2x(p2))
        p1, p2, p3, p4 = (ref(p, training)
                          for ref, p in zip(self.refines, (p1, p2, p3, p4)))
        return FeaturePyramid(p1, p2, p3, p4)


class FFDN(Module):
    """Fuse resized per-level projections through layer+instance norm branches."""

    def __init__(self, rng, width, mode="sum"):
        if mode not in FFDN_MODES:
            raise ContractError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.projections = [make_conv(rng, width, width, 1) for _ in range(4)]
        self.ln = make_norm(width)
        self.inorm = make_norm(width)

    def __call__(self, pyr, training):
        target = pyr.p1.shape[2:]
        fused = None
        for level, proj in zip(pyr.levels, self.projections):
            branch = resize(conv2d(level, proj), target, mode="bilinear")
            fused = branch if fused is None else add(fused, branch)
        if self.mode == "none":
            return fused
        if self.mode == "ln_only":
            return layer_norm(fused, self.ln)
        if self.mode == "in_only":
            return instance_norm(fused, self.inorm)
        return add(layer_norm(fused, self.ln), instance_norm(fused, self.inorm))


class DirectionalAttention(Module):
    """Self-attention over one spatial axis of the pooled feature.

    Vertical mode pools H x 1, attends across width with a WxW row-stochastic
    map, tiles the attended strip back and adds the input (skip connection).
    The V projection starts at zero so the block begins as the identity.
    """

    def __init__(self, rng, cfg: AttentionConfig, direction="vertical"):
        if direction not in ("vertical", "horizontal"):
            raise ContractError(f"unknown attention direction {direction!r}")
        self.cfg = cfg
        self.direction = direction
        c, ch = cfg.channels, cfg.reduced_channels
        # only V starts at zero: that alone makes the block the identity,
        # while zero Q and K together would be a stationary point (each
        # gradient is proportional to the other's weights)
        self.q = make_conv(rng, c, ch, 1)
        self.k = make_conv(rng, c, ch, 1)
        self.v = make_conv(rng, c, c, 1, init="zero")

    def _attend_width(self, x):
        """Core branch for NxCxHxW input: pooled over H, attention over W."""
        n, c, h, w = x.shape
        ch = self.cfg.reduced_channels
        pooled = avg_pool(x, (h, 1))                       # N x C x 1 x W
        q = reshape(conv2d(pooled, self.q), (n, ch, w))    # N x Ch x W
        k = reshape(conv2d(pooled, self.k), (n, ch, w))
        v = reshape(conv2d(pooled, self.v), (n, c, w))
        logits = matmul(transpose(q, (0, 2, 1)), k)        # N x W x W, [j,i]=Qj.Ki
        amap = softmax_lastdim(logits)
        attended = matmul(v, transpose(amap, (0, 2, 1)))   # N x C x W
        strip = reshape(attended, (n, c, 1, w))
        return resize(strip, (h, w), mode="row_tile"), amap

    def attention_map(self, x):
        """The row-stochastic affinity map for an input feature (no residual)."""
        if self.direction == "horizontal":
            x = transpose(x, (0, 1, 3, 2))
        return self._attend_width(x)[1]

    def __call__(self, x, training=None):
        if x.ndim != 4:
            raise ShapeError(f"attention expects 4-D input, got {x.shape}")
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"attention configured for {self.cfg.channels} "
                             f"channels, got {x.shape[1]}")
        if self.direction == "horizontal":
            xt = transpose(x, (0, 1, 3, 2))
            branch, _ = self._attend_width(xt)
            return add(transpose(branch, (0, 1, 3, 2)), x)
        branch, _ = self._attend_width(x)
        return add(branch, x)


class SegHead(Module):
    """3x3 conv block, 1x1 classifier, bilinear resize to the input size."""

    def __init__(self, rng, cin, n_classes):
        self.block = ConvBlock(rng, cin, cin)
        self.classifier = make_conv(rng, cin, n_classes, 1)

    def __call__(self, x, out_hw, training):
        logits = conv2d(self.block(x, training), self.classifier)
        return resize(logits, out_hw, mode="bilinear")


class ASAPNet(Module):
    """Full pipeline: backbone -> pyramid -> fusion -> attention -> heads."""

    def __init__(self, n_classes=5, backbone=None, fpn_width=32,
                 ffdn_mode="sum", attention="vertical", seed=0):
        if attention not in ATTENTION_MODES:
            raise ContractError(f"unknown attention mode {attention!r}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.ffdn_mode = ffdn_mode
        self.attention_mode = attention
        self.backbone = Backbone(rng, backbone or BackboneConfig())
        self.fpn = StarFPN(rng, self.backbone.cfg.stage_channels, fpn_width)
        self.ffdn = FFDN(rng, fpn_width, mode=ffdn_mode)
        if attention != "none":
            self.attention = DirectionalAttention(
                rng, AttentionConfig(fpn_width), direction=attention)
        self.head = SegHead(rng, fpn_width, n_classes)
        self.aux1 = SegHead(rng, fpn_width, n_classes)
        self.aux2 = SegHead(rng, fpn_width, n_classes)

    def pyramid(self, image, training):
        return self.fpn(self.backbone(image, training), training)

    def __call__(self, image, training=False):
        out_hw = (image.shape[2], image.shape[3])
        pyr = self.pyramid(image, training)
        fused = self.ffdn(pyr, training)
        if self.attention_mode != "none":
            fused = self.attention(fused)
        logits = self.head(fused, out_hw, training)
        if not training:
            return logits
        aux1 = self.aux1(pyr.p3, out_hw, training)
        aux2 = self.aux2(pyr.p4, out_hw, training)
        return logits, aux1, aux2


VARIANTS = {
    "full": dict(ffdn_mode="sum", attention="vertical"),
    "no_attention": dict(ffdn_mode="sum", attention="none"),
    "horizontal_attention": dict(ffdn_mode="sum", attention="horizontal"),
    "ln_only": dict(ffdn_mode="ln_only", attention="vertical"),
    "in_only": dict(ffdn_mode="in_only", attention="vertical"),
    "no_ffdn": dict(ffdn_mode="none", attention="vertical"),
}


def build_variant(variant, n_classes=5, seed=0, **kwargs):
    """Named ablation variants of the full model."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    return ASAPNet(n_classes=n_classes, seed=seed, **VARIANTS[variant], **kwargs)
