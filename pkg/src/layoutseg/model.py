"""Encoder-decoder segmentation network.

Encoder: all-conv stem (stride 4), four residual stages (strides 1,2,2,1,
last stage dilation 2, output stride 16), each stage optionally split into
a frozen path + trainable path mixed by learned channel-wise select
weights. Neck: pyramid pooling. Decoder: two gated residual fusion blocks
consuming the 1/8 and 1/4 skips, then a 1x1 classifier and 4x upsample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class ModelConfig:
    num_classes: int = 4
    stage_channels: tuple = (64, 128, 256, 512)
    reduction_ratio: int = 16
    output_stride: int = 16
    spp_branch_dilations: tuple = (1, 2, 4)
    dsm_enabled: bool = False

    def __post_init__(self):
        if self.output_stride != 16:
            raise ValueError("output_stride is fixed at 16")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list 4 stages")

    @classmethod
    def tiny(cls, **kw):
        return cls(stage_channels=(8, 16, 32, 64), **kw)

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "stage_channels": list(self.stage_channels),
            "reduction_ratio": self.reduction_ratio,
            "output_stride": self.output_stride,
            "spp_branch_dilations": list(self.spp_branch_dilations),
            "dsm_enabled": self.dsm_enabled,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["spp_branch_dilations"] = tuple(d["spp_branch_dilations"])
        return cls(**d)


def bottleneck_width(c, r):
    return max(4, c // r)


class BlockBody(nn.Module):
    """conv3x3-BN-relu-conv3x3-BN; the residual add lives in the block."""

    def __init__(self, cin, cout, stride, dilation, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, rng, stride=stride,
                               padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(h))

    __call__ = forward


class Shortcut(nn.Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.projected = stride != 1 or cin != cout
        if self.projected:
            self.conv = nn.Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        if self.projected:
            return self.bn(self.conv(x))
        return x

    __call__ = forward


class ResBlock(nn.Module):
    """Single-path residual stage used during pretraining."""

    def __init__(self, cin, cout, stride, dilation, rng):
        super().__init__()
        self.body = BlockBody(cin, cout, stride, dilation, rng)
        self.shortcut = Shortcut(cin, cout, stride, rng)

    def forward(self, x):
        return ad.add(self.body(x), self.shortcut(x))

    __call__ = forward


class SelectorHead(nn.Module):
    """Channel-wise path-select weights from both path outputs.

    concat -> GAP -> 1x1 conv -> BN -> relu -> 1x1 conv -> reshape (C, 2)
    -> softmax over the pair axis. The final conv is zero-initialized so a
    freshly armed model starts at an even 0.5/0.5 split.
    """

    def __init__(self, c, r, rng):
        super().__init__()
        self.channels = c
        mid = bottleneck_width(2 * c, r)
        self.fc1 = nn.Conv2d(2 * c, mid, 1, rng, bias=False)
        self.bn = nn.BatchNorm2d(mid)
        self.fc2 = nn.Conv2d(mid, 2 * c, 1, rng, zero_init=True)
        # test hook: (C, 2) array added to the pre-softmax logits
        self.logit_offset = None

    def forward(self, f_t, f_f):
        if f_t.data.shape != f_f.data.shape:
            raise ValueError("selector inputs must have identical shapes")
        n = f_t.data.shape[0]
        c = self.channels
        z = ad.global_avg_pool(ad.concat(f_t, f_f, axis=1))
        z = ad.relu(self.bn(self.fc1(z)))
        s = ad.reshape(self.fc2(z), (n, c, 2))
        if self.logit_offset is not None:
            s = ad.add(s, Tensor(np.broadcast_to(self.logit_offset, (n, c, 2))))
        s = ad.softmax(s, axis=2)
        s_t = ad.reshape(ad.narrow(s, 2, 0, 1), (n, c, 1, 1))
        s_f = ad.reshape(ad.narrow(s, 2, 1, 1), (n, c, 1, 1))
        return s_t, s_f

    __call__ = forward


class DSBlock(nn.Module):
    """Residual stage split into a frozen and a trainable path.

    out = S_t * pt(x) + S_f * pf(x) + shortcut(x), with S per channel and
    S_t + S_f = 1. The shortcut is shared and frozen along with pf.
    """

    def __init__(self, cin, cout, stride, dilation, r, rng):
        super().__init__()
        self.pt = BlockBody(cin, cout, stride, dilation, rng)
        self.pf = BlockBody(cin, cout, stride, dilation, rng)
        self.shortcut = Shortcut(cin, cout, stride, rng)
        self.selector = SelectorHead(cout, r, rng)
        self.last_mean_select_t = None

    def forward(self, x):
        f_t = self.pt(x)
        f_f = self.pf(x)
        s_t, s_f = self.selector(f_t, f_f)
        self.last_mean_select_t = float(s_t.data.mean())
        mixed = ad.add(ad.mul_channelwise(f_t, s_t), ad.mul_channelwise(f_f, s_f))
        return ad.add(mixed, self.shortcut(x))

    __call__ = forward


class GuidanceHead(nn.Module):
    """GAP -> 1x1 conv (C -> C/r) -> BN -> relu -> 1x1 conv -> sigmoid."""

    def __init__(self, c, r, rng):
        super().__init__()
        mid = bottleneck_width(c, r)
        self.bottleneck = mid
        self.fc1 = nn.Conv2d(c, mid, 1, rng, bias=False)
        self.bn = nn.BatchNorm2d(mid)
        self.fc2 = nn.Conv2d(mid, c, 1, rng, zero_init=True)

    def forward(self, x):
        z = ad.relu(self.bn(self.fc1(ad.global_avg_pool(x))))
        return ad.sigmoid(self.fc2(z))

    __call__ = forward


class FusionBlock(nn.Module):
    """Gated residual fusion of a low-level skip with upsampled deep features.

    up = upsample2x(high); fusion = sepconv3x3(concat(low, up));
    out = up + guidance(up) * fusion.
    """

    def __init__(self, c_low, c_high, r, rng):
        super().__init__()
        self.c_high = c_high
        self.fuse = nn.SeparableConv2d(c_low + c_high, c_high, rng)
        self.guidance = GuidanceHead(c_high, r, rng)

    def forward(self, low, high):
        lh, lw = low.data.shape[2:]
        hh, hw = high.data.shape[2:]
        if lh != 2 * hh or lw != 2 * hw:
            raise ValueError(
                f"low spatial size {lh}x{lw} must be 2x high {hh}x{hw}")
        up = ad.bilinear_upsample(high, 2)
        fusion = self.fuse(ad.concat(low, up, axis=1))
        g = self.guidance(up)
        return ad.add(up, ad.mul_channelwise(fusion, g))

    __call__ = forward


class PyramidPooling(nn.Module):
    """Parallel 1x1 / dilated 3x3 branches plus image-level pooling."""

    def __init__(self, c, dilations, rng):
        super().__init__()
        branches = []
        for d in dilations:
            b = nn.Module()
            if d == 1:
                b.conv = nn.Conv2d(c, c, 1, rng, bias=False)
            else:
                b.conv = nn.Conv2d(c, c, 3, rng, padding=d, dilation=d,
                                   bias=False)
            b.bn = nn.BatchNorm2d(c)
            branches.append(b)
        self.branches = nn.ModuleList(branches)
        self.image_conv = nn.Conv2d(c, c, 1, rng)
        self.project = nn.Conv2d(c * (len(dilations) + 1), c, 1, rng, bias=False)
        self.project_bn = nn.BatchNorm2d(c)

    @property
    def branch_count(self):
        return len(self.branches) + 1

    def forward(self, x):
        h, w = x.data.shape[2:]
        out = None
        for b in self.branches:
            f = ad.relu(b.bn(b.conv(x)))
            out = f if out is None else ad.concat(out, f, axis=1)
        img = ad.relu(self.image_conv(ad.global_avg_pool(x)))
        out = ad.concat(out, ad.broadcast_spatial(img, h, w), axis=1)
        return ad.relu(self.project_bn(self.project(out)))

    __call__ = forward


class Stem(nn.Module):
    """All-conv stem, total stride 4."""

    def __init__(self, cout, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(3, cout, 7, rng, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, stride=2, padding=1,
                               bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        h = ad.relu(self.bn1(self.conv1(x)))
        return ad.relu(self.bn2(self.conv2(h)))

    __call__ = forward


STAGE_SPECS = [  # (stride, dilation), input from previous stage
    (1, 1),
    (2, 1),
    (2, 1),
    (1, 2),
]


class Encoder(nn.Module):
    def __init__(self, cfg, rng):
        super().__init__()
        chans = cfg.stage_channels
        cin = chans[0]
        for i, (stride, dilation) in enumerate(STAGE_SPECS):
            cout = chans[i]
            if cfg.dsm_enabled:
                block = DSBlock(cin, cout, stride, dilation,
                                cfg.reduction_ratio, rng)
            else:
                block = ResBlock(cin, cout, stride, dilation, rng)
            setattr(self, f"ds{i + 1}", block)
            cin = cout

    def stages(self):
        return [self.ds1, self.ds2, self.ds3, self.ds4]


class SegmentationNetwork(nn.Module):
    def __init__(self, config, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        chans = config.stage_channels
        self.stem = Stem(chans[0], rng)
        self.encoder = Encoder(config, rng)
        self.spp = PyramidPooling(chans[3], config.spp_branch_dilations, rng)
        self.drff1 = FusionBlock(chans[1], chans[3], config.reduction_ratio, rng)
        self.drff2 = FusionBlock(chans[0], chans[3], config.reduction_ratio, rng)
        self.classifier = nn.Conv2d(chans[3], config.num_classes, 1, rng)

    def forward_features(self, image):
        n, c, h, w = image.data.shape
        if c != 3:
            raise ValueError("input must have 3 channels")
        if h % 16 or w % 16:
            raise ValueError(f"input size {h}x{w} must be divisible by 16")
        x = self.stem(image)                 # 1/4
        f1 = self.encoder.ds1(x)             # 1/4
        f2 = self.encoder.ds2(f1)            # 1/8
        f3 = self.encoder.ds3(f2)            # 1/16
        f4 = self.encoder.ds4(f3)            # 1/16, dilated
        feat = self.spp(f4)
        d1 = self.drff1(f2, feat)            # 1/8
        d2 = self.drff2(f1, d1)              # 1/4
        logits = ad.bilinear_upsample(self.classifier(d2), 4)
        return {"encoder": feat, "logits": logits}

    def forward(self, image):
        return self.forward_features(image)["logits"]

    __call__ = forward

    def mean_select_t(self):
        """Per-stage mean trainable-path weight from the last forward."""
        out = {}
        for i, blk in enumerate(self.encoder.stages()):
            if isinstance(blk, DSBlock):
                out[f"ds{i + 1}"] = blk.last_mean_select_t
        return out


class CheckpointIncompatibleError(Exception):
    pass


def init_finetune(pretrained_net, seed=0):
    """Arm the dynamic-select mechanism from a single-path pretrained net.

    Each stage's body initializes BOTH the frozen and the trainable path;
    selectors start at an even split, so the armed network computes
    0.5*P + 0.5*P + x = P(x) + x and matches the pretrained output.
    """
    cfg = pretrained_net.config
    if cfg.dsm_enabled:
        raise CheckpointIncompatibleError(
            "pretrained network already has dsm_enabled=True")
    armed_cfg = ModelConfig.from_dict({**cfg.to_dict(), "dsm_enabled": True})
    armed = SegmentationNetwork(armed_cfg, seed=seed)

    src_params = dict(pretrained_net.named_parameters())
    src_bufs = dict(pretrained_net.named_buffers())

    def source_name(name):
        for i in range(1, 5):
            for path in ("pt", "pf"):
                pre = f"encoder.ds{i}.{path}."
                if name.startswith(pre):
                    return f"encoder.ds{i}.body." + name[len(pre):]
            sel = f"encoder.ds{i}.selector."
            if name.startswith(sel):
                return None  # freshly initialized
        return name

    for name, p in armed.named_parameters():
        src = source_name(name)
        if src is None:
            continue
        if src not in src_params:
            raise CheckpointIncompatibleError(f"missing parameter {src}")
        if src_params[src].data.shape != p.data.shape:
            raise CheckpointIncompatibleError(f"shape mismatch for {src}")
        p.data[...] = src_params[src].data
    for name, b in armed.named_buffers():
        src = source_name(name)
        if src is None:
            continue
        if src not in src_bufs:
            raise CheckpointIncompatibleError(f"missing buffer {src}")
        b[...] = src_bufs[src]

    for blk in armed.encoder.stages():
        blk.pf.freeze()
        blk.shortcut.freeze()
    return armed
