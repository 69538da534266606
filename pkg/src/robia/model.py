"""Compact stereo disparity network.

Three stride-2 encoder blocks produce features at 1/2, 1/4, 1/8 scale; an
upsampling module lifts the deepest features back to 1/4 and fuses them with
the skip connection; left/right fused features feed a cosine-correlation
cost volume that two aggregation convolutions and a small regression head
turn into per-pixel disparity via soft-argmax.  The deepest encoder block
and the upsampling module are the two excitation-layer host sites.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .types import DisparityMap, FeatureMap, StereoPair

PARTITION_MODES = ("student_peft", "teacher_adaptbn", "full_tune", "frozen")


@dataclass
class ModelConfig:
    encoder_blocks: int = 3
    base_channels: int = 16
    max_disparity: int = 32
    moe_block_index: int = 3
    seed: int = 0
    convs_per_block: int = 2
    softmax_temperature: float = 1.0

    def __post_init__(self):
        if self.encoder_blocks < 2:
            raise ValueError("need at least two encoder blocks for the skip fusion")
        if self.base_channels < 2:
            raise ValueError("base_channels must be >= 2")
        if not 1 <= self.moe_block_index <= self.encoder_blocks:
            raise ValueError(f"moe_block_index must lie in "
                             f"1..{self.encoder_blocks}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if self.softmax_temperature <= 0.0:
            raise ValueError("softmax_temperature must be positive")
        scale = self.scale_out
        if self.max_disparity < scale or self.max_disparity % scale:
            raise ValueError(f"max_disparity must be a positive multiple of "
                             f"the matching scale {scale}")

    @property
    def scale_out(self):
        """Downsampling factor of the matching features (second-deepest)."""
        return 2 ** (self.encoder_blocks - 1)

    @property
    def disp_bins(self):
        return self.max_disparity // self.scale_out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class EncoderBlock(nn.Module):
    """Stride-2 conv + (convs_per_block - 1) stride-1 convs, BN + leaky ReLU.

    When an excitation layer is attached, its gates are computed once from
    the block input and rescale every raw convolution output before
    normalization.
    """

    def __init__(self, cin, cout, convs, rng, dtype=np.float32):
        super().__init__()
        self.in_channels = cin
        self.out_channels = cout
        self.moe = None
        self.pairs = []
        for i in range(convs):
            conv = nn.Conv2d(cin if i == 0 else cout, cout, rng,
                             stride=2 if i == 0 else 1, dtype=dtype)
            bn = nn.BatchNorm2d(cout, dtype=dtype)
            self.add_child(f"conv{i + 1}", conv)
            self.add_child(f"bn{i + 1}", bn)
            self.pairs.append((conv, bn))

    def forward(self, x, image=None):
        g = self.moe.gates(x, image) if self.moe is not None else None
        h = x
        for conv, bn in self.pairs:
            h = conv.forward(h)
            if g is not None:
                h = self.moe.excite(h, g)
            h = ad.leaky_relu(bn.forward(h))
        return h


class UpModule(nn.Module):
    """Nearest-neighbor 2x upsampling, channel reduction, skip fusion."""

    def __init__(self, c_deep, c_skip, rng, dtype=np.float32):
        super().__init__()
        self.in_channels = c_deep
        self.out_channels = c_skip
        self.moe = None
        self.reduce = self.add_child("reduce", nn.Conv2d(c_deep, c_skip, rng,
                                                         dtype=dtype))
        self.bn1 = self.add_child("bn1", nn.BatchNorm2d(c_skip, dtype=dtype))
        self.fuse = self.add_child("fuse", nn.Conv2d(c_skip, c_skip, rng,
                                                     dtype=dtype))
        self.bn2 = self.add_child("bn2", nn.BatchNorm2d(c_skip, dtype=dtype))

    def forward(self, deep, skip, image=None):
        g = self.moe.gates(deep, image) if self.moe is not None else None
        h = self.reduce.forward(ad.upsample_nearest2(deep))
        if g is not None:
            h = self.moe.excite(h, g)
        h = ad.leaky_relu(self.bn1.forward(h))
        h = self.fuse.forward(ad.add(h, skip))
        if g is not None:
            h = self.moe.excite(h, g)
        return ad.leaky_relu(self.bn2.forward(h))


def _normalize_channels(f):
    sq = ad.sum_(ad.mul(f, f), axis=0, keepdims=True)
    return ad.div(f, ad.sqrt(ad.add(sq, 1e-12)))


def _correlation_volume(f_left, f_right, bins):
    """Cosine correlation across horizontal shifts; OOB filled with -1."""
    nl = _normalize_channels(f_left)
    nr = _normalize_channels(f_right)
    _, h, w = nl.shape
    dtype = nl.dtype
    rows = []
    for d in range(bins):
        if d >= w:
            rows.append(ad.Tensor(np.full((1, h, w), -1.0, dtype=dtype)))
            continue
        a = nl if d == 0 else nl[:, :, d:]
        b = nr if d == 0 else nr[:, :, :w - d]
        corr = ad.sum_(ad.mul(a, b), axis=0, keepdims=True)
        if d:
            fill = ad.Tensor(np.full((1, h, d), -1.0, dtype=dtype))
            corr = ad.concat([fill, corr], axis=2)
        rows.append(corr)
    return ad.concat(rows, axis=0)


def _soft_argmax(logits, temperature):
    bins = logits.shape[0]
    scaled = logits if temperature == 1.0 else ad.mul(logits, 1.0 / temperature)
    probs = ad.softmax(scaled, axis=0)
    dvals = ad.Tensor(np.arange(bins, dtype=logits.dtype).reshape(bins, 1, 1))
    return ad.sum_(ad.mul(probs, dvals), axis=0)


class StereoNet(nn.Module):
    """Siamese encoder + correlation volume + soft-argmax regression."""

    def __init__(self, config=None, dtype=np.float32):
        super().__init__()
        self.config = ModelConfig() if config is None else config
        self.dtype = dtype
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        chans = [cfg.base_channels * 2 ** k for k in range(cfg.encoder_blocks)]
        self.blocks = []
        cin = 3
        for i, cout in enumerate(chans):
            block = EncoderBlock(cin, cout, cfg.convs_per_block, rng, dtype)
            self.blocks.append(self.add_child(f"enc{i + 1}", block))
            cin = cout
        self.up = self.add_child("up", UpModule(chans[-1], chans[-2], rng, dtype))
        c_match = chans[-2]
        bins = cfg.disp_bins
        self.agg1 = self.add_child("agg1", nn.Conv2d(bins + c_match, c_match,
                                                     rng, dtype=dtype))
        self.bn_a1 = self.add_child("bn_a1", nn.BatchNorm2d(c_match, dtype=dtype))
        self.agg2 = self.add_child("agg2", nn.Conv2d(c_match, c_match, rng,
                                                     dtype=dtype))
        self.bn_a2 = self.add_child("bn_a2", nn.BatchNorm2d(c_match, dtype=dtype))
        self.head = self.add_child("head", nn.Conv2d(c_match, bins, rng,
                                                     dtype=dtype))

    @property
    def moe_inserted(self):
        return any(host.moe is not None for host in (*self.blocks, self.up))

    def _to_tensor(self, image):
        chw = np.ascontiguousarray(image.transpose(2, 0, 1), dtype=self.dtype)
        return ad.Tensor(chw)

    def _check_shape(self, pair):
        h, w = pair.shape
        div = 2 ** self.config.encoder_blocks
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} must be divisible by {div}")

    def _encode_t(self, image_t):
        feats = []
        h = image_t
        for block in self.blocks:
            h = block.forward(h, image=image_t)
            feats.append(h)
        return feats

    def _match_features(self, image_t):
        feats = self._encode_t(image_t)
        return self.up.forward(feats[-1], feats[-2], image=image_t)

    def forward_tensor(self, pair):
        """Differentiable forward pass; returns an (H, W) disparity tensor."""
        self._check_shape(pair)
        lt = self._to_tensor(pair.left)
        rt = self._to_tensor(pair.right)
        ml = self._match_features(lt)
        mr = self._match_features(rt)
        vol = _correlation_volume(ml, mr, self.config.disp_bins)
        h = ad.concat([vol, ml], axis=0)
        h = ad.leaky_relu(self.bn_a1.forward(self.agg1.forward(h)))
        h = ad.leaky_relu(self.bn_a2.forward(self.agg2.forward(h)))
        logits = self.head.forward(h)
        disp = _soft_argmax(logits, self.config.softmax_temperature)
        disp = ad.resize_bilinear(disp, pair.shape)
        return ad.mul(disp, float(self.config.scale_out))

    def forward(self, pair):
        with ad.no_grad():
            t = self.forward_tensor(pair)
        return DisparityMap(t.data.copy())

    def encode(self, pair):
        """Per-view encoder features as channels-last maps, shallow to deep."""
        self._check_shape(pair)
        with ad.no_grad():
            out = []
            for image in (pair.left, pair.right):
                feats = self._encode_t(self._to_tensor(image))
                out.append([FeatureMap(np.ascontiguousarray(
                    f.data.transpose(1, 2, 0)), scale=2 ** (k + 1))
                    for k, f in enumerate(feats)])
        return out[0], out[1]


def _feature_array(f):
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f)
    if data.ndim != 3:
        raise ValueError(f"expected (H, W, C) features, got shape {data.shape}")
    return data


def build_cost_volume(f_left, f_right, max_disp_at_scale):
    """Channels-last cosine-correlation volume (H, W, D); OOB entries -1."""
    fl = _feature_array(f_left)
    fr = _feature_array(f_right)
    if fl.shape != fr.shape:
        raise ValueError(f"feature shape mismatch: {fl.shape} vs {fr.shape}")
    if max_disp_at_scale < 1:
        raise ValueError("max_disp_at_scale must be >= 1")
    with ad.no_grad():
        vol = _correlation_volume(ad.Tensor(np.ascontiguousarray(fl.transpose(2, 0, 1))),
                                  ad.Tensor(np.ascontiguousarray(fr.transpose(2, 0, 1))),
                                  max_disp_at_scale)
    return np.ascontiguousarray(vol.data.transpose(1, 2, 0))


def regress_disparity(volume, temperature=1.0, scale=1, out_hw=None):
    """Soft-argmax over the last axis of an (H, W, D) volume."""
    vol = np.asarray(volume)
    if vol.ndim != 3 or vol.shape[2] < 1:
        raise ValueError(f"expected (H, W, D) volume, got shape {vol.shape}")
    if not np.isfinite(vol).all():
        raise ValueError("cost volume contains non-finite entries")
    with ad.no_grad():
        t = ad.Tensor(np.ascontiguousarray(vol.transpose(2, 0, 1)))
        disp = _soft_argmax(t, temperature)
        if scale != 1:
            disp = ad.mul(disp, float(scale))
        if out_hw is not None:
            disp = ad.resize_bilinear(disp, out_hw)
    return DisparityMap(disp.data.copy())


def parameter_partition(model, mode):
    """Named parameter subsets for each adaptation regime."""
    if mode not in PARTITION_MODES:
        raise ValueError(f"unknown partition mode {mode!r}; "
                         f"expected one of {PARTITION_MODES}")
    full = dict(model.named_parameters())
    if mode == "full_tune":
        return full
    if mode == "frozen":
        return {}
    if mode == "student_peft":
        return {n: p for n, p in full.items()
                if ".moe." in n or n.startswith("head.")}
    selected = {}
    for name, module in model.named_modules():
        if isinstance(module, nn.BatchNorm2d):
            selected[f"{name}.gamma"] = module.gamma
            selected[f"{name}.beta"] = module.beta
    return selected
