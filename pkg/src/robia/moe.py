"""Attention-routed channel excitation for frozen convolution blocks.

A small router summarizes a block's input feature map into one vector per
channel, a learned gate squashes that vector into per-channel multipliers,
and the multipliers rescale the raw outputs of the block's frozen
convolutions.  Router and gate weights are the only trainable pieces, which
keeps online updates cheap and leaves the pretrained filters untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn

ROUTER_KINDS = ("row_attention", "column_attention", "full_attention",
                "gap", "shallow_embedding")
ACTIVATIONS = ("sigmoid", "relu")

# Gate bias at init: sigmoid(2) ~ 0.88 and relu(1) = 1 both start the layer
# close to an identity rescaling, so insertion barely perturbs the backbone.
DEFAULT_GATE_BIAS = {"sigmoid": 2.0, "relu": 1.0}


@dataclass
class MoEConfig:
    """Router/gate settings for one inserted excitation layer."""

    router_kind: str = "row_attention"
    activation: str = "sigmoid"
    attention_dim: int = None
    gate_bias: float = None
    seed: int = 7

    def __post_init__(self):
        if self.router_kind not in ROUTER_KINDS:
            raise ValueError(f"unknown router kind {self.router_kind!r}; "
                             f"expected one of {ROUTER_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"expected one of {ACTIVATIONS}")
        if self.attention_dim is not None and self.attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        if self.gate_bias is None:
            self.gate_bias = DEFAULT_GATE_BIAS[self.activation]


class Router(nn.Module):
    """Reduces a (C,H,W) feature map to a length-C gating input.

    Attention variants project each epipolar slice with W_q/W_k (C x d) and
    W_v (C x C), attend within the slice, then mean-pool; `gap` is a plain
    global average; `shallow_embedding` runs its own tiny strided conv stack
    on the raw input image instead of reading features at all.
    """

    def __init__(self, kind, channels, rng, attention_dim=None,
                 dtype=np.float32):
        super().__init__()
        self.kind = kind
        self.channels = channels
        self.dtype = dtype
        self.last_macs = {"projection": 0, "attention": 0, "total": 0}
        self.last_row_summaries = None
        if kind in ("row_attention", "column_attention", "full_attention"):
            d = max(channels // 2, 1) if attention_dim is None else attention_dim
            if d < 1:
                raise ValueError("attention_dim must be >= 1")
            self.dim = d
            scale = 1e-2
            self.W_q = self.register_param(
                "W_q", rng.uniform(-scale, scale, (channels, d)).astype(dtype))
            self.W_k = self.register_param(
                "W_k", rng.uniform(-scale, scale, (channels, d)).astype(dtype))
            self.W_v = self.register_param(
                "W_v", rng.uniform(-scale, scale, (channels, channels)).astype(dtype))
        elif kind == "shallow_embedding":
            self.dim = 0
            mid = max(channels // 2, 1)
            self.add_child("embed1", nn.Conv2d(3, mid, rng, stride=2, dtype=dtype))
            self.add_child("embed2", nn.Conv2d(mid, channels, rng, stride=2,
                                               dtype=dtype))
        else:
            self.dim = 0

    def _attend(self, slices):
        """slices: (S, L, C) tensor; attention runs independently per slice."""
        s, l, c = slices.shape
        d = self.dim
        q = ad.matmul(slices, self.W_q)
        k = ad.matmul(slices, self.W_k)
        v = ad.matmul(slices, self.W_v)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
        scores = ad.mul(scores, 1.0 / np.sqrt(float(d)))
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        summaries = ad.mean_(out, axis=1)
        self.last_macs = {
            "projection": s * l * c * (2 * d + c),
            "attention": s * l * l * (d + c),
        }
        self.last_macs["total"] = sum(self.last_macs.values())
        return summaries

    def gating_input(self, z, image=None):
        """z: block-input feature tensor (C,H,W) -> gating input (C,)."""
        kind = self.kind
        if kind == "gap":
            self.last_macs = {"projection": 0, "attention": 0, "total": 0}
            self.last_row_summaries = None
            return ad.mean_(z, axis=(1, 2))
        if kind == "shallow_embedding":
            if image is None:
                raise ValueError("shallow_embedding router needs the raw image")
            h = ad.leaky_relu(self._children["embed1"].forward(image))
            h = ad.leaky_relu(self._children["embed2"].forward(h))
            macs = 0
            x_hw = image.shape[1:]
            for conv in (self._children["embed1"], self._children["embed2"]):
                cout, cin, kh, kw = conv.weight.shape
                x_hw = tuple((n + 2 * conv.pad - kh) // conv.stride + 1 for n in x_hw)
                macs += cout * cin * kh * kw * x_hw[0] * x_hw[1]
            self.last_macs = {"projection": macs, "attention": 0, "total": macs}
            self.last_row_summaries = None
            return ad.mean_(h, axis=(1, 2))
        if kind == "row_attention":
            slices = ad.transpose(z, (1, 2, 0))      # (H, W, C): one slice per row
        elif kind == "column_attention":
            slices = ad.transpose(z, (2, 1, 0))      # (W, H, C): one slice per column
        else:                                        # full_attention
            c = z.shape[0]
            slices = ad.reshape(ad.transpose(z, (1, 2, 0)), (1, -1, c))
        summaries = self._attend(slices)
        self.last_row_summaries = summaries.data if kind == "row_attention" else None
        return ad.mean_(summaries, axis=0)


class Gate(nn.Module):
    """Maps the gating input to per-expert multipliers: act(W_g e + b)."""

    def __init__(self, in_dim, out_dim, activation, bias_init,
                 dtype=np.float32):
        super().__init__()
        self.activation = activation
        self.W_g = self.register_param("W_g", np.zeros((out_dim, in_dim),
                                                       dtype=dtype))
        self.bias = self.register_param("bias", np.full(out_dim, bias_init,
                                                        dtype=dtype))

    def forward(self, e):
        col = ad.reshape(e, (e.size, 1))
        logits = ad.add(ad.matmul(self.W_g, col),
                        ad.reshape(self.bias, (self.bias.size, 1)))
        g = ad.sigmoid(logits) if self.activation == "sigmoid" else ad.relu(logits)
        return ad.reshape(g, (g.size,))


class MoESite(nn.Module):
    """One inserted excitation layer: router + gate + override switch.

    `gates()` is computed once per forward pass from the host block's input
    and shared by every convolution inside the block.  Setting `override`
    bypasses the learned path with a constant multiplier (1.0 reproduces the
    frozen backbone bit-exactly).
    """

    def __init__(self, router_channels, expert_channels, cfg, rng,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.expert_channels = expert_channels
        self.override = None
        self.last_gates = None
        self.add_child("router", Router(cfg.router_kind, router_channels, rng,
                                        cfg.attention_dim, dtype))
        self.add_child("gate", Gate(router_channels, expert_channels,
                                    cfg.activation, cfg.gate_bias, dtype))
        self.dtype = dtype

    def gates(self, z, image=None):
        if self.override is not None:
            g = np.broadcast_to(np.asarray(self.override, dtype=self.dtype),
                                (self.expert_channels,))
            self.last_gates = ad.Tensor(np.ascontiguousarray(g))
            return self.last_gates
        e = self._children["router"].gating_input(z, image)
        self.last_gates = self._children["gate"].forward(e)
        return self.last_gates

    @staticmethod
    def excite(conv_out, g):
        """Scale channel i of the raw convolution output by g_i."""
        return ad.mul(conv_out, ad.reshape(g, (g.size, 1, 1)))


def moe_param_sizes(router_channels, expert_channels, cfg):
    """Parameter count one site adds; mirrors Router/Gate construction."""
    d = (max(router_channels // 2, 1) if cfg.attention_dim is None
         else cfg.attention_dim)
    if cfg.router_kind in ("row_attention", "column_attention", "full_attention"):
        router = 2 * router_channels * d + router_channels * router_channels
    elif cfg.router_kind == "shallow_embedding":
        mid = max(router_channels // 2, 1)
        router = (mid * 3 * 9 + mid) + (router_channels * mid * 9 + router_channels)
    else:
        router = 0
    gate = expert_channels * router_channels + expert_channels
    return router + gate


def insert_moe(model, cfg=None):
    """Wrap the configured encoder block (and, when it is the deepest one,
    the paired upsampling module) with excitation layers.

    Mutates `model` in place and returns it; inserting twice is an error and
    no pre-existing parameter is touched.
    """
    cfg = MoEConfig() if cfg is None else cfg
    idx = model.config.moe_block_index
    if not 1 <= idx <= len(model.blocks):
        raise ValueError(f"moe_block_index {idx} out of range "
                         f"1..{len(model.blocks)}")
    block = model.blocks[idx - 1]
    sites = [(block, block.in_channels, block.out_channels)]
    if idx == len(model.blocks):
        sites.append((model.up, model.up.in_channels, model.up.out_channels))
    if any(host.moe is not None for host, _, _ in sites):
        raise RuntimeError("model already has an excitation layer inserted")
    for site_index, (host, c_in, c_out) in enumerate(sites):
        rng = np.random.default_rng([cfg.seed, site_index])
        site = MoESite(c_in, c_out, cfg, rng, dtype=model.dtype)
        host.moe = host.add_child("moe", site)
    return model
