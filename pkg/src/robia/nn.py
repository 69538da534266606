"""Layers and optimizer built on the autodiff engine.

Modules form a named tree; ``named_parameters`` yields dotted names in a
deterministic registration order, which the optimizer, the checkpoint
format, and the frozen-set checksums all rely on.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Module:
    """Minimal parameter container with a named child tree."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def register_param(self, name, data):
        t = ad.Tensor.param(np.asarray(data), name=name)
        self._params[name] = t
        return t

    def register_buffer(self, name, data):
        arr = np.asarray(data)
        self._buffers[name] = arr
        return arr

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def named_modules(self, prefix=""):
        yield (prefix.rstrip("."), self)
        for cname, child in self._children.items():
            yield from child.named_modules(prefix + cname + ".")

    def train(self, flag=True):
        self.training = flag
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None


def copy_state(src, dst):
    """Copy all parameters and buffers from one module tree to a twin."""
    src_params = list(src.named_parameters())
    dst_params = list(dst.named_parameters())
    if [n for n, _ in src_params] != [n for n, _ in dst_params]:
        raise ValueError("module trees have different parameter names")
    for (_, p), (_, q) in zip(src_params, dst_params):
        q.data[...] = p.data
    src_bufs = dict(src.named_buffers())
    dst_bufs = dict(dst.named_buffers())
    if src_bufs.keys() != dst_bufs.keys():
        raise ValueError("module trees have different buffer names")
    for name, b in src_bufs.items():
        dst_bufs[name][...] = b


def set_trainable(module, names):
    """Mark exactly `names` as trainable; everything else stops taping grads."""
    wanted = set(names)
    seen = set()
    for name, t in module.named_parameters():
        t.requires_grad = name in wanted
        seen.add(name)
    missing = wanted - seen
    if missing:
        raise KeyError(f"unknown parameter names: {sorted(missing)}")


class Conv2d(Module):
    """3x3 (by default) convolution with He-normal init."""

    def __init__(self, cin, cout, rng, k=3, stride=1, pad=None, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        self.weight = self.register_param("weight", w)
        self.bias = self.register_param("bias", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    """Per-channel batchnorm over one (C,H,W) sample.

    Training mode normalizes with the sample's own spatial statistics and
    updates the running buffers; eval mode freezes the buffers, leaving only
    the affine (gamma, beta) degrees of freedom.
    """

    def __init__(self, c, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.register_param("gamma", np.ones(c, dtype=dtype))
        self.beta = self.register_param("beta", np.zeros(c, dtype=dtype))
        self.running_mean = self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.running_var = self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return ad.batchnorm2d(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Adam:
    """Adam over an explicit (name, tensor) list; state keyed by name."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in self.params}

    def step(self):
        """Apply one update; skipped entirely when lr == 0."""
        if self.lr == 0.0:
            return
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.state[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None
