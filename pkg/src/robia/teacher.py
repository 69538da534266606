"""Teachers that supervise low-confidence regions.

The main teacher is a copy of the source backbone whose only trainable
tensors are the batch-norm affine pairs, nudged once per frame by the masked
proxy loss; an EMA-of-student teacher and a frozen source snapshot serve as
ablation baselines.  All teachers answer `teacher_predict` with a fully
valid disparity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .losses import loss_proxy
from .model import StereoNet, parameter_partition
from .moe import insert_moe
from .types import DisparityMap, MaskPair

TEACHER_MODES = ("adaptbn", "ema", "source_frozen")
# Affine-only updates need a large step to track a domain within one round.
DEFAULT_TEACHER_LR = 3e-2


def clone_model(model):
    """Independent twin with identical weights, buffers, and layout."""
    twin = StereoNet(model.config, dtype=model.dtype)
    if model.moe_inserted:
        hosts = [b for b in (*model.blocks, model.up) if b.moe is not None]
        insert_moe(twin, hosts[0].moe.cfg)
    nn.copy_state(model, twin)
    twin.eval()
    return twin


@dataclass
class TeacherState:
    model: StereoNet
    mode: str
    lr: float
    optimizer: nn.Adam = None
    trainable: dict = field(default_factory=dict)


def init_teacher(source_model, mode, lr=DEFAULT_TEACHER_LR):
    """Deep-copy the source model and arm the mode's trainable set."""
    if mode not in TEACHER_MODES:
        raise ValueError(f"unknown teacher mode {mode!r}; "
                         f"expected one of {TEACHER_MODES}")
    model = clone_model(source_model)
    trainable = {}
    optimizer = None
    if mode == "adaptbn":
        trainable = parameter_partition(model, "teacher_adaptbn")
        optimizer = nn.Adam(list(trainable.items()), lr)
    nn.set_trainable(model, trainable)
    return TeacherState(model=model, mode=mode, lr=lr,
                        optimizer=optimizer, trainable=trainable)


def _mask_array(m_valid):
    return m_valid.valid if isinstance(m_valid, MaskPair) else np.asarray(m_valid)


def _disp_array(d):
    return d.data if isinstance(d, DisparityMap) else np.asarray(d)


def teacher_update(state, pair, d_proxy, m_valid, lr=None):
    """One masked-proxy-loss step on the batch-norm affine parameters."""
    if state.mode != "adaptbn":
        raise RuntimeError(f"teacher_update needs adaptbn mode, "
                           f"got {state.mode!r}")
    lr = state.lr if lr is None else lr
    if lr < 0.0:
        raise ValueError("lr must be non-negative")
    valid = _mask_array(m_valid)
    # skipping entirely keeps the optimizer state bit-identical too
    if lr == 0.0 or not valid.any():
        return state
    pred = state.model.forward_tensor(pair)
    loss = loss_proxy(pred, _disp_array(d_proxy), valid)
    state.model.zero_grad()
    loss.backward()
    state.optimizer.lr = lr
    state.optimizer.step()
    state.model.zero_grad()
    return state


def ema_update(state, student_model, momentum=0.999):
    """theta_teacher <- m * theta_teacher + (1 - m) * theta_student."""
    if state.mode != "ema":
        raise RuntimeError(f"ema_update needs ema mode, got {state.mode!r}")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if momentum == 1.0:
        return state
    teacher_params = list(state.model.named_parameters())
    student_params = list(student_model.named_parameters())
    if [n for n, _ in teacher_params] != [n for n, _ in student_params]:
        raise ValueError("teacher/student parameter trees do not match")
    for (_, p), (_, q) in zip(teacher_params, student_params):
        if momentum == 0.0:
            p.data[...] = q.data
        else:
            p.data *= momentum
            p.data += (1.0 - momentum) * q.data
    return state


def teacher_predict(state, pair):
    """Fully valid disparity from the teacher; never mutates the state."""
    return state.model.forward(pair)


def fuse_dense_label(d_proxy, d_teacher, masks):
    """Proxy values where confident, teacher values elsewhere; density 1."""
    proxy = _disp_array(d_proxy)
    teacher = _disp_array(d_teacher)
    if proxy.shape != teacher.shape or proxy.shape != masks.valid.shape:
        raise ValueError("label/mask shapes do not agree")
    return DisparityMap(np.where(masks.valid, proxy, teacher))
