"""Online continual adaptation: warm-up, per-frame steps, sequence runs.

The per-frame protocol is strict predict-then-adapt: the current model
predicts, metrics are taken against ground truth BEFORE any update,
then the pseudo-labeler and teacher produce targets and the student
takes one gradient step.  Ground truth feeds metrics only; replacing it
with zeros must leave the parameter trajectory bit-identical.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, metrics, nn, reporting
from .config import RunConfig, emit_config
from .losses import LossConfig
from .model import StereoNet, parameter_partition
from .moe import MoEConfig, insert_moe
from .proxy import ProxyParams, proxy_label
from .synthetic import DomainSpec, synth_pair
from .teacher import (TeacherState, clone_model, ema_update, init_teacher,
                      teacher_predict, teacher_update)
from .types import DisparityMap


@dataclass
class MetricRecord:
    """Everything measured on one frame, before that frame's update."""

    frame_index: int
    domain: str
    round_index: int
    epe: float | None
    d1_all: float | None
    epe_valid: float | None
    d1_valid: float | None
    epe_invalid: float | None
    d1_invalid: float | None
    proxy_density: float
    loss_total: float | None
    loss_proxy: float | None
    loss_teacher: float | None
    wall_time_ms: float

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in reporting.RECORD_FIELDS}


# -- warm-up -------------------------------------------------------------------


def _supervised_epoch(model, optimizer, frames, beta=1.0):
    total = 0.0
    for pair, gt in frames:
        pred = model.forward_tensor(pair)
        loss = losses.loss_proxy(pred, gt.data, gt.valid, beta)
        model.zero_grad()
        loss.backward()
        optimizer.step()
        model.zero_grad()
        total += float(loss.data)
    return total / len(frames)


def warmup(model: StereoNet, source_stream, epochs=10, lr=5e-4, *,
           phase1_epochs=4, phase1_lr=1e-3, moe_cfg: MoEConfig | None = None,
           gate_sparsity=0.0):
    """Two-phase warm-up on clean source frames with dense ground truth.

    Phase 1 trains the plain backbone end to end (batch-norm in training
    mode).  Phase 2 freezes the backbone, snapshots it, inserts the
    excitation layer, and trains only the router/gate/regression-head
    set.  Returns ``(model, backbone)`` where ``backbone`` is the plain
    phase-1 snapshot (the teacher's source weights).

    ``epochs`` counts phase-2 passes; ``epochs = 0`` skips both phases
    and returns the model unchanged.  An optional L1 penalty on the gate
    vector (``gate_sparsity``) is off by default.
    """
    frames = list(source_stream)
    if not frames:
        raise ValueError("source stream is empty")
    if epochs == 0:
        return model, clone_model(model)

    if not model.moe_inserted:
        full = parameter_partition(model, "full_tune")
        nn.set_trainable(model, full)
        optimizer = nn.Adam(list(full.items()), phase1_lr)
        model.train()
        for _ in range(phase1_epochs):
            _supervised_epoch(model, optimizer, frames)
        model.eval()
        backbone = clone_model(model)
        insert_moe(model, moe_cfg or MoEConfig())
    else:
        # Already carries the excitation layer: treat as phase-2 resume.
        backbone = clone_model(model)

    student = parameter_partition(model, "student_peft")
    nn.set_trainable(model, student)
    optimizer = nn.Adam(list(student.items()), lr)
    model.eval()
    for _ in range(epochs):
        for pair, gt in frames:
            pred = model.forward_tensor(pair)
            loss = losses.loss_proxy(pred, gt.data, gt.valid)
            if gate_sparsity > 0:
                sites = [m.moe for _, m in model.named_modules()
                         if getattr(m, "moe", None) is not None]
                for site in sites:
                    if site.last_gates is not None:
                        penalty = ad.mean_(ad.abs_(site.last_gates))
                        loss = ad.add(loss, ad.mul(penalty, gate_sparsity))
            model.zero_grad()
            loss.backward()
            optimizer.step()
            model.zero_grad()
    return model, backbone


def warmup_stream(cfg: RunConfig, seed=None, frames=None):
    """Clean source frames with dense ground truth for warm-up."""
    seq = cfg.sequence
    spec = DomainSpec(name="source", kind="clean", severity=0.0,
                      frames=frames or cfg.optimizer.source_frames,
                      height=seq.height, width=seq.width)
    if seed is None:
        seed = cfg.seeds.warmup
    return [synth_pair(spec, i, seed) for i in range(spec.frames)]


def warmup_from_config(cfg: RunConfig):
    """Build a fresh model and run the full two-phase warm-up."""
    model = StereoNet(cfg.model)
    stream = warmup_stream(cfg)
    opt = cfg.optimizer
    return warmup(model, stream, epochs=opt.warmup_epochs, lr=opt.warmup_lr,
                  phase1_epochs=opt.phase1_epochs, phase1_lr=opt.phase1_lr,
                  moe_cfg=cfg.moe, gate_sparsity=opt.gate_sparsity)


# -- per-frame adaptation ------------------------------------------------------


@dataclass
class AdaptationState:
    """Mutable state carried across frames of one run."""

    student: StereoNet
    teacher: TeacherState | None
    optimizer: nn.Adam | None
    loss_cfg: LossConfig
    proxy_params: ProxyParams
    adapt_mode: str
    teacher_update_order: str = "after_student"
    ema_momentum: float = 0.999
    proxy_cache: dict | None = None


def init_adaptation(student: StereoNet, backbone: StereoNet | None,
                    cfg: RunConfig, *, proxy_cache=None) -> AdaptationState:
    """Arm a warmed-up student (and its teacher) for an online run.

    The student is used in place (callers clone first if they reuse the
    warm-up result).  ``backbone`` is the plain phase-1 snapshot; the
    adaptbn / source_frozen teachers start from it, the EMA teacher
    starts from the student itself.
    """
    mode = cfg.optimizer.adapt_mode
    student.eval()
    optimizer = None
    if mode == "frozen":
        nn.set_trainable(student, {})
        teacher = None
    else:
        trainable = parameter_partition(student, mode)
        nn.set_trainable(student, trainable)
        optimizer = nn.Adam(list(trainable.items()), cfg.optimizer.student_lr)
        uses_teacher = (cfg.loss.lambda_ > 0
                        and cfg.loss.photometric == "off")
        if uses_teacher:
            source = student if cfg.teacher.mode == "ema" else backbone
            if source is None:
                raise ValueError("teacher requires the backbone snapshot")
            teacher = init_teacher(source, cfg.teacher.mode, cfg.teacher.lr)
        else:
            teacher = None
    return AdaptationState(
        student=student, teacher=teacher, optimizer=optimizer,
        loss_cfg=cfg.loss, proxy_params=cfg.proxy, adapt_mode=mode,
        teacher_update_order=cfg.teacher.update_order,
        ema_momentum=cfg.teacher.ema_momentum, proxy_cache=proxy_cache)


def _cached_proxy(state: AdaptationState, pair):
    if state.proxy_cache is None:
        return proxy_label(pair, state.proxy_params)
    key = hashlib.blake2b(
        pair.left.tobytes() + pair.right.tobytes(), digest_size=16).hexdigest()
    hit = state.proxy_cache.get(key)
    if hit is None:
        hit = proxy_label(pair, state.proxy_params)
        state.proxy_cache[key] = hit
    return hit


def _teacher_step(state: AdaptationState, pair, d_proxy, masks):
    if state.teacher is None:
        return
    if state.teacher.mode == "adaptbn":
        teacher_update(state.teacher, pair, d_proxy, masks.valid)
    elif state.teacher.mode == "ema":
        ema_update(state.teacher, state.student, state.ema_momentum)
    # source_frozen never updates


def adapt_step(state: AdaptationState, pair, gt=None, *, frame_index=0,
               domain="", round_index=0) -> MetricRecord:
    """One online frame: predict, measure, pseudo-label, update.

    ``gt`` is consumed by metrics only.  With ``adapt_mode='frozen'``
    the model just evaluates.  A frame whose proxy mask is empty still
    adapts through the teacher term; with ``lambda = 0`` as well, the
    step provably has zero gradient and the student stays bit-identical.
    """
    t0 = time.perf_counter()
    cfg = state.loss_cfg
    adapting = state.adapt_mode != "frozen"

    if adapting:
        d_pred_t = state.student.forward_tensor(pair)
        pred = DisparityMap(np.asarray(d_pred_t.data, dtype=np.float32).copy())
    else:
        d_pred_t = None
        pred = state.student.forward(pair)

    d_proxy, masks, density = _cached_proxy(state, pair)

    if gt is not None:
        epe_all = metrics.epe(pred, gt)
        d1 = metrics.d1_all(pred, gt)
        (epe_v, d1_v), (epe_i, d1_i) = metrics.region_split_metrics(pred, gt, masks)
    else:
        epe_all = d1 = epe_v = d1_v = epe_i = d1_i = None

    loss_total = loss_p = loss_t = None
    if adapting:
        # "before_student" advances the teacher first, so the student's
        # target below comes from the already-updated teacher.
        if state.teacher_update_order == "before_student":
            _teacher_step(state, pair, d_proxy, masks)
        if cfg.photometric == "on":
            loss = losses.photometric_loss(pair, d_pred_t, cfg.alpha)
        elif cfg.lambda_ == 0 or state.teacher is None:
            loss = losses.loss_proxy(d_pred_t, d_proxy.data, masks.valid,
                                     cfg.smooth_l1_beta)
            loss_p = float(loss.data)
        else:
            d_teacher = teacher_predict(state.teacher, pair)
            lp = losses.loss_proxy(d_pred_t, d_proxy.data, masks.valid,
                                   cfg.smooth_l1_beta)
            lt = losses.loss_teacher(d_pred_t, d_teacher.data, masks.invalid,
                                     cfg.smooth_l1_beta)
            loss = ad.add(lp, ad.mul(lt, cfg.lambda_))
            loss_p, loss_t = float(lp.data), float(lt.data)
        loss_total = float(loss.data)

        state.student.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.student.zero_grad()
        if state.teacher_update_order == "after_student":
            _teacher_step(state, pair, d_proxy, masks)

    wall = (time.perf_counter() - t0) * 1000.0
    return MetricRecord(
        frame_index=frame_index, domain=domain, round_index=round_index,
        epe=epe_all, d1_all=d1, epe_valid=epe_v, d1_valid=d1_v,
        epe_invalid=epe_i, d1_invalid=d1_i, proxy_density=float(density),
        loss_total=loss_total, loss_proxy=loss_p, loss_teacher=loss_t,
        wall_time_ms=wall)


# -- full sequence runs --------------------------------------------------------


def _digest(arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in arrays:
        h.update(arr.tobytes())
    return h.hexdigest()


def trajectory_checksums(state: AdaptationState) -> dict:
    """Digests of the student/teacher parameter sets at this instant.

    ``student_frozen`` covers every student tensor outside the trainable
    set (buffers included); ``teacher_frozen`` covers every teacher
    tensor that is not a batch-norm affine.  ``*_all`` cover everything,
    which lets two runs be compared for bit-identical trajectories.
    """
    student = state.student
    trainable = {n for n, p in student.named_parameters() if p.requires_grad}
    names = sorted(n for n, _ in student.named_parameters())
    params = dict(student.named_parameters())
    buffers = sorted(student.named_buffers())
    out = {
        "student_frozen": _digest(
            [params[n].data for n in names if n not in trainable]
            + [b for _, b in buffers]),
        "student_all": _digest([params[n].data for n in names]
                               + [b for _, b in buffers]),
    }
    if state.teacher is not None:
        t = state.teacher.model
        t_names = sorted(n for n, _ in t.named_parameters())
        t_params = dict(t.named_parameters())
        t_train = set(state.teacher.trainable)
        t_buffers = sorted(t.named_buffers())
        out["teacher_frozen"] = _digest(
            [t_params[n].data for n in t_names if n not in t_train]
            + [b for _, b in t_buffers])
        out["teacher_all"] = _digest([t_params[n].data for n in t_names]
                                     + [b for _, b in t_buffers])
    return out


@dataclass
class SequenceResult:
    """Records, summaries, and provenance of one sequence run."""

    records: list[MetricRecord]
    summary: list[dict]
    config_text: str
    checksums: list[dict] = field(default_factory=list)

    def record_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


def run_sequence(cfg: RunConfig, seed=None, *, student=None, backbone=None,
                 zero_gt=False, proxy_cache=None, trace_checksums=False,
                 progress=None) -> SequenceResult:
    """Warm up (unless given a model) and adapt over rounds x domains.

    Frames within a domain restart at index 0 every round, so each round
    revisits the same rendered frames; different domains show the same
    geometry under different corruptions.  ``zero_gt`` replaces ground
    truth with zeros to prove the adaptation path never reads it.
    """
    if seed is None:
        seed = cfg.seeds.runs[0]
    if student is None:
        student, backbone = warmup_from_config(cfg)
    state = init_adaptation(student, backbone, cfg, proxy_cache=proxy_cache)

    records = []
    checksums = []
    frame_counter = 0
    specs = cfg.domain_specs()
    for round_index in range(cfg.sequence.rounds):
        for spec in specs:
            for local in range(spec.frames):
                pair, gt = synth_pair(spec, local, seed)
                if zero_gt:
                    gt = DisparityMap(np.zeros_like(gt.data),
                                      np.ones_like(gt.valid))
                rec = adapt_step(state, pair, gt, frame_index=frame_counter,
                                 domain=spec.name, round_index=round_index)
                records.append(rec)
                if trace_checksums:
                    checksums.append(trajectory_checksums(state))
                if progress is not None:
                    progress(rec)
                frame_counter += 1
    summary = reporting.summarize([r.to_dict() for r in records])
    return SequenceResult(records=records, summary=summary,
                          config_text=emit_config(cfg), checksums=checksums)
