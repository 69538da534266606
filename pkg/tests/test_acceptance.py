"""Acceptance gate: one test per shipped guarantee.

Each test pins one end-to-end property of the pipeline: exact identity and
locality properties of the excitation layer, gradient correctness against
central differences, oracle equivalence for the SGM labeler and the metrics,
mask/loss partition exactness, frozen-parameter isolation, ground-truth
quarantine, and the directional trends of the standard synthetic benchmark
(adaptation beats no-adapt, the teacher term protects proxy-invalid regions,
sigmoid gating tracks the relu ablation within noise).  Every test enforces
its own wall-clock budget; the benchmark runs are shared through a module
fixture so the whole gate stays inside a laptop-CPU budget.
"""

from __future__ import annotations

from time import perf_counter

import numpy as np
import pytest

import robia.autodiff as ad
from robia import kernels
from robia.config import RunConfig, parse_config
from robia.harness import run_sequence, warmup_from_config
from robia.losses import LossConfig, loss_proxy, loss_teacher, total_loss
from robia.metrics import d1_all, epe
from robia.model import ModelConfig, StereoNet, parameter_partition
from robia.moe import MoEConfig, Router, insert_moe
from robia.proxy import ProxyParams, make_masks, proxy_label
from robia.synthetic import DomainSpec, synth_pair
from robia.teacher import clone_model, fuse_dense_label
from robia.types import ConfidenceMap, DisparityMap, MaskPair, StereoPair

from fdcheck import check_grad
from test_kernels import brute_force_prefix_table, unnormalize_sgm

SEEDS = (0, 1, 2)
FINAL_ROUND = RunConfig().sequence.rounds - 1
FRAMES_PER_RUN = (RunConfig().sequence.rounds
                  * len(RunConfig().sequence.domains)
                  * RunConfig().sequence.frames_per_domain)


def final_round_mean(result, field):
    vals = [getattr(r, field) for r in result.records
            if r.round_index == FINAL_ROUND and getattr(r, field) is not None]
    return float(np.mean(vals))


def seed_mean(runs, name, field):
    return float(np.mean([final_round_mean(runs[(name, s)], field)
                          for s in SEEDS]))


@pytest.fixture(scope="module")
def bench():
    """All standard-benchmark runs, shared by the trend and isolation tests.

    Groups are timed separately so each test can charge exactly the runs it
    depends on against its own budget.
    """
    elapsed = {}
    t = perf_counter()
    student, backbone = warmup_from_config(RunConfig())
    elapsed["warmup"] = perf_counter() - t
    t = perf_counter()
    relu_cfg = parse_config("moe: {activation: relu}\n")
    student_r, backbone_r = warmup_from_config(relu_cfg)
    elapsed["warmup_relu"] = perf_counter() - t

    variants = {
        "no_adapt": parse_config("optimizer: {adapt_mode: frozen}\n"),
        "adapt": RunConfig(),
        "proxy_only": parse_config("loss: {lambda: 0.0}\n"),
        "strong_teacher": parse_config("loss: {lambda: 0.3}\n"),
        "relu_gate": relu_cfg,
    }
    caches = {s: {} for s in SEEDS}
    runs = {}
    for group, names in [("core", ("no_adapt", "adapt")),
                         ("weights", ("proxy_only", "strong_teacher")),
                         ("activation", ("relu_gate",))]:
        t = perf_counter()
        for name in names:
            st, bb = ((student_r, backbone_r) if name == "relu_gate"
                      else (student, backbone))
            for seed in SEEDS:
                runs[(name, seed)] = run_sequence(
                    variants[name], seed=seed, student=clone_model(st),
                    backbone=bb, proxy_cache=caches[seed],
                    trace_checksums=(name == "adapt"))
        elapsed[group] = perf_counter() - t

    t = perf_counter()
    runs[("zero_gt", 0)] = run_sequence(
        RunConfig(), seed=0, student=clone_model(student), backbone=backbone,
        proxy_cache=caches[0], zero_gt=True, trace_checksums=True)
    elapsed["zero_gt"] = perf_counter() - t
    return {"runs": runs, "elapsed": elapsed}


def test_unit_gates_reproduce_frozen_backbone_bit_exactly():
    t0 = perf_counter()
    cfg = ModelConfig(encoder_blocks=3, base_channels=4, max_disparity=8,
                      convs_per_block=1, seed=3)
    net = StereoNet(cfg)
    net.eval()
    backbone = clone_model(net)
    insert_moe(net, MoEConfig(seed=5))
    net.blocks[-1].moe.override = 1.0
    net.up.moe.override = 1.0
    rng = np.random.default_rng(1001)
    for _ in range(100):
        pair = StereoPair(rng.random((16, 32, 3), dtype=np.float32),
                          rng.random((16, 32, 3), dtype=np.float32))
        np.testing.assert_array_equal(net.forward(pair).data,
                                      backbone.forward(pair).data)
    took = perf_counter() - t0
    print(f"unit-gate identity: 100 inputs bit-exact in {took:.1f}s")
    assert took < 10.0


def _fd_check_set(net, params, loss_t, tol=1e-4):
    """Finite-difference every element of a named parameter set."""
    items = list(params.items())
    tensors = [p for _, p in items]

    def fn(arrays):
        for p, a in zip(tensors, arrays):
            p.data = a
        with ad.no_grad():
            return float(loss_t().data)

    arrays = [p.data.copy() for p in tensors]
    for p, a in zip(tensors, arrays):
        p.data = a
    net.zero_grad()
    loss_t().backward()
    worst = 0.0
    for i, (name, p) in enumerate(items):
        assert p.grad is not None, name
        worst = max(worst, check_grad(fn, arrays, i, p.grad, h=1e-6, tol=tol))
    return worst


def test_autodiff_gradients_match_central_differences():
    t0 = perf_counter()
    cfg = ModelConfig(encoder_blocks=3, base_channels=3, max_disparity=8,
                      convs_per_block=1, seed=5)
    net = StereoNet(cfg, dtype=np.float64)
    insert_moe(net, MoEConfig(seed=2))
    net.eval()
    assert net.param_count() <= 5000
    rng = np.random.default_rng(6)
    # a zero gate weight would hide the router projections from the loss
    for host in (net.blocks[-1], net.up):
        wg = host.moe._children["gate"].W_g
        wg.data[...] = rng.normal(0.0, 0.2, wg.shape)

    pair = StereoPair(rng.random((16, 24, 3), dtype=np.float32),
                      rng.random((16, 24, 3), dtype=np.float32))
    proxy = rng.uniform(0, 8, (16, 24)).astype(np.float64)
    teach = rng.uniform(0, 8, (16, 24)).astype(np.float64)
    masks = MaskPair(rng.random((16, 24)) < 0.6)
    student = parameter_partition(net, "student_peft")
    checked = set(student)
    for piece in ("W_q", "W_k", "W_v", "W_g"):
        assert any(piece in n for n in checked), piece
    assert any(n.startswith("head.") for n in checked)

    def student_loss():
        return total_loss(net.forward_tensor(pair), proxy, teach, masks,
                          LossConfig(lambda_=0.1))

    err_s = _fd_check_set(net, student, student_loss)

    # the teacher trains its batch-norm affines on the proxy-valid loss
    teacher = StereoNet(ModelConfig(encoder_blocks=3, base_channels=3,
                                    max_disparity=8, convs_per_block=1,
                                    seed=9), dtype=np.float64)
    teacher.eval()
    affine = parameter_partition(teacher, "teacher_adaptbn")
    assert affine and all(n.endswith((".gamma", ".beta")) or
                          n.startswith(("bn", "gamma", "beta"))
                          for n in affine)

    def teacher_loss():
        return loss_proxy(teacher.forward_tensor(pair), proxy, masks.valid)

    err_t = _fd_check_set(teacher, affine, teacher_loss)
    took = perf_counter() - t0
    print(f"gradcheck: student worst rel err {err_s:.2e}, "
          f"teacher affine worst rel err {err_t:.2e}, {took:.1f}s")
    assert took < 60.0


def test_sgm_matches_exhaustive_path_enumeration():
    t0 = perf_counter()
    rng = np.random.default_rng(404)
    for _ in range(200):
        w = int(rng.integers(2, 7))
        ndisp = int(rng.integers(2, 5))
        strip = rng.integers(0, 21, size=(1, w, ndisp)).astype(np.int32)
        p1 = int(rng.integers(1, 8))
        p2 = int(rng.integers(p1, 30))
        agg = kernels.sgm_aggregate(strip, p1, p2, paths=["left"])
        np.testing.assert_array_equal(
            unnormalize_sgm(agg[0].astype(np.int64)),
            brute_force_prefix_table(strip[0], p1, p2))
    took = perf_counter() - t0
    print(f"sgm oracle: 200 strips exact in {took:.1f}s")
    assert took < 30.0


def test_masks_and_loss_supports_partition_every_pixel():
    t0 = perf_counter()
    rng = np.random.default_rng(505)
    spec = DomainSpec(name="rain", kind="rain", severity=0.8, frames=10,
                      height=24, width=48)
    for i in range(100):
        if i < 10:
            pair, _ = synth_pair(spec, i, seed=42)
            label, masks, _ = proxy_label(pair, ProxyParams())
            proxy_arr = label.data
        else:
            shape = (8, 8)
            conf = ConfidenceMap(rng.random(shape))
            masks = make_masks(conf, float(rng.uniform(0.1, 0.9)))
            proxy_arr = rng.uniform(0, 8, shape)
        shape = masks.valid.shape
        assert ((masks.valid.astype(np.int64)
                 + masks.invalid.astype(np.int64)) == 1).all()

        # each pixel's residual feeds exactly one loss term
        base = rng.uniform(0, 8, shape)
        pred_p = ad.Tensor.param(base.copy())
        loss_proxy(pred_p, base + 0.5, masks.valid).backward()
        support_p = pred_p.grad != 0
        pred_t = ad.Tensor.param(base.copy())
        loss_teacher(pred_t, base + 0.5, masks.invalid).backward()
        support_t = pred_t.grad != 0
        np.testing.assert_array_equal(support_p, masks.valid)
        np.testing.assert_array_equal(support_t, masks.invalid)
        assert not (support_p & support_t).any()
        assert (support_p | support_t).all()

        teacher_arr = rng.uniform(0, 8, shape)
        fused = fuse_dense_label(DisparityMap(proxy_arr, masks.valid),
                                 DisparityMap(teacher_arr), masks)
        assert fused.density == 1.0
        np.testing.assert_array_equal(fused.data[masks.valid],
                                      proxy_arr[masks.valid])
        np.testing.assert_array_equal(fused.data[masks.invalid],
                                      teacher_arr[masks.invalid])
    took = perf_counter() - t0
    print(f"mask/loss partition: 100 instances exact in {took:.1f}s")
    assert took < 10.0


def test_metrics_match_scalar_loop_oracles():
    t0 = perf_counter()

    def epe_loop(pred, gt, valid):
        total, n = 0.0, 0
        for r in range(gt.shape[0]):
            for c in range(gt.shape[1]):
                if valid[r, c]:
                    total += abs(float(pred[r, c]) - float(gt[r, c]))
                    n += 1
        return total / n if n else None

    def d1_loop(pred, gt, valid):
        bad, n = 0, 0
        for r in range(gt.shape[0]):
            for c in range(gt.shape[1]):
                if valid[r, c]:
                    err = abs(float(pred[r, c]) - float(gt[r, c]))
                    if err > 3.0 and err > 0.05 * float(gt[r, c]):
                        bad += 1
                    n += 1
        return bad / n if n else None

    rng = np.random.default_rng(606)
    for _ in range(100):
        gt_data = rng.uniform(0, 40, (8, 8))
        valid = rng.random((8, 8)) > 0.25
        pred = gt_data + rng.normal(0, 3, (8, 8))
        gt = DisparityMap(gt_data, valid)
        np.testing.assert_allclose(epe(pred, gt), epe_loop(pred, gt_data, valid),
                                   rtol=1e-12)
        assert d1_all(pred, gt) == d1_loop(pred, gt_data, valid)

    # the outlier test is a conjunction: >3 px AND >5% of gt
    near = DisparityMap(np.full((8, 8), 10.0))
    far = DisparityMap(np.full((8, 8), 100.0))
    assert d1_all(np.full((8, 8), 14.0), near) == 1.0
    assert epe(np.full((8, 8), 14.0), near) == 4.0
    assert d1_all(np.full((8, 8), 104.0), far) == 0.0
    took = perf_counter() - t0
    print(f"metric oracles: 100 instances + boundary cases in {took:.1f}s")
    assert took < 10.0


def test_attention_summaries_are_row_local():
    t0 = perf_counter()
    rng = np.random.default_rng(111)
    for _ in range(50):
        c = int(rng.integers(2, 9))
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 9))
        router = Router("row_attention", c,
                        np.random.default_rng(int(rng.integers(1 << 31))),
                        dtype=np.float64)
        z = rng.normal(size=(c, h, w))
        router.gating_input(ad.Tensor(z))
        before = router.last_row_summaries.copy()
        row = int(rng.integers(0, h))
        bumped = z.copy()
        bumped[:, row, :] += rng.normal(0.5, 0.2, (c, w))
        router.gating_input(ad.Tensor(bumped))
        after = router.last_row_summaries
        assert not np.array_equal(before[row], after[row])
        keep = [r for r in range(h) if r != row]
        np.testing.assert_array_equal(before[keep], after[keep])
    took = perf_counter() - t0
    print(f"row locality: 50 perturbations exact in {took:.1f}s")
    assert took < 10.0


def test_adaptation_beats_frozen_model_on_standard_sequence(bench):
    runs, elapsed = bench["runs"], bench["elapsed"]
    frozen = seed_mean(runs, "no_adapt", "epe")
    adapted = seed_mean(runs, "adapt", "epe")
    proxy_only = seed_mean(runs, "proxy_only", "epe")
    at_inv = seed_mean(runs, "adapt", "d1_invalid")
    px_inv = seed_mean(runs, "proxy_only", "d1_invalid")
    budget = elapsed["warmup"] + elapsed["core"]
    print(f"standard sequence: frozen EPE {frozen:.3f}, adapted {adapted:.3f} "
          f"({100 * (1 - adapted / frozen):+.1f}%), proxy-only {proxy_only:.3f} "
          f"({100 * (1 - proxy_only / frozen):+.1f}%); invalid-region D1 "
          f"{at_inv:.4f} (teacher) vs {px_inv:.4f} (proxy-only); {budget:.0f}s")
    assert adapted <= 0.9 * frozen
    assert proxy_only <= 0.9 * frozen
    assert at_inv <= px_inv
    assert budget < 600.0


def test_frozen_partitions_constant_across_full_run(bench):
    runs, elapsed = bench["runs"], bench["elapsed"]
    for seed in SEEDS:
        sums = runs[("adapt", seed)].checksums
        assert len(sums) == FRAMES_PER_RUN
        assert len({c["student_frozen"] for c in sums}) == 1
        assert len({c["teacher_frozen"] for c in sums}) == 1
        # sanity: the trainable sets did move
        assert len({c["student_all"] for c in sums}) > 1
        assert len({c["teacher_all"] for c in sums}) > 1
    budget = elapsed["warmup"] + elapsed["core"]
    print(f"partition isolation: frozen digests constant over "
          f"{FRAMES_PER_RUN} frames x {len(SEEDS)} seeds; {budget:.0f}s")
    assert budget < 600.0


def test_zeroed_ground_truth_leaves_trajectories_unchanged(bench):
    runs, elapsed = bench["runs"], bench["elapsed"]
    normal = runs[("adapt", 0)]
    zeroed = runs[("zero_gt", 0)]
    assert zeroed.checksums == normal.checksums
    assert ([r.epe for r in zeroed.records]
            != [r.epe for r in normal.records])
    print(f"gt quarantine: {FRAMES_PER_RUN} per-frame weight digests "
          f"bit-identical under zeroed gt; {elapsed['zero_gt']:.0f}s")
    assert elapsed["zero_gt"] < 600.0


def test_teacher_term_protects_invalid_regions(bench):
    runs, elapsed = bench["runs"], bench["elapsed"]
    wins = 0
    for seed in SEEDS:
        lam0 = final_round_mean(runs[("proxy_only", seed)], "d1_invalid")
        lam01 = final_round_mean(runs[("adapt", seed)], "d1_invalid")
        lam03 = final_round_mean(runs[("strong_teacher", seed)], "d1_invalid")
        assert np.isfinite(lam03)
        wins += lam0 >= lam01
    budget = elapsed["core"] + elapsed["weights"]
    print(f"teacher weight sweep: lambda=0 worse than lambda=0.1 on "
          f"{wins}/{len(SEEDS)} seeds; {budget:.0f}s")
    assert wins >= 2
    assert budget < 1800.0


def test_sigmoid_gating_stays_within_noise_of_relu(bench):
    runs, elapsed = bench["runs"], bench["elapsed"]
    sig = seed_mean(runs, "adapt", "d1_all")
    rel = seed_mean(runs, "relu_gate", "d1_all")
    budget = elapsed["core"] + elapsed["warmup_relu"] + elapsed["activation"]
    print(f"gate activation: sigmoid D1 {sig:.4f} vs relu {rel:.4f} "
          f"(gap {100 * (sig - rel):+.2f} pts, allowed +0.50); {budget:.0f}s")
    assert sig <= rel + 0.005
    assert budget < 1200.0
