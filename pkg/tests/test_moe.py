"""Router math, gating, insertion identity, and operation-count scaling."""

import numpy as np
import pytest

import robia.autodiff as ad
from robia import nn
from robia.model import ModelConfig, StereoNet, parameter_partition
from robia.moe import (MoEConfig, MoESite, Router, Gate, insert_moe,
                       moe_param_sizes)
from robia.types import StereoPair

from fdcheck import check_grad


def make_z(c=6, h=5, w=9, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return ad.Tensor(rng.normal(0.0, 1.0, (c, h, w)).astype(dtype))


def make_router(kind, c=6, seed=3, dtype=np.float32, dim=None):
    return Router(kind, c, np.random.default_rng(seed), dim, dtype)


def small_pair(seed, h=16, w=32):
    rng = np.random.default_rng(seed)
    return StereoPair(rng.random((h, w, 3), dtype=np.float32),
                      rng.random((h, w, 3), dtype=np.float32))


def small_model(**overrides):
    kw = dict(encoder_blocks=3, base_channels=4, max_disparity=8,
              convs_per_block=1, seed=11)
    kw.update(overrides)
    net = StereoNet(ModelConfig(**kw))
    net.eval()
    return net


class TestRouterMath:
    def test_uniform_attention_reduces_to_spatial_mean(self):
        # zero keys make the softmax uniform; identity values pass z through
        r = make_router("row_attention")
        r.W_k.data[...] = 0.0
        r.W_v.data[...] = np.eye(6, dtype=np.float32)
        z = make_z()
        e = r.gating_input(z)
        np.testing.assert_allclose(e.data, z.data.mean(axis=(1, 2)),
                                   rtol=0, atol=1e-6)

    def test_matches_gap_router_under_uniform_attention(self):
        r = make_router("row_attention")
        r.W_k.data[...] = 0.0
        r.W_v.data[...] = np.eye(6, dtype=np.float32)
        gap = make_router("gap")
        z = make_z(seed=4)
        np.testing.assert_allclose(r.gating_input(z).data,
                                   gap.gating_input(z).data,
                                   rtol=0, atol=1e-6)

    def test_single_row_equals_full_attention(self):
        row = make_router("row_attention", seed=5)
        full = make_router("full_attention", seed=99)
        for name in ("W_q", "W_k", "W_v"):
            full._params[name].data[...] = row._params[name].data
        z = make_z(h=1, seed=6)
        np.testing.assert_allclose(row.gating_input(z).data,
                                   full.gating_input(z).data,
                                   rtol=0, atol=1e-6)

    def test_single_row_summary_is_the_gating_input(self):
        r = make_router("row_attention", seed=7)
        z = make_z(h=1, seed=8)
        e = r.gating_input(z)
        assert r.last_row_summaries.shape == (1, 6)
        np.testing.assert_allclose(e.data, r.last_row_summaries[0],
                                   rtol=0, atol=1e-7)

    def test_row_permutation_invariance(self):
        r = make_router("row_attention", seed=9)
        z = make_z(seed=10)
        e1 = r.gating_input(z).data.copy()
        perm = np.random.default_rng(11).permutation(z.shape[1])
        zp = ad.Tensor(z.data[:, perm, :].copy())
        e2 = r.gating_input(zp).data
        np.testing.assert_allclose(e1, e2, rtol=0, atol=1e-6)

    def test_row_locality(self):
        # attention never crosses rows, so editing row 2 leaves the other
        # row summaries bit-identical
        r = make_router("row_attention", seed=12)
        z = make_z(seed=13)
        r.gating_input(z)
        before = r.last_row_summaries.copy()
        z.data[:, 2, :] += 0.5
        r.gating_input(z)
        after = r.last_row_summaries
        for row in range(z.shape[1]):
            if row == 2:
                assert not np.array_equal(before[row], after[row])
            else:
                np.testing.assert_array_equal(before[row], after[row])

    def test_column_router_is_row_router_on_transposed_map(self):
        col = make_router("column_attention", seed=14)
        row = make_router("row_attention", seed=77)
        for name in ("W_q", "W_k", "W_v"):
            row._params[name].data[...] = col._params[name].data
        z = make_z(seed=15)
        zt = ad.Tensor(np.ascontiguousarray(z.data.transpose(0, 2, 1)))
        np.testing.assert_allclose(col.gating_input(z).data,
                                   row.gating_input(zt).data,
                                   rtol=0, atol=1e-6)

    def test_gap_on_constant_map(self):
        r = make_router("gap")
        v = np.arange(6, dtype=np.float32) * 0.25
        z = ad.Tensor(np.broadcast_to(v[:, None, None], (6, 4, 7)).copy())
        np.testing.assert_allclose(r.gating_input(z).data, v, rtol=0, atol=1e-6)

    def test_shallow_embedding_ignores_features(self):
        r = make_router("shallow_embedding", c=8, seed=16)
        rng = np.random.default_rng(17)
        image = ad.Tensor(rng.random((3, 16, 24), dtype=np.float32))
        z1 = make_z(c=8, seed=18)
        z2 = make_z(c=8, seed=19)
        e1 = r.gating_input(z1, image).data
        e2 = r.gating_input(z2, image).data
        np.testing.assert_array_equal(e1, e2)
        other = ad.Tensor(rng.random((3, 16, 24), dtype=np.float32))
        assert not np.array_equal(e1, r.gating_input(z1, other).data)
        with pytest.raises(ValueError, match="raw image"):
            r.gating_input(z1, None)

    def test_zero_attention_dim_rejected(self):
        with pytest.raises(ValueError, match="attention_dim"):
            MoEConfig(attention_dim=0)
        with pytest.raises(ValueError, match="attention_dim"):
            make_router("row_attention", dim=0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="router kind"):
            MoEConfig(router_kind="mlp")


class TestGate:
    def _gate(self, activation, bias):
        return Gate(4, 5, activation, bias)

    def test_zero_logits_sigmoid_half(self):
        g = self._gate("sigmoid", 0.0)
        out = g.forward(ad.Tensor(np.ones(4, dtype=np.float32)))
        np.testing.assert_allclose(out.data, 0.5, rtol=0, atol=1e-7)

    def test_zero_logits_relu_zero(self):
        g = self._gate("relu", 0.0)
        out = g.forward(ad.Tensor(np.ones(4, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros(5, dtype=np.float32))

    def test_fresh_sigmoid_gate_near_identity(self):
        g = self._gate("sigmoid", 2.0)
        e = ad.Tensor(np.random.default_rng(0).normal(size=4).astype(np.float32))
        np.testing.assert_allclose(g.forward(e).data, 1.0 / (1.0 + np.exp(-2.0)),
                                   rtol=0, atol=1e-6)

    def test_fresh_relu_gate_exact_identity(self):
        g = self._gate("relu", 1.0)
        e = ad.Tensor(np.random.default_rng(1).normal(size=4).astype(np.float32))
        np.testing.assert_array_equal(g.forward(e).data,
                                      np.ones(5, dtype=np.float32))

    def test_sigmoid_range_and_monotonicity(self):
        rng = np.random.default_rng(2)
        g = self._gate("sigmoid", 0.5)
        g.W_g.data[...] = rng.normal(0, 1, (5, 4)).astype(np.float32)
        e = ad.Tensor(rng.normal(size=4).astype(np.float32))
        lo = g.forward(e).data
        assert np.all(lo > 0.0) and np.all(lo < 1.0)
        g.bias.data += 1.0
        hi = g.forward(e).data
        assert np.all(hi > lo)

    def test_relu_nonnegative(self):
        rng = np.random.default_rng(3)
        g = self._gate("relu", 0.0)
        g.W_g.data[...] = rng.normal(0, 2, (5, 4)).astype(np.float32)
        e = ad.Tensor(rng.normal(size=4).astype(np.float32))
        assert np.all(g.forward(e).data >= 0.0)

    def test_default_bias_per_activation(self):
        assert MoEConfig(activation="sigmoid").gate_bias == 2.0
        assert MoEConfig(activation="relu").gate_bias == 1.0


class TestExcite:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.x = ad.Tensor(rng.normal(0, 1, (5, 3, 4)).astype(np.float32))

    def test_all_ones_identity(self):
        g = ad.Tensor(np.ones(5, dtype=np.float32))
        np.testing.assert_array_equal(MoESite.excite(self.x, g).data, self.x.data)

    def test_all_zeros(self):
        g = ad.Tensor(np.zeros(5, dtype=np.float32))
        assert not MoESite.excite(self.x, g).data.any()

    def test_single_expert(self):
        g = np.zeros(5, dtype=np.float32)
        g[3] = 1.0
        out = MoESite.excite(self.x, ad.Tensor(g)).data
        np.testing.assert_array_equal(out[3], self.x.data[3])
        out[3] = 0.0
        assert not out.any()


class TestInsertion:
    def test_identity_excitation_bit_exact(self):
        net = small_model()
        pairs = [small_pair(s) for s in (0, 1)]
        before = [net.forward(p).data for p in pairs]
        insert_moe(net, MoEConfig())
        net.blocks[-1].moe.override = 1.0
        net.up.moe.override = 1.0
        for p, snap in zip(pairs, before):
            np.testing.assert_array_equal(net.forward(p).data, snap)

    def test_gated_forward_changes_output(self):
        net = small_model()
        pair = small_pair(2)
        snap = net.forward(pair).data
        insert_moe(net, MoEConfig())
        out = net.forward(pair).data
        assert not np.array_equal(out, snap)
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(net.forward(pair).data, out)

    def test_relu_variant_starts_at_exact_identity(self):
        # relu(0*e + 1) = 1, so the fresh relu gate is the identity even
        # without forcing an override
        net = small_model()
        pair = small_pair(3)
        snap = net.forward(pair).data
        insert_moe(net, MoEConfig(activation="relu"))
        np.testing.assert_array_equal(net.forward(pair).data, snap)

    def test_insertion_preserves_existing_params(self):
        net = small_model()
        before = {n: p.data.copy() for n, p in net.named_parameters()}
        insert_moe(net, MoEConfig())
        after = dict(net.named_parameters())
        for name, old in before.items():
            np.testing.assert_array_equal(after[name].data, old)
        assert all(".moe." in n for n in set(after) - set(before))

    def test_param_growth_arithmetic(self):
        net = small_model()
        base = net.param_count()
        insert_moe(net, MoEConfig())
        # enc3 site: C_in=8, C_out=16, d=4; up site: C_in=16, C_out=8, d=8
        enc_site = (8 * 4) * 2 + 8 * 8 + 16 * 8 + 16
        up_site = (16 * 8) * 2 + 16 * 16 + 8 * 16 + 8
        assert net.param_count() - base == enc_site + up_site
        cfg = MoEConfig()
        assert moe_param_sizes(8, 16, cfg) == enc_site
        assert moe_param_sizes(16, 8, cfg) == up_site

    def test_double_insert_rejected(self):
        net = insert_moe(small_model(), MoEConfig())
        with pytest.raises(RuntimeError, match="already"):
            insert_moe(net, MoEConfig())

    def test_out_of_range_block_index_rejected(self):
        with pytest.raises(ValueError, match="moe_block_index"):
            ModelConfig(encoder_blocks=3, moe_block_index=4)
        with pytest.raises(ValueError, match="moe_block_index"):
            ModelConfig(encoder_blocks=3, moe_block_index=0)

    def test_non_deepest_block_gets_single_site(self):
        net = small_model(moe_block_index=2)
        pair = small_pair(4)
        snap = net.forward(pair).data
        base = net.param_count()
        insert_moe(net, MoEConfig())
        assert net.blocks[1].moe is not None
        assert net.up.moe is None
        # enc2 site only: C_in=4, C_out=8, d=2
        assert net.param_count() - base == (4 * 2) * 2 + 4 * 4 + 8 * 4 + 8
        net.blocks[1].moe.override = 1.0
        np.testing.assert_array_equal(net.forward(pair).data, snap)


class TestGradients:
    def test_router_and_gate_grads_match_fd(self):
        rng = np.random.default_rng(20)
        site = MoESite(4, 6, MoEConfig(seed=1), np.random.default_rng(21),
                       dtype=np.float64)
        # the zero-initialized gate blocks gradient flow into the router,
        # so give it weight before differentiating
        site._children["gate"].W_g.data[...] = rng.normal(0, 0.3, (6, 4))
        z = ad.Tensor(rng.normal(0, 1, (4, 5, 7)))
        x = ad.Tensor(rng.normal(0, 1, (6, 3, 4)))
        router, gate = site._children["router"], site._children["gate"]
        params = [router.W_q, router.W_k, router.W_v, gate.W_g, gate.bias]

        def loss_t():
            y = MoESite.excite(x, site.gates(z))
            return ad.mean_(ad.mul(y, y))

        def fn(arrays):
            for p, a in zip(params, arrays):
                p.data = a
            with ad.no_grad():
                return float(loss_t().data)

        arrays = [p.data.copy() for p in params]
        for p, a in zip(params, arrays):
            p.data = a
        loss_t().backward()
        for i, p in enumerate(params):
            check_grad(fn, arrays, i, p.grad, h=1e-6, tol=1e-4)

    def test_frozen_experts_receive_no_gradient(self):
        net = insert_moe(small_model(), MoEConfig())
        student = parameter_partition(net, "student_peft")
        nn.set_trainable(net, student)
        d = net.forward_tensor(small_pair(5))
        ad.mean_(ad.mul(d, d)).backward()
        for name, p in net.named_parameters():
            if name in student:
                assert p.grad is not None, name
            else:
                assert p.grad is None, name


def attention_macs(kind, c, h, w, d):
    """Independent count of the attention-stage multiplies."""
    if kind == "row_attention":
        return h * w * w * (d + c)
    if kind == "column_attention":
        return w * h * h * (d + c)
    return (h * w) ** 2 * (d + c)


class TestOperationCounts:
    def run_router(self, kind, c, h, w):
        r = make_router(kind, c=c, seed=30)
        r.gating_input(make_z(c=c, h=h, w=w, seed=31))
        return r.last_macs

    def test_row_attention_counts_match_formula(self):
        c, d = 8, 4
        for h, w in ((4, 16), (8, 16), (4, 32)):
            macs = self.run_router("row_attention", c, h, w)
            assert macs["attention"] == attention_macs("row_attention", c, h, w, d)
            assert macs["projection"] == h * w * c * (2 * d + c)

    def test_row_attention_linear_in_height(self):
        a1 = self.run_router("row_attention", 8, 4, 16)["attention"]
        a2 = self.run_router("row_attention", 8, 8, 16)["attention"]
        assert a2 == 2 * a1

    def test_full_attention_quadratic_in_height(self):
        a1 = self.run_router("full_attention", 8, 4, 16)["attention"]
        a2 = self.run_router("full_attention", 8, 8, 16)["attention"]
        assert a2 == 4 * a1
        assert a1 == attention_macs("full_attention", 8, 4, 16, 4)

    def test_full_over_row_ratio_is_height(self):
        for h, w in ((4, 16), (8, 8), (16, 4)):
            row = self.run_router("row_attention", 8, h, w)["attention"]
            full = self.run_router("full_attention", 8, h, w)["attention"]
            assert full == h * row

    def test_column_attention_counts(self):
        macs = self.run_router("column_attention", 8, 4, 16)
        assert macs["attention"] == attention_macs("column_attention", 8, 4, 16, 4)

    def test_gap_costs_nothing(self):
        assert self.run_router("gap", 8, 4, 16)["total"] == 0
