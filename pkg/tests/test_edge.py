"""Edge module contracts: initialization modes, causal forward, attention."""

import pytest
import torch

from meshlm import EdgeConfig, edge_attention, edge_forward, init_edge
from meshlm.engine import ShapeMismatchError


def square_cfg(init_mode="standard", d=16, heads=2, d_ff=32):
    return EdgeConfig(d_in=d, d_out=d, n_heads=heads, d_ff=d_ff, init_mode=init_mode)


def seq(n, d, seed=0, batch=1):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return torch.randn(batch, n, d, generator=gen)


class TestInit:
    def test_identity_preserving_is_bit_exact_identity(self):
        edge = init_edge(square_cfg("identity_preserving"), seed=7)
        x = seq(5, 16, seed=1)
        assert torch.equal(edge_forward(edge, x), x)

    def test_identity_preserving_needs_square_widths(self):
        with pytest.raises(ValueError):
            EdgeConfig(d_in=8, d_out=16, n_heads=2, d_ff=32, init_mode="identity_preserving")

    def test_different_seeds_differ(self):
        a = init_edge(square_cfg(), seed=1)
        b = init_edge(square_cfg(), seed=2)
        diffs = [
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
            if pa.numel() and pa.abs().sum() > 0
        ]
        assert any(diffs)

    def test_same_seed_identical(self):
        a = init_edge(square_cfg(), seed=3)
        b = init_edge(square_cfg(), seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_standard_init_sigma(self):
        edge = init_edge(square_cfg(d=32, d_ff=64), seed=11)
        weights = torch.cat(
            [
                edge.block.attn.q_proj.weight.detach().flatten(),
                edge.block.attn.k_proj.weight.detach().flatten(),
            ]
        )[:1000]
        assert len(weights) == 1000
        assert 0.015 <= float(weights.std()) <= 0.025

    def test_rectangular_edge_has_input_projection(self):
        cfg = EdgeConfig(d_in=8, d_out=16, n_heads=2, d_ff=32)
        edge = init_edge(cfg, seed=0)
        assert edge.in_proj is not None and edge.in_proj.shape == (8, 16)
        out = edge_forward(edge, seq(5, 8))
        assert out.shape == (1, 5, 16)


class TestForward:
    def test_shape(self):
        edge = init_edge(square_cfg(), seed=4)
        assert edge_forward(edge, seq(5, 16)).shape == (1, 5, 16)

    def test_width_mismatch_rejected(self):
        edge = init_edge(square_cfg(d=16), seed=4)
        with pytest.raises(ShapeMismatchError):
            edge_forward(edge, seq(5, 8))

    def test_attention_rows_sum_to_one(self):
        edge = init_edge(square_cfg(), seed=5)
        attn = edge_attention(edge, seq(6, 16, seed=2))
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_perturbing_last_position_leaves_prefix_bit_identical(self):
        edge = init_edge(square_cfg(), seed=6)
        x = seq(6, 16, seed=3)
        bumped = x.clone()
        bumped[0, -1] += 1.0
        assert torch.equal(edge_forward(edge, x)[0, :5], edge_forward(edge, bumped)[0, :5])

    def test_causality_property_random_lengths(self):
        edge = init_edge(square_cfg(), seed=8)
        gen = torch.Generator()
        gen.manual_seed(10)
        for trial in range(10):
            n = int(torch.randint(2, 9, (1,), generator=gen))
            pos = int(torch.randint(1, n, (1,), generator=gen))
            x = torch.randn(1, n, 16, generator=gen)
            bumped = x.clone()
            bumped[0, pos:] -= 0.25
            assert torch.equal(edge_forward(edge, x)[0, :pos], edge_forward(edge, bumped)[0, :pos])


class TestAttention:
    def test_strictly_causal(self):
        edge = init_edge(square_cfg(), seed=9)
        attn = edge_attention(edge, seq(7, 16, seed=4))
        above = torch.triu(torch.ones(7, 7, dtype=torch.bool), diagonal=1)
        assert torch.equal(attn[0, :, above], torch.zeros_like(attn[0, :, above]))

    def test_length_one_weight_is_one(self):
        edge = init_edge(square_cfg(), seed=9)
        attn = edge_attention(edge, seq(1, 16, seed=5))
        assert attn.shape == (1, 2, 1, 1)
        assert torch.equal(attn, torch.ones_like(attn))


class TestTrainingInteraction:
    def test_identity_holds_until_first_step_touching_edge(self):
        edge = init_edge(square_cfg("identity_preserving"), seed=12)
        x = seq(4, 16, seed=6)
        assert torch.equal(edge_forward(edge, x), x)

        opt = torch.optim.AdamW(edge.parameters(), lr=1e-2)
        loss = edge_forward(edge, x).square().sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert not torch.equal(edge_forward(edge, x), x)

    def test_edge_gradients_nonzero_when_on_loss_path(self):
        edge = init_edge(square_cfg(), seed=13)
        x = seq(4, 16, seed=7)
        loss = edge_forward(edge, x).square().sum()
        loss.backward()
        grads = [p.grad for p in edge.parameters()]
        assert all(g is not None for g in grads)
        assert any(bool((g != 0).any()) for g in grads)
