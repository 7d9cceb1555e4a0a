"""Stripped transformer contracts: embed/transform/deembed, stripping, causality."""

import pytest
import torch

from meshlm import LanguageModel, VertexConfig, causal_mask, strip
from meshlm.engine import EngineError, ShapeMismatchError, substream

from conftest import rand_tokens, tiny_vertex


def make_lm(vocab_size=11, d_model=8, seed=0, n_layers=1, max_seq=12, tie=False, dtype=torch.float32):
    cfg = tiny_vertex(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers, max_seq=max_seq, tie_embeddings=tie)
    return LanguageModel(cfg, seed=seed, dtype=dtype)


def orthonormal_tied_lm(vocab_size=8, d_model=16):
    lm = make_lm(vocab_size=vocab_size, d_model=d_model, tie=True)
    gen = torch.Generator()
    gen.manual_seed(5)
    square = torch.randn(d_model, d_model, generator=gen)
    q, _ = torch.linalg.qr(square)
    with torch.no_grad():
        lm.embedding.token_table.copy_(q[:vocab_size])
        lm.embedding.pos_table.zero_()
    return lm


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            VertexConfig(vocab_size=11, d_model=9, n_heads=2, n_layers=1, d_ff=16, max_seq=8)

    def test_vocab_floor(self):
        with pytest.raises(ValueError):
            VertexConfig(vocab_size=3, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq=8)


class TestEmbed:
    def test_rows_are_table_plus_positions(self):
        lm = make_lm(d_model=16)
        out = lm.embedding(torch.tensor([2, 5, 7]))
        assert out.shape == (1, 3, 16)
        table, pos = lm.embedding.token_table, lm.embedding.pos_table
        assert torch.equal(out[0, 0], table[2] + pos[0])
        assert torch.equal(out[0, 2], table[7] + pos[2])

    def test_too_long_rejected(self):
        lm = make_lm(max_seq=6)
        with pytest.raises(EngineError):
            lm.embedding(torch.zeros(7, dtype=torch.long))

    def test_empty_rejected(self):
        lm = make_lm()
        with pytest.raises(EngineError):
            lm.embedding(torch.zeros((1, 0), dtype=torch.long))

    def test_out_of_range_id_rejected(self):
        lm = make_lm(vocab_size=11)
        with pytest.raises(EngineError):
            lm.embedding(torch.tensor([0, 11]))

    def test_orthonormal_tied_roundtrip(self):
        lm = orthonormal_tied_lm()
        tokens = torch.arange(8)
        logits = lm.deembedding(lm.embedding(tokens))
        assert torch.equal(logits.argmax(dim=-1)[0], tokens)


class TestTransform:
    def test_shape_preserving(self):
        lm = make_lm(d_model=16)
        x = torch.randn(1, 5, 16)
        assert lm.transformer.transform(x).shape == (1, 5, 16)

    def test_zero_layers_is_identity(self):
        lm = make_lm(n_layers=0)
        x = torch.randn(2, 4, 8)
        assert torch.equal(lm.transformer.transform(x), x)

    def test_width_mismatch_rejected(self):
        lm = make_lm(d_model=8)
        with pytest.raises(ShapeMismatchError):
            lm.transformer.transform(torch.randn(1, 4, 16))

    def test_causal_prefix_bit_identical(self):
        lm = make_lm(n_layers=2)
        gen = torch.Generator()
        gen.manual_seed(3)
        x = torch.randn(1, 6, 8, generator=gen)
        perturbed = x.clone()
        perturbed[0, 4] += 1.0
        base = lm.transformer.transform(x)
        moved = lm.transformer.transform(perturbed)
        assert torch.equal(base[0, :4], moved[0, :4])
        assert not torch.equal(base[0, 4:], moved[0, 4:])

    def test_causality_property_random_lengths(self):
        lm = make_lm(n_layers=2, max_seq=10)
        gen = torch.Generator()
        gen.manual_seed(9)
        for trial in range(10):
            n = int(torch.randint(2, 10, (1,), generator=gen)) + 1
            pos = int(torch.randint(1, n, (1,), generator=gen))
            x = torch.randn(1, n, 8, generator=gen)
            bumped = x.clone()
            bumped[0, pos:] += 0.5
            assert torch.equal(
                lm.transformer.transform(x)[0, :pos],
                lm.transformer.transform(bumped)[0, :pos],
            )

    def test_no_dead_parameters_at_init(self):
        lm = make_lm(n_layers=2)
        tokens = rand_tokens(11, 2, 8, seed=21)
        loss = lm.forward_tokens(tokens).square().sum()
        loss.backward()
        for ref in lm.registry.refs(group=None):
            if ref.group.value != "vertex":
                continue
            assert ref.param.grad is not None, ref.name
            assert bool((ref.param.grad != 0).any()), f"dead parameter {ref.name}"


class TestDeembed:
    def test_zero_projection_gives_zero_logits(self):
        lm = make_lm()
        with torch.no_grad():
            lm.deembedding.projection.zero_()
        out = lm.deembedding(torch.randn(1, 4, 8))
        assert torch.equal(out, torch.zeros(1, 4, 11))

    def test_output_width_is_vocab(self):
        lm = make_lm(vocab_size=259, d_model=16, max_seq=16)
        assert lm.deembedding(torch.randn(1, 7, 16)).shape == (1, 7, 259)

    def test_width_mismatch_rejected(self):
        lm = make_lm(d_model=8)
        with pytest.raises(ShapeMismatchError):
            lm.deembedding(torch.randn(1, 4, 16))

    def test_softmax_peaks_at_token_for_tied_orthonormal(self):
        lm = orthonormal_tied_lm()
        for t in range(8):
            logits = lm.deembedding(lm.embedding(torch.tensor([t])))
            probs = torch.softmax(logits[0, 0], dim=-1)
            assert int(probs.argmax()) == t


class TestStrip:
    def test_recompose_bit_identical(self):
        lm = make_lm(n_layers=2, seed=4)
        emb, trunk, deemb = strip(lm)
        for trial in range(10):
            tokens = rand_tokens(11, 1, 7, seed=trial)
            direct = lm.forward_tokens(tokens)
            recomposed = deemb(trunk.transform(emb(tokens), causal_mask(7)))
            assert torch.equal(direct, recomposed)

    def test_parts_have_disjoint_parameter_names(self):
        lm = make_lm()
        names = [r.name for r in lm.registry.refs()]
        prefixes = {n.split(".")[0] for n in names}
        assert prefixes == {"embedding", "vertex", "deembedding"}
        assert len(names) == len(set(names))

    def test_chain_two_stripped_models(self):
        lm1 = make_lm(vocab_size=11, seed=1)
        lm2 = make_lm(vocab_size=9, seed=2)
        e1, t1, _ = strip(lm1)
        _, t2, d2 = strip(lm2)
        tokens = rand_tokens(11, 1, 6, seed=8)
        mask = causal_mask(6)
        logits = d2(t2.transform(t1.transform(e1(tokens), mask), mask))
        assert logits.shape == (1, 6, 9)
        # chained model stays causal
        bumped = tokens.clone()
        bumped[0, -1] = (bumped[0, -1] + 1) % 11
        moved = d2(t2.transform(t1.transform(e1(bumped), mask), mask))
        assert torch.equal(logits[0, :5], moved[0, :5])


def test_tied_deembedding_registers_no_extra_parameters():
    tied = make_lm(tie=True)
    untied = make_lm(tie=False)
    assert "deembedding.projection" not in tied.registry
    assert "deembedding.projection" in untied.registry
