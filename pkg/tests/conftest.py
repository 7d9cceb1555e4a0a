import pytest
import torch

torch.set_num_threads(1)

from meshlm import EdgeConfig, NetworkSpec, VertexConfig, build_network
from meshlm.data import Batch


def tiny_vertex(vocab_size=11, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq=12, **kw):
    return VertexConfig(
        vocab_size=vocab_size,
        d_model=d_model,
        n_heads=n_heads,
        n_layers=n_layers,
        d_ff=d_ff,
        max_seq=max_seq,
        **kw,
    )


def tiny_spec(widths=(1, 2, 1), seed=3, init_mode="standard", sharing="shared_vertex", vertex=None):
    vertex = vertex or tiny_vertex()
    edge = EdgeConfig(
        d_in=vertex.d_model,
        d_out=vertex.d_model,
        n_heads=vertex.n_heads,
        d_ff=vertex.d_ff,
        init_mode=init_mode,
    )
    return NetworkSpec(widths=tuple(widths), vertex=vertex, edge=edge, sharing=sharing, seed=seed)


def tiny_net(widths=(1, 2, 1), seed=3, dtype=torch.float32, **kw):
    return build_network(tiny_spec(widths=widths, seed=seed, **kw), dtype=dtype)


def rand_tokens(vocab_size, batch, length, seed):
    gen = torch.Generator()
    gen.manual_seed(seed)
    return torch.randint(0, vocab_size, (batch, length), generator=gen)


def full_batch(tokens):
    return Batch(tokens=tokens, mask=torch.ones_like(tokens, dtype=torch.bool), lengths=[tokens.shape[1]] * tokens.shape[0])


@pytest.fixture
def rng():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen
