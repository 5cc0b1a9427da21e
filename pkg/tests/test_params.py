import numpy as np
import pytest

from quietsr import params as P
from quietsr.model import ModelConfig, init_params


@pytest.fixture(scope="module")
def micro():
    cfg = ModelConfig(num_layers=2, layers_per_block=2)
    return init_params(cfg, np.random.default_rng(0))


def test_flatten_unflatten_roundtrip(micro):
    flat = micro.flatten()
    again = micro.unflatten(flat).flatten()
    assert flat.tobytes() == again.tobytes()


def test_count_matches_layout(micro):
    assert micro.count() == sum(int(np.prod(s)) for _, s in micro.layout())
    assert micro.count() == micro.flatten().size


def test_unflatten_does_not_alias(micro):
    flat = micro.flatten()
    other = micro.unflatten(np.zeros_like(flat))
    assert not other.flatten().any()
    assert micro.flatten().tobytes() == flat.tobytes()


def test_unflatten_length_check(micro):
    with pytest.raises(ValueError):
        micro.unflatten(np.zeros(micro.count() + 1))


def test_index_to_name_walks_layout(micro):
    pos = 0
    for name, shape in micro.layout():
        got, where = P.index_to_name(micro, pos)
        assert got == name and all(int(i) == 0 for i in where)
        pos += int(np.prod(shape))
    with pytest.raises(IndexError):
        P.index_to_name(micro, pos)


def test_structural_fields_are_skipped(micro):
    names = [n for n, _ in micro.layout()]
    assert not any("_program" in n or n.endswith("num_heads") for n in names)
    assert "blocks.0.layers.0.attn.theta_q.theta" in names
