import numpy as np
import pytest
import torch

from camogen.scene_graph import ObjectNode, RelationEdge, Vocabulary, build_graph


@pytest.fixture
def chameleon_graph():
    nodes = [ObjectNode(0, "chameleon", "green-scaled"), ObjectNode(1, "branch", "brown-rough")]
    return build_graph(nodes, [RelationEdge(0, "lies behind", 1)], "a chameleon lies behind a branch")


@pytest.fixture
def chameleon_vocab(chameleon_graph):
    v = Vocabulary()
    v.register_graph(chameleon_graph)
    return v


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def central_difference(f, tensor, index, h=1e-6):
    """d f / d tensor[index] by central differences; ``f`` returns a scalar tensor."""
    flat = tensor.data.view(-1)
    old = flat[index].item()
    flat[index] = old + h
    fp = f().item()
    flat[index] = old - h
    fm = f().item()
    flat[index] = old
    return (fp - fm) / (2 * h)
