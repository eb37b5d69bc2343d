"""Layer graph validation and the training/inference memory model."""
import pytest

from src.services.model_graph import (
    cut_activation_bytes,
    device_param_bytes,
    device_side_memory,
    graph_from_layers,
    inference_memory,
    load_model_graph,
    parameter_state_bytes,
    training_memory,
)
from tests.conftest import FIXTURES, PROFILES


def _three_layers(**kwargs):
    return graph_from_layers(
        [
            {"id": 1, "flops_forward": 10, "param_bytes": 100, "activation_bytes": 40},
            {"id": 2, "flops_forward": 20, "param_bytes": 50, "activation_bytes": 80},
            {"id": 3, "flops_forward": 30, "param_bytes": 10, "activation_bytes": 20, "grad_state_multiplier": 2.0},
        ],
        **kwargs,
    )


def test_inference_memory_keeps_one_activation():
    g = _three_layers()
    assert inference_memory(g, 1) == 160 + 80
    assert inference_memory(g, 4) == 160 + 4 * 80


def test_training_memory_keeps_all_activations_and_state():
    g = _three_layers()
    # state: 100*2 + 50*2 + 10*3
    assert training_memory(g, 1) == 330 + 140
    assert training_memory(g, 2) == 330 + 280


def test_training_exceeds_inference():
    g = _three_layers()
    for batch in (1, 8, 64):
        assert training_memory(g, batch) > inference_memory(g, batch)


def test_device_side_memory_prefix():
    g = _three_layers()
    assert device_side_memory(g, 1, 2) == 200 + 80
    assert device_side_memory(g, 3, 1) == training_memory(g, 1)
    assert parameter_state_bytes(g, 2) == 300
    assert device_param_bytes(g, 2) == 150
    assert cut_activation_bytes(g, 2, 3) == 240


def test_cut_and_batch_checks():
    g = _three_layers()
    with pytest.raises(ValueError, match="out of range"):
        device_side_memory(g, 0, 1)
    with pytest.raises(ValueError, match="out of range"):
        parameter_state_bytes(g, 4)
    with pytest.raises(ValueError, match="batch"):
        training_memory(g, 0)


def test_layer_ids_must_be_contiguous():
    with pytest.raises(ValueError, match="contiguous"):
        graph_from_layers([
            {"id": 1, "flops_forward": 1, "param_bytes": 0, "activation_bytes": 1},
            {"id": 3, "flops_forward": 1, "param_bytes": 0, "activation_bytes": 1},
        ])


def test_predecessor_must_be_earlier():
    layers = [{"id": i, "flops_forward": 1, "param_bytes": 0, "activation_bytes": 1} for i in (1, 2, 3)]
    with pytest.raises(ValueError, match="earlier layer"):
        graph_from_layers(layers, edges={2: [3]})
    with pytest.raises(ValueError, match="no predecessor"):
        graph_from_layers(layers, edges={3: []})


def test_skip_edges_feed_predecessor_reads():
    g = _three_layers(edges={3: [1, 2]})
    assert g.predecessors(3) == (1, 2)
    assert g.predecessors(2) == (1,)
    assert g.predecessor_activation_bytes.tolist() == [0.0, 40.0, 120.0]


def test_unknown_profile_key_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("layers:\n  - {id: 1, flops_forward: 1, param_bytes: 0, activation_bytes: 1, colour: red}\n")
    with pytest.raises(ValueError, match="invalid model profile"):
        load_model_graph(path)


def test_bundled_profiles_load():
    depths = {"lenet5": 9, "alexnet": 18, "vgg16": 36, "resnet18": 31}
    for name, depth in depths.items():
        g = load_model_graph(PROFILES / f"{name}.yaml")
        assert g.depth == depth
        assert g.name == name
        assert 1 <= g.reference_cut <= depth
    assert load_model_graph(FIXTURES / "four_layer.yaml").depth == 4


def test_resnet_residual_adds_have_two_inputs():
    g = load_model_graph(PROFILES / "resnet18.yaml")
    assert g.predecessors(5) == (2, 4)
    assert g.predecessors(11) == (8,)
    assert g.predecessors(10) == (9,)


def test_vgg16_training_dwarfs_inference_at_batch_32():
    g = load_model_graph(PROFILES / "vgg16.yaml")
    assert training_memory(g, 32) / inference_memory(g, 32) >= 5


def test_alexnet_ratio_grows_with_batch():
    g = load_model_graph(PROFILES / "alexnet.yaml")
    small = training_memory(g, 1) / inference_memory(g, 1)
    large = training_memory(g, 128) / inference_memory(g, 128)
    assert large > small


@pytest.mark.parametrize("name,floor", [("lenet5", 1 / 2.7), ("vgg16", 1 / 50)])
def test_some_cut_shrinks_device_memory(name, floor):
    g = load_model_graph(PROFILES / f"{name}.yaml")
    full = training_memory(g, 1)
    best = min(device_side_memory(g, j, 1) for j in range(1, g.depth + 1))
    assert best / full <= floor
