import itertools
import math

import numpy as np
import pytest

from sparsebound.arch import (
    ArchError,
    LayerSpec,
    binary_tree,
    build_dag,
    conv_arch,
    conv_l_h,
    degree,
    from_dict,
    load_arch,
    max_path_pred_product,
    reference_conv_model,
    parameter_count,
    random_dag,
    save_arch,
)


def brute_force_paths(g, weights=None):
    """Enumerate every output-to-input chain; returns the best score."""
    best = -math.inf

    def walk(l, j, prod):
        nonlocal best
        if l == 0:
            score = prod * (1.0 if weights is None else weights[j])
            best = max(best, score)
            return
        fan = g.window[l - 1] or len(g.pred[l - 1][j])
        for i in g.pred[l - 1][j]:
            walk(l - 1, i, prod * fan)

    walk(g.L, 0, 1.0)
    return best


def test_smallest_graph():
    g = build_dag([1, 1], [1, 1], [[[0]]])
    assert g.L == 1
    assert degree(g) == 1
    assert max_path_pred_product(g) == (1.0, [0, 0])


def test_binary_tree_shape_and_degree():
    g = build_dag([8, 4, 2, 1], [1, 1, 1, 1], [[[2 * j, 2 * j + 1] for j in range(d)] for d in (4, 2, 1)])
    assert g.widths == (8, 4, 2, 1)
    assert degree(g) == 2
    assert g == binary_tree(3, shared=False)


@pytest.mark.parametrize(
    "pred, msg",
    [
        ([[[5]]], "outside"),
        ([[[]]], "empty"),
        ([[[1, 0]]], "sorted"),
        ([[[0, 0]]], "sorted"),
    ],
)
def test_build_rejects_bad_pred(pred, msg):
    with pytest.raises(ArchError, match=msg):
        build_dag([4, 1], [1, 1], pred, allow_dead=True)


def test_shared_requires_equal_fan():
    with pytest.raises(ArchError, match="same \\|pred\\|"):
        build_dag([3, 2, 1], [1, 1, 1], [[[0], [1, 2]], [[0, 1]]], shared=True)


def test_output_width_must_be_one():
    with pytest.raises(ArchError, match="d_L = 1"):
        build_dag([2, 2], [1, 1], [[[0], [1]]])


def test_dead_neuron_validation_and_override():
    with pytest.raises(ArchError, match="feed nothing"):
        build_dag([3, 1], [1, 1], [[[0, 1]]])
    g = build_dag([3, 1], [1, 1], [[[0, 1]]], allow_dead=True)
    assert g.widths == (3, 1)


def test_conv_window_2x2_stride2():
    g = conv_arch((1, 4, 4), [LayerSpec("conv", 2, 2, 0, 3), LayerSpec("fc", out_channels=1)])
    assert g.widths[1] == 4
    assert [len(p) for p in g.pred[0]] == [4, 4, 4, 4]
    assert g.pred[0][0] == (0, 1, 4, 5)


def test_conv_two_stride2_layers_on_28():
    g, _ = conv_l_h(2, 8)
    assert g.widths[:3] == (784, 196, 49)


def window_oracle(rows, cols, k, s, pad):
    """Pixel windows of a k x k / stride s conv, enumerated directly."""
    out = []
    orows = (rows + 2 * pad - k) // s + 1
    ocols = (cols + 2 * pad - k) // s + 1
    for oi, oj in itertools.product(range(orows), range(ocols)):
        win = sorted(
            r * cols + c
            for r in range(oi * s - pad, oi * s - pad + k)
            for c in range(oj * s - pad, oj * s - pad + k)
            if 0 <= r < rows and 0 <= c < cols
        )
        out.append(tuple(win))
    return orows, ocols, out


def test_conv_3x3_stride2_on_32_matches_window_oracle():
    g = conv_arch(
        (3, 32, 32), [LayerSpec("conv", 3, 2, 0, 8), LayerSpec("fc", out_channels=1)], allow_dead=True
    )
    orows, ocols, wins = window_oracle(32, 32, 3, 2, 0)
    assert (orows, ocols) == (15, 15)
    assert g.widths[1] == 225
    assert list(g.pred[0]) == wins
    assert set(g.fan(1).tolist()) == {9}


def test_padded_windows_keep_kernel_area_as_fan():
    g = conv_arch((1, 5, 5), [LayerSpec("conv", 3, 1, 1, 2), LayerSpec("fc", out_channels=1)])
    _, _, wins = window_oracle(5, 5, 3, 1, 1)
    assert list(g.pred[0]) == wins
    assert len(g.pred[0][0]) == 4  # corner window: 4 real pixels
    assert g.fan(1)[0] == 9


def test_conv_errors():
    with pytest.raises(ArchError):
        conv_arch((1, 4, 4), [LayerSpec("conv", 2, 2, 0, 1)])  # no final fc
    with pytest.raises(ValueError):
        conv_arch((1, 2, 2), [LayerSpec("conv", 3, 1, 0, 1), LayerSpec("fc", out_channels=1)])
    with pytest.raises(ValueError):
        conv_arch((1, 4, 4), [LayerSpec("conv", 2, 8, 0, 1), LayerSpec("fc", out_channels=1)])


def test_non_overlapping_windows_are_disjoint():
    g = conv_arch((1, 8, 8), [LayerSpec("conv", 2, 2, 0, 1)] * 2 + [LayerSpec("fc", out_channels=1)])
    for layer in g.pred[:2]:
        flat = [i for p in layer for i in p]
        assert len(flat) == len(set(flat))


def test_degree_matches_scan_on_mixed_dag():
    g = build_dag([7, 3, 1], [1, 1, 1], [[[0, 1], [2, 3, 4], list(range(7))], [[0, 1, 2]]])
    assert degree(g) == 7
    scan = max(len(p) for layer in g.pred for p in layer)
    assert degree(g) == scan


def test_degree_of_3x3_stack():
    g, _ = conv_l_h(4, 4)  # two 2x2 layers then two 3x3 layers
    assert degree(g) == 49  # the final fc reads the 7x7 map
    g2 = conv_arch((1, 9, 9), [LayerSpec("conv", 3, 3, 0, 2)] * 2 + [LayerSpec("fc", out_channels=1)])
    assert max(int(g2.fan(l).max()) for l in (1, 2)) == 9


@pytest.mark.parametrize("L", [1, 2, 3, 4, 5])
def test_binary_tree_path_product(L):
    value, path = max_path_pred_product(binary_tree(L))
    assert value == 2**L
    assert path == [0] * (L + 1)


def test_uniform_conv_path_product_is_kernel_product():
    specs = [LayerSpec("conv", 2, 2, 0, 1), LayerSpec("conv", 3, 3, 0, 1), LayerSpec("fc", out_channels=1)]
    g = conv_arch((1, 12, 12), specs)
    assert max_path_pred_product(g)[0] == 4 * 9 * 4


def test_tie_break_prefers_smallest_index():
    g = build_dag([4, 2, 1], [1, 1, 1], [[[0, 1], [2, 3]], [[0, 1]]])
    _, path = max_path_pred_product(g, [1.0, 1.0, 1.0, 1.0])
    assert path == [0, 0, 0]
    _, path = max_path_pred_product(g, [1.0, 1.0, 1.0, 2.0])
    assert path == [0, 1, 3]


@pytest.mark.parametrize("seed", range(20))
def test_path_product_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    g = random_dag(rng, int(rng.integers(1, 6)), max_width=10, max_deg=3)
    assert max_path_pred_product(g)[0] == pytest.approx(brute_force_paths(g), rel=1e-12)
    w = rng.uniform(0, 5, size=g.widths[0])
    value, path = max_path_pred_product(g, w)
    assert value == pytest.approx(brute_force_paths(g, w), rel=1e-12)
    # the witness realizes the value
    prod = np.prod([g.fan(l)[path[g.L - l]] for l in range(1, g.L + 1)]) * w[path[-1]]
    assert prod == pytest.approx(value, rel=1e-12)


def test_parameter_count_fc():
    g = build_dag([1, 1], [4, 2], [[[0]]])
    assert parameter_count(g) == 8


def test_reference_models_parameter_counts():
    assert parameter_count(reference_conv_model(), weight_norm_layers=4) == 246886
    assert parameter_count(reference_conv_model(hidden_fc=True), weight_norm_layers=5) == 650343


def test_conv_l_h_count_matches_edge_enumeration():
    H = 5
    g, specs = conv_l_h(3, H)
    closed = 4 * 1 * H + 4 * H * H + 9 * H * H + 49 * H * 10
    # count distinct (slot, c_in, c_out) weights actually touched by an edge
    edges = 0
    for l in range(1, g.L + 1):
        slots = {s for row in g.slots[l - 1] for s in row}
        edges += len(slots) * g.channels[l - 1] * g.channels[l]
    assert parameter_count(g) == closed == edges


def test_conv_l_h_counting_conventions():
    g_conv, _ = conv_l_h(4, 3, counting="conv")
    g_total, _ = conv_l_h(4, 3, counting="total")
    assert g_conv.L == 5 and g_total.L == 4
    with pytest.raises(ValueError):
        conv_l_h(4, 3, counting="layers")


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    for g in (binary_tree(3), reference_conv_model(), random_dag(rng, 4)):
        p = tmp_path / "g.json"
        save_arch(g, p)
        assert load_arch(p) == g
        assert from_dict(g.to_dict()) == g


def test_conv_dict_form():
    d = {"input": [1, 4, 4], "conv": [LayerSpec("conv", 2, 2, 0, 2).to_dict(), LayerSpec("fc", out_channels=1).to_dict()]}
    assert from_dict(d).widths == (16, 4, 1)
