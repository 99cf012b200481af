import numpy as np
import pytest

from adlm.data import Dataset, one_hot
from adlm.lrp import (LRPSingularityError, average_relevance, input_relevance, normalize_relevance,
                      output_relevance, propagate_layer, read_pgm, read_relevance_csv, relevance_trace,
                      write_pgm, write_relevance_csv)
from adlm.network import Dense, Network, build_network


def _linear_net(weights):
    out = Dense(len(weights), 1, bias=False)
    out.params["W"] = np.array([weights], dtype=float)
    return Network([out], (len(weights),))


def test_output_relevance_single_neuron_passes_score():
    r = output_relevance(np.array([[2.0]]), np.array([1.5]), 3.0, mu=0.0)
    assert r[0, 0] == pytest.approx(3.0)


def test_output_relevance_symmetric_split():
    r = output_relevance(np.array([[1.0, 1.0]]), np.array([1.0, 1.0]), 1.0, mu=0.0)
    np.testing.assert_allclose(r, [[0.5, 0.5]])


def test_output_relevance_negative_branch():
    # z_o = -2, mu = 0.5: denominator is z_o - mu = -2.5
    r = output_relevance(np.array([[2.0]]), np.array([-1.0]), -2.0, mu=0.5)
    assert r[0, 0] == pytest.approx(-2.0 / -2.5 * -2.0)


def test_output_relevance_singular_raises():
    with pytest.raises(LRPSingularityError):
        output_relevance(np.array([[0.0]]), np.array([1.0]), 0.0, mu=0.0)
    assert output_relevance(np.array([[0.0]]), np.array([1.0]), 0.0, mu=1e-9)[0, 0] == 0.0


def test_propagate_layer_example():
    r = propagate_layer(np.array([1.0]), np.array([[3.0], [1.0]]), np.array([4.0]), mu=0.0)
    np.testing.assert_allclose(r, [0.75, 0.25])


def test_propagate_layer_zero_upper(rng):
    z = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(propagate_layer(np.zeros(3), z, z.sum(axis=0) + 1.0, 0.0), 0.0)


def test_propagate_layer_preserves_sum_without_bias(rng):
    z = rng.normal(size=(5, 3))
    r_up = rng.normal(size=3)
    assert propagate_layer(r_up, z, z.sum(axis=0), 0.0).sum() == pytest.approx(r_up.sum(), abs=1e-12)


def test_propagate_layer_bias_corrected(rng):
    z = rng.normal(size=(5, 3))
    b = rng.normal(size=3)
    zm = z.sum(axis=0) + b
    r_up = rng.normal(size=3)
    lower = propagate_layer(r_up, z, zm, 0.0).sum()
    assert lower == pytest.approx(np.sum(r_up * (1 - b / zm)), abs=1e-12)


def test_zero_input_bias_free_net_has_zero_relevance(rng):
    net = _linear_net([1.0, -2.0, 0.5])
    assert np.all(input_relevance(net, np.zeros((1, 3)), [0], mu=1e-9) == 0.0)


def test_linear_model_ordering():
    net = _linear_net([3.0, 1.0])
    r = relevance_trace(net, np.array([[0.5, 0.5]]), [0], mu=0.0).features
    assert r[0, 0] > r[0, 1]
    np.testing.assert_allclose(r, [[1.5, 0.5]])


def test_normalized_range(rng):
    r = normalize_relevance(rng.normal(size=(20, 9)))
    np.testing.assert_allclose(r.min(axis=1), -1.0)
    np.testing.assert_allclose(r.max(axis=1), 1.0)
    unit = normalize_relevance(rng.normal(size=(5, 4)), "unit")
    assert unit.min() == 0.0 and unit.max() == 1.0
    np.testing.assert_array_equal(normalize_relevance(np.full((2, 3), 0.4)), 0.0)
    with pytest.raises(ValueError):
        normalize_relevance(np.ones(3), "nope")


def _bias_free_relu_net(rng, hidden=(6, 5), d=4, m=3):
    tokens = []
    for h in hidden:
        tokens += [f"dense:{h}", "relu"]
    net = build_network(tokens, (d,), m, rng)
    for layer in net.layers:
        if isinstance(layer, Dense) and layer.use_bias:
            layer.params["b"][:] = 0.0
    return net


def test_conservation_bias_free(rng):
    net = _bias_free_relu_net(rng)
    x = rng.random((8, 4)) + 0.05
    rt = relevance_trace(net, x, rng.integers(0, 3, size=8), mu=0.0, strict=False)
    for s in rt.layer_sums():
        alive = np.abs(rt.score) > 1e-12
        np.testing.assert_allclose(s[alive], rt.score[alive], atol=1e-9)


def test_mu_cauchy_sequence(rng):
    net = _bias_free_relu_net(rng)
    x = rng.random((3, 4)) + 0.1
    cls = [0, 1, 2]
    ref = relevance_trace(net, x, cls, mu=0.0, strict=False).features
    diffs = [np.abs(relevance_trace(net, x, cls, mu=mu).features - ref).max() for mu in (1e-2, 1e-4, 1e-6)]
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-4


def test_average_relevance_properties(rng):
    net = build_network(["dense:5", "relu"], (3,), 2, rng)
    x = rng.random((4, 3))
    labels = one_hot([0, 1, 1, 0], 2)
    one = average_relevance(net, Dataset(x[:1], labels[:1]))
    np.testing.assert_allclose(one.values, input_relevance(net, x[:1], [0])[0])
    base = average_relevance(net, Dataset(x, labels), batch_size=1)
    dup = average_relevance(net, Dataset(np.vstack([x, x]), np.vstack([labels, labels])), batch_size=1)
    np.testing.assert_allclose(dup.values, base.values, atol=1e-15)
    assert np.all(np.abs(base.values) <= 1.0)


def test_opposite_relevances_average_to_zero():
    # feature 0 is the only positive contributor in one row and the only negative in the other
    net = _linear_net([1.0, 1.0, 0.0])
    x = np.array([[1.0, 0.5, 0.0], [-1.0, 0.5, 0.0]])
    ds = Dataset(x, one_hot([0, 0], 1))
    per = input_relevance(net, x, [0, 0])
    assert per[0, 0] == 1.0 and per[1, 0] == -1.0
    assert average_relevance(net, ds).values[0] == 0.0


def test_csv_and_pgm_roundtrip(tmp_path, rng):
    v = rng.uniform(-1, 1, size=12)
    write_relevance_csv(tmp_path / "r.csv", v)
    np.testing.assert_array_equal(read_relevance_csv(tmp_path / "r.csv"), v)
    write_pgm(tmp_path / "r.pgm", v, (3, 4))
    img = read_pgm(tmp_path / "r.pgm")
    assert img.shape == (3, 4) and img.min() == 0 and img.max() == 255
    assert img.ravel().argmax() == v.argmax()
