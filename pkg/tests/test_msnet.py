import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import direct_conv, finite_difference_check, oracle_forward, random_biases
from trajreg.errors import ConfigError, EmptyLabelError, NetworkFormatError
from trajreg.msnet import (AdamState, Gradients, MsNet, PatchPair, SamplingMap, TrainConfig,
                           adam_step, block_starts, conv3d, forward, gradients, load_net,
                           loss_ssd, net_summary, sample_centers, sample_patch_pairs,
                           sampling_map, save_net, simplify_volume, train, training_patches)
from trajreg.volume import BrainMask, Volume3


def test_conv_matches_nested_loop(rng):
    x = rng.standard_normal((1, 4, 5, 3, 2))
    w = rng.standard_normal((3, 3, 3, 2, 3))
    b = rng.standard_normal(3)
    got = conv3d(x, w, b)[0]
    ref = direct_conv(x[0], w, b)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-12)


def test_forward_two_layer_oracle(rng):
    net = MsNet(hidden=(3,), skips=(), seed=5)
    random_biases(net, rng)
    x = rng.standard_normal((4, 4, 4))
    ref = oracle_forward(net, x)
    assert np.max(np.abs(forward(net, x) - ref)) <= 1e-5 * np.max(np.abs(ref))


def test_forward_with_skips_oracle(rng):
    net = MsNet(hidden=(2, 3, 2), skips=((1, 3), (0, 4)), seed=2)
    random_biases(net, rng)
    x = rng.standard_normal((4, 3, 5))
    np.testing.assert_allclose(forward(net, x), oracle_forward(net, x), rtol=1e-9, atol=1e-12)


def test_forward_zero_and_identity(rng):
    x = rng.standard_normal((5, 6, 7))
    zero = MsNet(hidden=(4, 4), skips=((0, 3),), init=False)
    assert np.all(forward(zero, x) == 0)
    np.testing.assert_allclose(forward(MsNet.identity(), x), x, atol=1e-12)
    ident = MsNet(hidden=(3, 3), skips=((0, 3),), output_init="identity")
    np.testing.assert_allclose(forward(ident, x), x, atol=1e-12)


@given(dims=st.tuples(*[st.integers(1, 6)] * 3))
def test_shape_preserved(dims):
    net = MsNet(hidden=(2, 2), skips=((0, 2),), seed=1)
    x = np.random.default_rng(0).standard_normal(dims)
    assert forward(net, x).shape == dims
    assert forward(net, x[None].repeat(2, 0)).shape == (2,) + dims


def test_default_architecture():
    net = MsNet(seed=0)
    assert net.n_layers == 9
    assert net.in_channels(6) == 64 + 32
    assert net.in_channels(5) == 64 + 64
    assert net.out_channels(9) == 1
    assert "relu" in net_summary(net) and "linear" in net_summary(net)


@pytest.mark.parametrize("skips", [((0, 1),), ((2, 3),), ((1, 5),), ((0, 2), (0, 2))])
def test_invalid_skips(skips):
    with pytest.raises(ConfigError):
        MsNet(hidden=(2, 2, 2), skips=skips)


def test_identity_init_needs_input_skip():
    with pytest.raises(ConfigError):
        MsNet(hidden=(2,), skips=(), output_init="identity")


def test_loss_ssd(rng):
    a = rng.standard_normal((16, 16, 16))
    assert loss_ssd(a, a) == 0.0
    assert loss_ssd(a + 2, a) == pytest.approx(16384.0, rel=1e-12)
    b = rng.standard_normal((3, 4, 5))
    c = rng.standard_normal((3, 4, 5))
    assert loss_ssd(b, c) == pytest.approx(sum((p - q) ** 2 for p, q in zip(b.flat, c.flat)), rel=1e-12)
    with pytest.raises(ValueError):
        loss_ssd(b, c[:-1])


def test_gradients_finite_difference(rng):
    net = MsNet(hidden=(2,), skips=(), seed=3)
    random_biases(net, rng)
    x = rng.standard_normal((2, 4, 4, 4))
    y = rng.standard_normal((2, 4, 4, 4))
    assert finite_difference_check(net, x, y) < 1e-4


def test_gradients_through_skips(rng):
    net = MsNet(hidden=(2, 2, 2), skips=((1, 3), (0, 4)), seed=4)
    random_biases(net, rng)
    x = rng.standard_normal((1, 4, 4, 4))
    y = rng.standard_normal((1, 4, 4, 4))
    assert finite_difference_check(net, x, y) < 1e-4


def test_gradients_zero_at_target(rng):
    net = MsNet(hidden=(2, 2), skips=((0, 2),), seed=0)
    x = rng.standard_normal((2, 4, 4, 4))
    g = gradients(net, (x, forward(net, x)))
    assert g.loss == 0.0
    assert all(np.all(a == 0) for a in g.flat())


def test_gradients_invariant_to_duplication(rng):
    net = MsNet(hidden=(2,), skips=(), seed=0)
    x = rng.standard_normal((2, 4, 4, 4))
    y = rng.standard_normal((2, 4, 4, 4))
    g1 = gradients(net, (x, y))
    g2 = gradients(net, (np.concatenate([x, x]), np.concatenate([y, y])))
    for a, b in zip(g1.flat(), g2.flat()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    pairs = [PatchPair(x[i], y[i], (0, 0, 0)) for i in range(2)]
    for a, b in zip(g1.flat(), gradients(net, pairs).flat()):
        assert np.array_equal(a, b)


def test_adam_zero_gradient_keeps_parameters():
    net = MsNet(hidden=(2,), skips=(), seed=0)
    zero = Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases], 0.0)
    out, state = adam_step(net, zero, AdamState.zeros_like(net), TrainConfig())
    assert state.step == 1
    for a, b in zip(out.parameters(), net.parameters()):
        assert np.array_equal(a, b)


def test_adam_first_step_hand_value():
    net = MsNet(hidden=(2,), skips=(), seed=0)
    ones = Gradients([np.ones_like(w) for w in net.weights], [np.ones_like(b) for b in net.biases], 0.0)
    out, _ = adam_step(net, ones, AdamState.zeros_like(net), TrainConfig(learning_rate=0.001))
    for a, b in zip(out.parameters(), net.parameters()):
        np.testing.assert_allclose(a - b, -0.001 / (1 + 1e-8), rtol=1e-9)


def test_adam_shape_mismatch():
    net = MsNet(hidden=(2,), skips=(), seed=0)
    other = MsNet(hidden=(3,), skips=(), seed=0)
    g = Gradients([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases], 0)
    with pytest.raises(ValueError):
        adam_step(net, g, AdamState.zeros_like(net), TrainConfig())


def test_train_identity_dataset_stays_zero(rng):
    x = rng.uniform(0, 1, (4, 6, 6, 6))
    pairs = [PatchPair(p, p, (0, 0, 0)) for p in x]
    net, hist = train(MsNet.identity(), pairs, TrainConfig(epochs=3, batch_size=2))
    assert hist == [0.0, 0.0, 0.0]


def test_train_deterministic_and_decreasing(rng):
    from scipy.ndimage import gaussian_filter
    x = rng.uniform(0, 1, (4, 8, 8, 8))
    pairs = [PatchPair(p, gaussian_filter(p, 1.0), (0, 0, 0)) for p in x]
    cfg = TrainConfig(epochs=15, batch_size=2, learning_rate=0.01, seed=3)
    net1, h1 = train(MsNet(hidden=(4,), skips=(), seed=1), pairs, cfg)
    net2, h2 = train(MsNet(hidden=(4,), skips=(), seed=1), pairs, cfg)
    assert h1 == h2
    assert all(a.tobytes() == b.tobytes() for a, b in zip(net1.parameters(), net2.parameters()))
    assert h1[-1] < 0.5 * h1[0]


def test_sampling_map_constant_is_uniform():
    mask = np.zeros((6, 6, 6), int)
    mask[1:5, 1:5, 1:5] = 1
    m = sampling_map(Volume3(np.full((6, 6, 6), 3.0)), BrainMask(mask))
    assert np.all(m.prob[mask == 1] == 1 / 64) and np.all(m.prob[mask == 0] == 0)


def test_sampling_map_step_edge():
    g = np.zeros((16, 16, 16))
    g[8:] = 1.0
    m = sampling_map(Volume3(g), BrainMask(np.ones((16, 16, 16), int)))
    # brute-force: numerator from explicit central differences
    num = np.zeros_like(g)
    for x, y, z in itertools.product(range(16), repeat=3):
        d = 0.0
        for axis in range(3):
            lo = [x, y, z]
            hi = [x, y, z]
            if (x, y, z)[axis] == 0:
                hi[axis] += 1
                step = 1.0
            elif (x, y, z)[axis] == 15:
                lo[axis] -= 1
                step = 1.0
            else:
                lo[axis] -= 1
                hi[axis] += 1
                step = 2.0
            d += abs(g[tuple(hi)] - g[tuple(lo)]) / step
        num[x, y, z] = d
    assert np.array_equal(m.prob > 0, num > 0)
    assert set(np.unique(np.nonzero(m.prob)[0])) == {7, 8}
    np.testing.assert_allclose(m.prob, num / num.sum(), rtol=0, atol=1e-15)


@given(seed=st.integers(0, 10_000))
def test_sampling_map_sums_to_one(seed):
    r = np.random.default_rng(seed)
    mask = (r.random((7, 6, 5)) < 0.5).astype(int)
    mask[3, 3, 3] = 1
    m = sampling_map(Volume3(r.standard_normal((7, 6, 5)) * r.uniform(0, 5)), BrainMask(mask))
    assert abs(m.prob.sum() - 1.0) < 1e-9
    assert np.all(m.prob >= 0) and np.all(m.prob[mask == 0] == 0)


def test_sampling_map_empty_mask():
    with pytest.raises(EmptyLabelError):
        sampling_map(Volume3(np.zeros((4, 4, 4))), BrainMask(np.zeros((4, 4, 4), int)))


def _two_point_map(dims=(20, 20, 20)):
    prob = np.zeros(dims)
    prob[9, 9, 9] = 0.25
    prob[10, 11, 9] = 0.75
    prob[0, 0, 0] = 5.0  # invalid centre, patch would leave the grid
    return SamplingMap(prob, BrainMask(np.ones(dims, int)))


def test_sample_frequencies():
    c = sample_centers(_two_point_map(), 100_000, seed=11)
    f = np.mean(c[:, 1] == 9)
    assert abs(f - 0.25) < 0.01
    assert set(map(tuple, c)) == {(9, 9, 9), (10, 11, 9)}


def test_sample_patch_pairs(rng):
    dims = (20, 20, 20)
    comp = Volume3(rng.standard_normal(dims))
    simp = Volume3(rng.standard_normal(dims))
    prob = np.zeros(dims)
    prob[10, 8, 12] = 1.0
    smap = SamplingMap(prob, BrainMask(np.ones(dims, int)))
    pairs = sample_patch_pairs(comp, simp, smap, 5, seed=0)
    assert len(pairs) == 5
    for p in pairs:
        assert p.center == (10, 8, 12)
        assert np.array_equal(p.complex, comp.data[2:18, 0:16, 4:20])
        assert np.array_equal(p.simple, simp.data[2:18, 0:16, 4:20])
    a = sample_patch_pairs(comp, simp, _two_point_map(), 50, seed=4)
    b = sample_patch_pairs(comp, simp, _two_point_map(), 50, seed=4)
    assert [p.center for p in a] == [p.center for p in b]
    empty = SamplingMap(np.zeros(dims), BrainMask(np.ones(dims, int)))
    with pytest.raises(EmptyLabelError):
        sample_patch_pairs(comp, simp, empty, 1, seed=0)


def test_training_patches_normalised(rng):
    comp = Volume3(rng.uniform(2, 5, (18, 18, 18)))
    pairs = training_patches(comp, comp, None, 10, seed=1)
    for p in pairs:
        assert p.complex.min() >= 0 and p.complex.max() <= 1
        assert np.array_equal(p.complex, p.simple)


def test_block_starts():
    assert block_starts(16) == [0]
    assert block_starts(10) == [0]
    assert block_starts(24) == [0, 8]
    assert block_starts(40) == [0, 8, 16, 24]
    assert block_starts(20) == [0, 4]


def test_simplify_single_block(rng):
    net = MsNet(hidden=(2,), skips=(), seed=0)
    v = Volume3(rng.standard_normal((6, 5, 16)))
    out = simplify_volume(net, v, normalize=False)
    assert out.data.tobytes() == forward(net, v.data).tobytes()


def test_simplify_nz24_overlap_oracle(rng):
    net = MsNet(hidden=(3, 3), skips=((0, 3),), seed=7)
    random_biases(net, rng)
    v = Volume3(rng.standard_normal((5, 4, 24)))
    a = forward(net, v.data[:, :, 0:16])
    b = forward(net, v.data[:, :, 8:24])
    ref = np.empty(v.dims)
    ref[:, :, 0:8] = a[:, :, 0:8]
    ref[:, :, 8:16] = (a[:, :, 8:16] + b[:, :, 0:8]) / 2
    ref[:, :, 16:24] = b[:, :, 8:16]
    assert simplify_volume(net, v, normalize=False).data.tobytes() == ref.tobytes()


def test_simplify_identity_and_thin(rng):
    ident = MsNet(hidden=(2, 2), skips=((0, 3),), seed=0, output_init="identity")
    for nz in (5, 16, 29):
        v = Volume3(rng.uniform(-3, 7, (6, 7, nz)))
        np.testing.assert_allclose(simplify_volume(ident, v).data, v.data, atol=1e-5)


def test_net_serialisation(tmp_path, rng):
    net = MsNet(hidden=(3, 2), skips=((0, 3), (1, 3)), seed=9)
    random_biases(net, rng)
    p = tmp_path / "n.msnet"
    save_net(net, p)
    back = load_net(p)
    assert back.hidden == net.hidden and back.skips == net.skips
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.parameters(), net.parameters()))
    save_net(back, tmp_path / "m.msnet")
    assert p.read_bytes() == (tmp_path / "m.msnet").read_bytes()
    blob = p.read_bytes()
    for bad in (b"XXXXXXXX" + blob[8:], blob[:-8], blob + b"\0"):
        (tmp_path / "bad").write_bytes(bad)
        with pytest.raises(NetworkFormatError):
            load_net(tmp_path / "bad")


def test_train_config_text():
    cfg = TrainConfig(epochs=3, learning_rate=0.01)
    from trajreg.demons import parse_key_values
    assert TrainConfig.from_mapping(parse_key_values(cfg.to_text())) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"momentum": "1"})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
