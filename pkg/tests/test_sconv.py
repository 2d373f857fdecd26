import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs
from scipy import signal

from deltapillars import oracle
from deltapillars.canvas import FeatureCanvas
from deltapillars.sconv import (
    ConvSpec, DeltaConvLayer, LayerState, ShapeMismatch, StateUninitialized, apply_bn, apply_relu,
    deconv_subtract, forward, forward_delta, forward_full, forward_strided, forward_submanifold,
    forward_transpose, refresh,
)
from deltapillars.synthetic import mutating_stream

from conftest import random_canvas


def impulse(shape, sites, channels=1, value=1.0):
    c = FeatureCanvas.zeros(channels, shape, dtype=np.float64)
    for (i, j) in sites:
        c.values[:, i, j] = value
        c.active[i, j] = True
        c.change[i, j] = True
    return c


def single(k=3, stride=1, mode="regular", seed=0, cin=1, cout=1):
    return ConvSpec.random(cin, cout, k=k, stride=stride, mode=mode, seed=seed)


# dense references against scipy

@settings(max_examples=20, deadline=None)
@given(hs.integers(0, 2**31 - 1), hs.sampled_from([1, 3, 5]), hs.integers(3, 12), hs.integers(3, 12))
def test_dense_conv_is_same_correlation(seed, k, h, w):
    rng = np.random.default_rng(seed)
    spec = single(k=k, seed=seed)
    x = rng.standard_normal((1, h, w))
    ref = signal.correlate2d(x[0], spec.weights[0, 0], mode="same")
    np.testing.assert_allclose(oracle.dense_conv(x, spec)[0], ref, atol=1e-12)
    spec2 = single(k=k, stride=2, seed=seed)
    np.testing.assert_allclose(oracle.dense_conv(x, spec2)[0], ref[::2, ::2], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(hs.integers(0, 2**31 - 1), hs.integers(2, 10), hs.integers(2, 10))
def test_dense_transpose_is_zero_insertion_convolution(seed, h, w):
    rng = np.random.default_rng(seed)
    spec = single(stride=2, mode="transpose", seed=seed)
    x = rng.standard_normal((1, h, w))
    up = np.zeros((2 * h, 2 * w))
    up[::2, ::2] = x[0]
    full = signal.convolve2d(up, spec.weights[0, 0], mode="full")
    np.testing.assert_allclose(oracle.dense_transpose(x, spec)[0], full[1:1 + 2 * h, 1:1 + 2 * w], atol=1e-12)


def test_dense_conv_hand_computed():
    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
    w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    spec = ConvSpec(1, 1, w, np.zeros(1))
    # centre: full overlap; corner (0,0): x[0:2,0:2] against w[1:3,1:3]
    out = oracle.dense_conv(x, spec)[0]
    assert out[1, 1] == float(np.sum(x[0] * w[0, 0]))
    assert out[0, 0] == 0 * 4 + 1 * 5 + 3 * 7 + 4 * 8


def test_dense_conv_constant_interior():
    spec = ConvSpec(1, 1, np.full((1, 1, 3, 3), 1 / 9), np.zeros(1))
    out = oracle.dense_conv(np.full((1, 7, 7), 2.5), spec)[0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 2.5, rtol=1e-15)


# full pass

def test_zero_input_gives_zero_output():
    spec = single()
    state = LayerState.create(spec, (8, 8))
    out = forward_full(FeatureCanvas.zeros(1, (8, 8)), spec, state)
    assert not out.active.any()
    np.testing.assert_array_equal(state.acc, 0.0)


def test_impulse_gives_flipped_kernel():
    spec = single(seed=4)
    state = LayerState.create(spec, (7, 7), dtype=np.float64)
    forward_full(impulse((7, 7), [(3, 3)]), spec, state)
    np.testing.assert_array_equal(state.acc[0, 2:5, 2:5], spec.weights[0, 0, ::-1, ::-1])
    assert np.count_nonzero(state.acc) == np.count_nonzero(spec.weights)
    np.testing.assert_array_equal(state.acc, oracle.dense_conv(impulse((7, 7), [(3, 3)]).values, spec))


def test_superposition():
    spec = single(seed=5)
    accs = []
    for sites in ([(2, 2)], [(3, 3)], [(2, 2), (3, 3)]):
        s = LayerState.create(spec, (7, 7), dtype=np.float64)
        forward_full(impulse((7, 7), sites), spec, s)
        accs.append(s.acc)
    np.testing.assert_allclose(accs[2], accs[0] + accs[1], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(hs.integers(0, 2**31 - 1), hs.sampled_from(["regular", "strided", "submanifold", "transpose"]),
       hs.integers(1, 4), hs.integers(1, 5))
def test_full_pass_bit_exact_against_oracle(seed, kind, cin, cout):
    mode, stride = {"regular": ("regular", 1), "strided": ("regular", 2),
                    "submanifold": ("submanifold", 1), "transpose": ("transpose", 2)}[kind]
    rng = np.random.default_rng(seed)
    spec = ConvSpec.random(cin, cout, stride=stride, mode=mode, rng=rng)
    x = random_canvas(rng, cin, (9, 8), dtype=np.float64)
    state = LayerState.create(spec, (9, 8), dtype=np.float64)
    out = forward_full(x, spec, state)
    lin, act = oracle.sparse_reference(x.values, x.active, spec)
    np.testing.assert_array_equal(out.active, act)
    assert np.array_equal(np.where(act, state.acc, 0), lin)


# delta passes

def test_identical_input_changes_nothing():
    rng = np.random.default_rng(0)
    spec = ConvSpec.random(2, 3, rng=rng)
    x = random_canvas(rng, 2, (8, 8))
    state = LayerState.create(spec, (8, 8))
    forward_full(x, spec, state)
    acc = state.acc.copy()
    out = forward_delta(FeatureCanvas(x.values.copy(), x.active.copy(), np.zeros((8, 8), bool)), spec, state)
    assert acc.tobytes() == state.acc.tobytes()
    assert not out.change.any()
    assert state.multiplies == 0


def test_delta_from_zero_equals_full():
    rng = np.random.default_rng(1)
    spec = ConvSpec.random(2, 3, rng=rng)
    x = random_canvas(rng, 2, (8, 8))
    a = LayerState.create(spec, (8, 8))
    forward_full(FeatureCanvas.zeros(2, (8, 8)), spec, a)
    forward_delta(x, spec, a)
    b = LayerState.create(spec, (8, 8))
    forward_full(x, spec, b)
    assert a.acc.tobytes() == b.acc.tobytes()
    assert a.out.tobytes() == b.out.tobytes()


def test_delta_sequence_32x32_single_channel():
    spec = single(seed=9)
    state = LayerState.create(spec, (32, 32))
    for n, frame in enumerate(mutating_stream((32, 32), 1, 50, 0.05, seed=9)):
        out = forward(frame, spec, state)
        lin, act = oracle.sparse_reference(frame.values, frame.active, spec)
        ref = np.where(act, lin + spec.bias[:, None, None], 0).astype(np.float32)
        assert oracle.compare(out.values, ref, tolerance=1e-4).passed, n


def test_delta_before_full_raises():
    spec = single()
    with pytest.raises(StateUninitialized):
        forward_delta(FeatureCanvas.zeros(1, (4, 4)), spec, LayerState.create(spec, (4, 4)))
    with pytest.raises(StateUninitialized):
        deconv_subtract(FeatureCanvas.zeros(1, (4, 4)), spec, LayerState.create(spec, (4, 4)))


def test_shape_mismatch():
    spec = single()
    state = LayerState.create(spec, (4, 4))
    with pytest.raises(ShapeMismatch):
        forward_full(FeatureCanvas.zeros(1, (5, 4)), spec, state)
    with pytest.raises(ShapeMismatch):
        ConvSpec(1, 1, np.zeros((1, 2, 3, 3)), np.zeros(1))


def test_mode_constraints():
    with pytest.raises(ValueError):
        single(mode="transpose", stride=1)
    with pytest.raises(ValueError):
        single(mode="submanifold", stride=2)
    with pytest.raises(ValueError):
        single(k=2)


# cancellation

def test_deconv_after_full_cancels():
    rng = np.random.default_rng(2)
    spec = ConvSpec.random(3, 4, rng=rng)
    x = random_canvas(rng, 3, (10, 10))
    state = LayerState.create(spec, (10, 10))
    forward_full(x, spec, state)
    deconv_subtract(x, spec, state)
    assert np.all(state.acc == 0)
    assert not state.out_active.any()


def test_deconv_of_zero_is_noop():
    rng = np.random.default_rng(3)
    spec = ConvSpec.random(2, 2, rng=rng)
    x = random_canvas(rng, 2, (6, 6))
    state = LayerState.create(spec, (6, 6))
    forward_full(x, spec, state)
    acc = state.acc.copy()
    deconv_subtract(FeatureCanvas.zeros(2, (6, 6)), spec, state)
    assert acc.tobytes() == state.acc.tobytes()


# submanifold

def test_submanifold_isolated_site():
    spec = single(mode="submanifold", cin=3, seed=6)
    x = impulse((7, 7), [(3, 3)], channels=3, value=2.0)
    state = LayerState.create(spec, (7, 7), dtype=np.float64)
    out = forward_full(x, spec, state)
    np.testing.assert_array_equal(np.argwhere(out.active), [[3, 3]])
    assert state.acc[0, 3, 3] == sum(2.0 * spec.weights[0, c, 1, 1] for c in range(3))


def test_submanifold_deactivation():
    spec = single(mode="submanifold", cin=2, cout=2, seed=7)
    sites = [(3, 3), (3, 4), (4, 3)]
    state = LayerState.create(spec, (8, 8), dtype=np.float64)
    forward_full(impulse((8, 8), sites, channels=2), spec, state)
    after = impulse((8, 8), sites[1:], channels=2)
    after.change[...] = False
    after.change[3, 3] = True
    out = forward_submanifold(after, spec, state)
    assert not out.active[3, 3]
    np.testing.assert_array_equal(out.values[:, 3, 3], 0)
    assert out.change[3, 3] and out.change[3, 4] and out.change[4, 3]
    lin, act = oracle.sparse_reference(after.values, after.active, spec)
    np.testing.assert_array_equal(np.where(act, state.acc, 0), lin)


def test_submanifold_locality():
    rng = np.random.default_rng(8)
    spec = ConvSpec.random(2, 2, mode="submanifold", rng=rng)
    x = random_canvas(rng, 2, (16, 16), density=0.5)
    state = LayerState.create(spec, (16, 16))
    forward_full(x, spec, state)
    before = state.out.copy()
    y = x.copy()
    y.change[...] = False
    y.values[:, 0, 0] += 1.0
    y.active[0, 0] = True
    y.change[0, 0] = True
    out = forward_submanifold(y, spec, state)
    far = np.ones((16, 16), bool)
    far[:3, :3] = False
    assert before[:, far].tobytes() == out.values[:, far].tobytes()
    assert not out.change[far].any()


# strided and transposed change maps

def test_strided_single_change():
    spec = single(stride=2, seed=1)
    state = LayerState.create(spec, (10, 10))
    forward_full(FeatureCanvas.zeros(1, (10, 10)), spec, state)
    out = forward_strided(impulse((10, 10), [(5, 5)]), spec, state)
    assert sorted(map(tuple, np.argwhere(out.change).tolist())) == [(2, 2), (2, 3), (3, 2), (3, 3)]


def test_strided_no_change_and_full_change():
    rng = np.random.default_rng(4)
    spec = single(stride=2, seed=2)
    x = random_canvas(rng, 1, (9, 9), density=1.0)
    state = LayerState.create(spec, (9, 9))
    forward_full(x, spec, state)
    idle = FeatureCanvas(x.values.copy(), x.active.copy(), np.zeros((9, 9), bool))
    assert not forward_strided(idle, spec, state).change.any()
    y = random_canvas(rng, 1, (9, 9), density=1.0)
    assert forward_strided(y, spec, state).change.all()


def test_transpose_single_change_footprint():
    spec = single(stride=2, mode="transpose", seed=3)
    state = LayerState.create(spec, (6, 6))
    forward_full(FeatureCanvas.zeros(1, (6, 6)), spec, state)
    x = impulse((6, 6), [(2, 3)])
    out = forward_transpose(x, spec, state)
    ones = ConvSpec(1, 1, np.ones((1, 1, 3, 3)), np.zeros(1), stride=2, mode="transpose")
    np.testing.assert_array_equal(out.change, oracle.dense_transpose(x.values, ones)[0] > 0)
    assert out.change.sum() == 9


def test_transpose_zero_delta():
    rng = np.random.default_rng(5)
    spec = single(stride=2, mode="transpose", seed=3)
    x = random_canvas(rng, 1, (6, 6))
    state = LayerState.create(spec, (6, 6))
    forward_full(x, spec, state)
    idle = FeatureCanvas(x.values.copy(), x.active.copy(), np.zeros((6, 6), bool))
    assert not forward_transpose(idle, spec, state).change.any()


# change propagation and counts against the mask simulation

MODES = {"regular": ("regular", 1), "strided": ("regular", 2),
         "submanifold": ("submanifold", 1), "transpose": ("transpose", 2)}


@settings(max_examples=25, deadline=None)
@given(hs.integers(0, 2**31 - 1), hs.sampled_from(sorted(MODES)), hs.floats(0.0, 0.6))
def test_delta_matches_oracle_and_simulation(seed, kind, frac):
    mode, stride = MODES[kind]
    rng = np.random.default_rng(seed)
    spec = ConvSpec.random(2, 3, stride=stride, mode=mode, rng=rng)
    shape = (11, 10)
    state = LayerState.create(spec, shape)
    prev_ref = None
    for frame in mutating_stream(shape, 2, 6, frac, density=0.4, seed=seed):
        prev_active = state.prev_active.copy()
        was = state.initialized
        out = forward(frame, spec, state)
        lin, act = oracle.sparse_reference(frame.values, frame.active, spec)
        ref = np.where(act, lin + spec.bias[:, None, None], 0).astype(np.float32)
        np.testing.assert_array_equal(out.active, act)
        assert oracle.compare(out.values, ref, tolerance=1e-5).passed
        if was:
            want_change, want_macs = oracle.propagate_change(spec, frame.change, prev_active, frame.active)
            np.testing.assert_array_equal(out.change, want_change)
            assert state.multiplies == want_macs
            assert state.full_multiplies == oracle.full_sparse_multiplies(spec, frame.active)
            assert oracle.compare(prev_ref, ref, change_map=out.change).change_soundness_violations == 0
        prev_ref = ref


# batch norm and ReLU

def test_bn_identity_and_affine():
    c = FeatureCanvas(np.full((1, 2, 2), 3.0, np.float32), np.ones((2, 2), bool), np.ones((2, 2), bool))
    apply_bn(c, [1.0], [0.0], c.change)
    np.testing.assert_array_equal(c.values, 3.0)
    apply_bn(c, [2.0], [1.0], c.change)
    np.testing.assert_array_equal(c.values, 7.0)


def test_bn_skips_unchanged_sites():
    change = np.array([[True, False]])
    c = FeatureCanvas(np.full((1, 1, 2), 3.0), np.ones((1, 2), bool), change)
    apply_bn(c, [2.0], [1.0], change)
    np.testing.assert_array_equal(c.values[0, 0], [7.0, 3.0])


@pytest.mark.parametrize("prev,now,post", [(-0.5, -0.3, 0.0), (0.7, 0.7, 0.7), (0.2, -0.1, 0.0)])
def test_relu_keeps_bits(prev, now, post):
    change = np.ones((1, 1), bool)
    c = FeatureCanvas(np.full((1, 1, 1), now), np.ones((1, 1), bool), change.copy())
    out = apply_relu(c, np.full((1, 1, 1), max(prev, 0.0)), change.copy())
    assert out.values[0, 0, 0] == post
    assert out.change[0, 0]


def test_layer_flags_new_zero():
    spec = ConvSpec(1, 1, np.ones((1, 1, 1, 1)), np.zeros(1), k=1)
    layer = DeltaConvLayer(spec, [1.0], [0.0], (1, 2))
    x = FeatureCanvas(np.array([[[0.2, 0.5]]], np.float32), np.ones((1, 2), bool), np.ones((1, 2), bool))
    layer(x)
    y = FeatureCanvas(np.array([[[-0.1, 0.5]]], np.float32), np.ones((1, 2), bool), np.array([[True, False]]))
    out = layer(y)
    assert out.values[0, 0, 0] == 0.0 and out.change[0, 0]
    assert not out.change[0, 1]


# refresh and persistence

def test_refresh_after_full_is_identical():
    rng = np.random.default_rng(6)
    spec = ConvSpec.random(3, 2, rng=rng)
    x = random_canvas(rng, 3, (8, 8))
    state = LayerState.create(spec, (8, 8))
    forward_full(x, spec, state)
    acc = state.acc.copy()
    refresh(state, x, spec)
    assert acc.tobytes() == state.acc.tobytes()


def test_refresh_on_zero_input():
    rng = np.random.default_rng(7)
    spec = ConvSpec.random(3, 2, rng=rng)
    state = LayerState.create(spec, (8, 8))
    forward_full(random_canvas(rng, 3, (8, 8)), spec, state)
    out = refresh(state, FeatureCanvas.zeros(3, (8, 8)), spec)
    np.testing.assert_array_equal(state.acc, 0)
    assert not out.active.any()
    np.testing.assert_array_equal(out.values, 0)


@pytest.mark.parametrize("mode,stride", [("regular", 1), ("regular", 2), ("submanifold", 1), ("transpose", 2)])
def test_layer_file_round_trip(tmp_path, mode, stride):
    spec = ConvSpec.random(3, 5, stride=stride, mode=mode, seed=1)
    spec.save(tmp_path / "l.sscl")
    back = ConvSpec.load(tmp_path / "l.sscl")
    assert (back.mode, back.stride, back.k) == (mode, stride, 3)
    np.testing.assert_array_equal(back.weights, spec.weights)
    np.testing.assert_array_equal(back.bias, spec.bias)
