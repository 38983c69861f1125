import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from anomaly_nav import grad as G
from anomaly_nav.errors import DimensionError, NumericError, TrainingError, UsageError
from anomaly_nav.grad import checkpoint


def numeric_grad(fn, arrays_, name, h=1e-6):
    """Central differences of scalar ``fn`` in float64, one coordinate at a time."""
    base = {k: v.astype(np.float64) for k, v in arrays_.items()}
    out = np.zeros_like(base[name])
    with G.precision(np.float64), G.no_grad():
        for i in np.ndindex(out.shape):
            hi = dict(base)
            lo = dict(base)
            hi[name] = base[name].copy()
            lo[name] = base[name].copy()
            hi[name][i] += h
            lo[name][i] -= h
            f_hi = fn(**{k: G.Tensor(v) for k, v in hi.items()}).item()
            f_lo = fn(**{k: G.Tensor(v) for k, v in lo.items()}).item()
            out[i] = (f_hi - f_lo) / (2 * h)
    return out


def analytic_grad(fn, arrays_):
    ts = {k: G.Tensor(v, requires_grad=True) for k, v in arrays_.items()}
    G.backward(fn(**ts))
    return {k: t.grad for k, t in ts.items()}


def assert_grads_match(fn, arrays_, tol=1e-3):
    got = analytic_grad(fn, arrays_)
    for name in arrays_:
        ref = numeric_grad(fn, arrays_, name)
        scale = max(np.abs(ref).max(), 1e-6)
        rel = np.abs(got[name] - ref) / np.maximum(np.abs(ref), 1e-3 * scale)
        assert rel.max() < tol, f"{name}: worst rel err {rel.max():.2e}"


def weights(rng, shape):
    # fixed random weighting makes every output coordinate matter
    w = rng.standard_normal(shape)
    return lambda y: G.sum_(G.mul(y, w))


# ---------------------------------------------------------------- conv2d_valid


def test_conv_1x1_identity():
    x = np.random.default_rng(0).standard_normal((5, 6, 3)).astype(np.float32)
    k = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    y = G.conv2d_valid(G.Tensor(x), G.Tensor(k), G.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_conv_ones_sum_to_nine():
    y = G.conv2d_valid(G.Tensor(np.ones((3, 3, 1))), G.Tensor(np.ones((3, 3, 1, 1))))
    assert y.shape == (1, 1, 1)
    assert y.item() == 9.0


def test_conv_forward_matches_scipy(rng):
    x = rng.standard_normal((9, 11, 2))
    k = rng.standard_normal((5, 5, 2, 4))
    b = rng.standard_normal(4)
    with G.precision(np.float64):
        y = G.conv2d_valid(G.Tensor(x), G.Tensor(k), G.Tensor(b)).data
    ref = np.stack(
        [sum(correlate(x[..., c], k[..., c, o], mode="valid") for c in range(2)) + b[o] for o in range(4)], axis=-1
    )
    np.testing.assert_allclose(y, ref, atol=1e-10)


def test_conv_gradients_match_finite_differences(rng):
    arrs = {
        "x": rng.standard_normal((8, 8, 2)).astype(np.float32),
        "k": rng.standard_normal((5, 5, 2, 4)).astype(np.float32) * 0.3,
        "b": rng.standard_normal(4).astype(np.float32),
    }
    w = weights(rng, (4, 4, 4))
    assert_grads_match(lambda x, k, b: w(G.conv2d_valid(x, k, b)), arrs)


def test_conv_batched_matches_single(rng):
    x = rng.standard_normal((3, 7, 7, 2)).astype(np.float32)
    k = rng.standard_normal((5, 5, 2, 3)).astype(np.float32)
    yb = G.conv2d_valid(G.Tensor(x), G.Tensor(k)).data
    for i in range(3):
        np.testing.assert_allclose(yb[i], G.conv2d_valid(G.Tensor(x[i]), G.Tensor(k)).data, atol=1e-5)


def test_conv_shape_errors():
    with pytest.raises(DimensionError, match="channel"):
        G.conv2d_valid(G.Tensor(np.ones((8, 8, 2))), G.Tensor(np.ones((5, 5, 3, 1))))
    with pytest.raises(DimensionError):
        G.conv2d_valid(G.Tensor(np.ones((4, 8, 2))), G.Tensor(np.ones((5, 5, 2, 1))))


def test_transposed_conv_is_adjoint(rng):
    # <conv(x), y> == <x, conv_t(y)>; both take the k x k x Cin x Cout kernel
    x = rng.standard_normal((9, 10, 3))
    y = rng.standard_normal((5, 6, 4))
    k = rng.standard_normal((5, 5, 3, 4))
    with G.precision(np.float64):
        cx = G.conv2d_valid(G.Tensor(x), G.Tensor(k)).data
        ty = G.conv2d_transpose(G.Tensor(y), G.Tensor(k)).data
    assert ty.shape == x.shape
    assert np.isclose(np.sum(cx * y), np.sum(x * ty), rtol=1e-10)


def test_transposed_conv_gradients(rng):
    arrs = {
        "x": rng.standard_normal((4, 3, 3)).astype(np.float32),
        "k": rng.standard_normal((5, 5, 2, 3)).astype(np.float32) * 0.3,
    }
    w = weights(rng, (8, 7, 2))
    assert_grads_match(lambda x, k: w(G.conv2d_transpose(x, k)), arrs)


# ---------------------------------------------------------------- pooling


def test_maxpool_small():
    y = G.maxpool2(G.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]))
    assert y.shape == (1, 1, 1) and y.item() == 4.0


def test_maxpool_constant_and_odd_extent():
    y = G.maxpool2(G.Tensor(np.full((7, 6, 2), 3.5)))
    assert y.shape == (3, 3, 2)
    assert np.all(y.data == 3.5)


def test_maxpool_degenerate():
    with pytest.raises(DimensionError):
        G.maxpool2(G.Tensor(np.ones((1, 4, 1))))


def test_maxpool_tie_routes_to_first():
    x = G.Tensor(np.ones((2, 2, 1)), requires_grad=True)
    G.backward(G.sum_(G.maxpool2(x)))
    assert x.grad[..., 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_gradients(rng):
    # a permutation of distinct values keeps every window tie-free
    x = (rng.permutation(108).reshape(6, 6, 3) * 0.1).astype(np.float32)
    w = weights(rng, (3, 3, 3))
    assert_grads_match(lambda x: w(G.maxpool2(x)), {"x": x})


def test_upsample_single():
    y = G.upsample_nn2(G.Tensor(np.ones((1, 1, 1))))
    assert y.data[..., 0].tolist() == [[1, 1], [1, 1]]


def test_upsample_sum_gradient_is_four(rng):
    x = G.Tensor(rng.standard_normal((3, 5, 2)), requires_grad=True)
    G.backward(G.sum_(G.upsample_nn2(x)))
    assert np.all(x.grad == 4.0)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_pool_undoes_upsample(x):
    np.testing.assert_array_equal(G.maxpool2(G.upsample_nn2(G.Tensor(x))).data, x)


# ---------------------------------------------------------------- elementwise


def test_leaky_relu_values():
    assert G.leaky_relu(G.Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)
    for slope in (0.01, 0.3, 0.9):
        assert G.leaky_relu(G.Tensor(2.5), slope).item() == 2.5


def test_leaky_relu_slope_bounds():
    with pytest.raises(UsageError):
        G.leaky_relu(G.Tensor(1.0), 1.5)


def test_leaky_relu_derivative_at_zero_is_one():
    x = G.Tensor(np.zeros(3), requires_grad=True)
    G.backward(G.sum_(G.leaky_relu(x)))
    assert np.all(x.grad == 1.0)


def test_leaky_relu_gradients(rng):
    x = rng.uniform(0.1, 1.0, 20) * rng.choice([-1, 1], 20)
    w = weights(rng, 20)
    assert_grads_match(lambda x: w(G.leaky_relu(x)), {"x": x.astype(np.float32)})


def test_linear_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(G.linear(G.Tensor(x), G.Tensor(np.eye(3)), G.Tensor(np.zeros(3))).data, x)
    b = np.array([0.5, 1.5])
    assert np.array_equal(G.linear(G.Tensor(x), G.Tensor(np.zeros((3, 2))), G.Tensor(b)).data, b)


def test_linear_gradients(rng):
    arrs = {name: rng.standard_normal(s).astype(np.float32) for name, s in (("x", 4), ("w", (4, 3)), ("b", 3))}
    w = weights(rng, 3)
    assert_grads_match(lambda x, w_, b: w(G.linear(x, w_, b)), {"x": arrs["x"], "w_": arrs["w"], "b": arrs["b"]})


def test_linear_shape_error():
    with pytest.raises(DimensionError):
        G.linear(G.Tensor(np.ones(4)), G.Tensor(np.ones((3, 2))))


def test_elementwise_values():
    assert G.exp(G.Tensor(0.0)).item() == 1.0
    assert G.mean(G.Tensor([2.0, 4.0])).item() == 3.0


def test_log_domain_error():
    with pytest.raises(NumericError):
        G.log(G.Tensor([1.0, 0.0]))
    with pytest.raises(NumericError):
        G.log(G.Tensor([-2.0]))


def test_tanh_exp_composite_gradient(rng):
    x = rng.uniform(-1, 1, 6).astype(np.float32)
    assert_grads_match(lambda x: G.sum_(G.tanh(G.exp(x))), {"x": x})


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: G.add(a, b),
        lambda a, b: G.sub(a, b),
        lambda a, b: G.mul(a, b),
        lambda a, b: G.add(G.square(a), G.log(G.mul(b, b))),
        lambda a, b: G.concat([a, G.tanh(b)], axis=0),
    ],
    ids=["add", "sub", "mul", "square_log", "concat"],
)
def test_binary_gradients(op, rng):
    arrs = {"a": rng.uniform(0.5, 1.5, 5).astype(np.float32), "b": rng.uniform(0.5, 1.5, 5).astype(np.float32)}
    probe = op(G.Tensor(arrs["a"]), G.Tensor(arrs["b"]))
    w = weights(rng, probe.shape)
    assert_grads_match(lambda a, b: w(op(a, b)), arrs)


def test_broadcast_bias_gradient_sums(rng):
    x = G.Tensor(rng.standard_normal((4, 3)))
    b = G.Tensor(np.zeros(3), requires_grad=True)
    G.backward(G.sum_(G.add(x, b)))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_reductions_along_axis(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = weights(rng, 3)
    assert_grads_match(lambda x: w(G.mean(x, axis=1)), {"x": x})
    assert_grads_match(lambda x: w(G.sum_(G.reshape(x, (3, 2, 2)), axis=(1, 2))), {"x": x})
    assert_grads_match(lambda x: G.sum_(G.square(x[1:, ::2])), {"x": x})


# ---------------------------------------------------------------- backward


def test_backward_simple_cases(rng):
    v = rng.standard_normal(5)
    x = G.Tensor(v, requires_grad=True)
    G.backward(G.sum_(x))
    assert np.all(x.grad == 1.0)
    x = G.Tensor(v, requires_grad=True)
    G.backward(G.sum_(G.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * v.astype(np.float32), rtol=1e-6)


def test_backward_needs_scalar():
    with pytest.raises(UsageError, match="scalar"):
        G.backward(G.mul(G.Tensor(np.ones(3), requires_grad=True), 2.0))


def test_shared_nodes_match_expanded_tree():
    # five nodes: a -> b = a*a -> c = exp(b), d = b + a -> e = c * d
    def dag(a):
        b = G.mul(a, a)
        return G.sum_(G.mul(G.exp(b), G.add(b, a)))

    def tree(a):
        return G.sum_(G.mul(G.exp(G.mul(a, a)), G.add(G.mul(a, a), a)))

    v = np.array([0.3, -0.7])
    x1, x2 = G.Tensor(v, requires_grad=True), G.Tensor(v, requires_grad=True)
    G.backward(dag(x1))
    G.backward(tree(x2))
    # float32 summation order differs between the two graphs
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-6)
    # and both agree with the closed form d/da [e^{a^2}(a^2 + a)]
    a = v
    ref = np.exp(a * a) * (2 * a * (a * a + a) + 2 * a + 1)
    np.testing.assert_allclose(x1.grad, ref, rtol=1e-5)


def test_no_grad_records_nothing():
    x = G.Tensor(np.ones(2), requires_grad=True)
    with G.no_grad():
        y = G.mul(x, 3.0)
    assert not y.requires_grad


def test_debug_mode_catches_non_finite():
    G.set_debug(True)
    try:
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            G.exp(G.Tensor([1e30]))
    finally:
        G.set_debug(False)


def test_tensor_is_float32_by_default():
    assert G.Tensor([1, 2, 3]).data.dtype == np.float32


# ---------------------------------------------------------------- adam


def adam_oracle(w0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-run scalar Adam in float64."""
    w, m, v, trace = w0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trace.append(w)
    return trace


def test_adam_first_step_is_signed_lr():
    p = {"w": G.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    G.adam_step(p, {"w": np.array([50.0, -0.3, 7.0], dtype=np.float32)}, G.AdamState(lr=0.01))
    np.testing.assert_allclose(p["w"].data, [0.99, -1.99, 2.99], atol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": G.Tensor(np.array([0.5, -1.5]), requires_grad=True)}
    before = p["w"].data.copy()
    state = G.AdamState(lr=0.1)
    for _ in range(20):
        G.adam_step(p, {"w": np.zeros(2, np.float32)}, state)
    np.testing.assert_array_equal(p["w"].data, before)
    assert state.t == 20


def test_adam_quadratic_trace():
    w = G.Tensor(np.array(1.0), requires_grad=True)
    opt = G.Adam({"w": w}, lr=0.1)
    got = []
    for _ in range(10):
        opt.zero_grad()
        G.backward(G.square(w))
        opt.step()
        got.append(float(w.data))
    ref = adam_oracle(1.0, lambda x: 2 * x, 10, 0.1)
    np.testing.assert_allclose(got, ref, atol=1e-6)
    assert all(a > b for a, b in zip([1.0] + got, got))
    assert 0 < got[-1] < 1.0


def test_adam_nan_gradient_names_parameter():
    p = {"enc.conv1.w": G.Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(TrainingError, match="enc.conv1.w"):
        G.adam_step(p, {"enc.conv1.w": np.array([np.nan, 0.0], np.float32)}, G.AdamState())
    assert np.all(p["enc.conv1.w"].data == 1.0)


def test_adam_state_invariants(rng):
    p = {"w": G.Tensor(rng.standard_normal((3, 2)), requires_grad=True)}
    state = G.AdamState(lr=1e-3)
    ts = []
    for _ in range(5):
        G.adam_step(p, {"w": rng.standard_normal((3, 2)).astype(np.float32)}, state)
        ts.append(state.t)
        assert state.m["w"].shape == (3, 2) and np.all(state.v["w"] >= 0)
    assert ts == sorted(set(ts))


def test_adam_survives_huge_float32_gradient():
    p = {"w": G.Tensor(np.ones(2, np.float32), requires_grad=True)}
    state = G.AdamState(lr=0.01)
    G.adam_step(p, {"w": np.array([1e30, 1.0], np.float32)}, state)
    assert np.all(np.isfinite(state.v["w"]))
    before = p["w"].data.copy()
    G.adam_step(p, {"w": np.array([1.0, 1.0], np.float32)}, state)
    # a saturated second moment would freeze w[0] for good
    assert p["w"].data[0] < before[0]


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    tensors = {
        "enc.conv1.w": rng.standard_normal((5, 5, 7, 32)).astype(np.float32),
        "svdd.radius": np.array(0.25, np.float32),
        "ü-name": rng.standard_normal(3).astype(np.float32),
    }
    path = checkpoint.save(tmp_path / "a.ckpt", tensors, {"method": "nvp"})
    got, meta = checkpoint.load(path)
    assert list(got) == list(tensors)
    for k in tensors:
        assert got[k].shape == tensors[k].shape
        assert got[k].tobytes() == tensors[k].tobytes()
    assert meta["method"] == "nvp"
    assert path.read_bytes()[:4] == b"ANAV"


def test_checkpoint_rejects_damage(tmp_path):
    from anomaly_nav.errors import FormatError

    raw = checkpoint.dumps({"w": np.ones((2, 3), np.float32)})
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw[:6]):
        with pytest.raises(FormatError):
            checkpoint.loads(bad)


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4))
def test_checkpoint_round_trip_property(shapes):
    rng = np.random.default_rng(len(shapes))
    tensors = {f"t{i}": rng.standard_normal(s).astype(np.float32) for i, s in enumerate(shapes)}
    got, _ = checkpoint.loads(checkpoint.dumps(tensors))
    assert all(got[k].tobytes() == v.tobytes() for k, v in tensors.items())


# ---------------------------------------------------------------- properties


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)))
def test_sum_of_squares_gradient_property(v):
    x = G.Tensor(v, requires_grad=True)
    G.backward(G.sum_(G.square(x)))
    np.testing.assert_allclose(x.grad, 2 * v.astype(np.float32), rtol=1e-6, atol=1e-6)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-20, 20)))
def test_forward_outputs_finite_property(v):
    x = G.Tensor(v)
    for y in (G.tanh(x), G.leaky_relu(x), G.exp(G.mul(G.tanh(x), 3.0)), G.square(x)):
        assert np.all(np.isfinite(y.data))
