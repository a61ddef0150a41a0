import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddl.numerics import checkpoint, nn
from ddl.numerics import tensor as T
from ddl.numerics.optim import AdamW, OptimizerState, adamw_step
from ddl.numerics.tensor import Parameter, Tensor

import gradcheck


# ---------------------------------------------------------------- conv2d
def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv_direct_sum():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = T.conv2d(x, k, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 5.0


def test_conv_zero_kernel_annihilates():
    x = np.random.default_rng(1).standard_normal((1, 3, 6, 6))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), padding=1)
    assert not np.any(out.data)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), k=st.integers(1, 3), stride=st.integers(1, 3),
       padding=st.integers(0, 2))
def test_conv_output_shape_and_direct_oracle(h, w, k, stride, padding):
    if k > h + 2 * padding or k > w + 2 * padding:
        return
    rng = np.random.default_rng(h * 100 + w * 10 + k)
    x = rng.standard_normal((1, 2, h, w))
    kern = rng.standard_normal((3, 2, k, k))
    bias = rng.standard_normal(3)
    with T.default_dtype(np.float64):
        out = T.conv2d(Tensor(x), Tensor(kern), Tensor(bias), stride=stride, padding=padding).data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    assert out.shape == (1, 3, ho, wo)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ref = np.empty_like(out)
    for f in range(3):
        for i in range(ho):
            for j in range(wo):
                patch = xp[0, :, i * stride:i * stride + k, j * stride:j * stride + k]
                ref[0, f, i, j] = np.sum(patch * kern[f]) + bias[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- backward
def test_backward_of_sum_is_ones():
    p = Parameter(np.arange(6.0).reshape(2, 3))
    T.tsum(p).backward()
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_of_square():
    with T.default_dtype(np.float64):
        p = Parameter([1.0, -2.0])
        T.tsum(p * p).backward()
        np.testing.assert_array_equal(p.grad, [2.0, -4.0])


def test_backward_accumulates_until_zeroed():
    p = Parameter([1.0, 2.0])
    T.tsum(p).backward()
    T.tsum(p).backward()
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])
    p.zero_grad()
    assert p.grad is None


def test_backward_rejects_non_scalar():
    p = Parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        (p * 2).backward()


def test_two_layer_conv_net_matches_fd():
    rng = np.random.default_rng(5)

    def net(x, w1, w2):
        return T.conv2d(T.relu(T.conv2d(x, w1, padding=1)), w2, padding=1)

    arrays = [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))]
    assert gradcheck.check(net, arrays, rng) < gradcheck.REL_TOL


@pytest.mark.parametrize("name", sorted(gradcheck.PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(4):
        fn, arrays = gradcheck.PRIMITIVES[name](rng)
        assert gradcheck.check(fn, arrays, rng) < gradcheck.REL_TOL


def test_linearity_of_backward():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4))
    a, b = 1.7, -0.3
    with T.default_dtype(np.float64):
        def grad_of(fn):
            p = Parameter(x)
            T.tsum(fn(p)).backward()
            return p.grad
        gf = grad_of(lambda p: T.tanh(p) * p)
        gg = grad_of(lambda p: T.exp(p * 0.5))
        gc = grad_of(lambda p: T.tanh(p) * p * a + T.exp(p * 0.5) * b)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=0, atol=1e-10)


def test_deterministic_forward_backward():
    def run():
        net = nn.Conv2d(2, 3, rng=np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((2, 2, 6, 6)))
        out = net(x)
        T.tsum(out * out).backward()
        return out.data, net.weight.grad
    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()


def test_space_to_depth_roundtrip():
    x = np.random.default_rng(2).standard_normal((2, 3, 8, 4)).astype(np.float32)
    y = T.space_to_depth(Tensor(x))
    assert y.shape == (2, 12, 4, 2)
    np.testing.assert_array_equal(T.depth_to_space(y).data, x)
    with pytest.raises(ValueError):
        T.space_to_depth(Tensor(np.zeros((1, 1, 3, 4))))


# ---------------------------------------------------------------- AdamW
def test_adamw_zero_gradient_fixed_point():
    p = Parameter([1.0, -3.0])
    state = OptimizerState(lr=0.1)
    assert adamw_step([p], [np.zeros(2, dtype=np.float32)], state)
    np.testing.assert_array_equal(p.data, [1.0, -3.0])
    assert not np.any(state.m[0]) and not np.any(state.v[0])


def test_adamw_reference_step():
    with T.default_dtype(np.float64):
        p = Parameter([1.0])
        state = OptimizerState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        adamw_step([p], [np.array([1.0])], state)
    assert state.t == 1
    assert state.m[0][0] == pytest.approx(0.1, rel=1e-12)
    assert state.v[0][0] == pytest.approx(0.001, rel=1e-12)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), rel=1e-12)


def test_adamw_decoupled_decay_with_zero_gradient():
    with T.default_dtype(np.float64):
        p = Parameter([1.0])
        adamw_step([p], [np.array([0.0])], OptimizerState(lr=0.1, weight_decay=0.1))
    assert p.data[0] == pytest.approx(0.99, rel=1e-12)


def test_adamw_nan_gradient_aborts_step():
    p = Parameter([1.0, 2.0])
    state = OptimizerState(lr=0.1)
    before = p.data.copy()
    assert not adamw_step([p], [np.array([np.nan, 0.0])], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 0 and state.skipped_steps == 1


def test_adamw_step_counter_increments():
    p = Parameter([1.0])
    opt = AdamW([p], lr=0.01)
    for k in range(1, 6):
        p.grad = np.array([0.5], dtype=np.float32)
        opt.step()
        assert opt.state.t == k


# ---------------------------------------------------------------- checkpoint
@settings(max_examples=30, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(0, 4), min_size=0, max_size=3), min_size=0, max_size=4),
       wide=st.booleans())
def test_checkpoint_bit_exact_roundtrip(shapes, wide):
    rng = np.random.default_rng(len(shapes))
    dtype = np.float64 if wide else np.float32
    tensors = {f"t{i}.w": rng.standard_normal(s).astype(dtype) for i, s in enumerate(shapes)}
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_header_and_rejects_garbage():
    blob = checkpoint.dumps({"a": np.zeros(2, np.float32)})
    assert blob[:4] == b"DDL1"
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + blob[4:])


def test_module_state_roundtrip(tmp_path):
    a = nn.Conv2d(2, 3, rng=np.random.default_rng(0))
    b = nn.Conv2d(2, 3, rng=np.random.default_rng(1))
    checkpoint.save(tmp_path / "c.ddl", a.state_dict())
    b.load_state_dict(checkpoint.load(tmp_path / "c.ddl"))
    assert b.weight.data.tobytes() == a.weight.data.tobytes()
