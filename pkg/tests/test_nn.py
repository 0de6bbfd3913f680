import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypseg import nn
from hypseg.tensor import Tensor, precision

from oracles import conv2d_naive, conv_transpose2d_naive, grad_check, max_pool_naive

N_GRAD = 20


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 3))
    stride = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 2))
    H = draw(st.integers(max(1, k - 2 * pad), 6))
    W = draw(st.integers(max(1, k - 2 * pad), 6))
    B, C, O = draw(st.integers(1, 2)), draw(st.integers(1, 3)), draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31))
    return B, C, O, H, W, k, stride, pad, seed


@settings(max_examples=120, deadline=None)
@given(conv_case())
def test_conv2d_matches_naive_loops(case):
    B, C, O, H, W, k, stride, pad, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, H, W))
    w = rng.standard_normal((O, C, k, k))
    b = rng.standard_normal(O)
    got = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv2d_naive(x, w, b, stride, pad), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
       st.sampled_from([(3, 1), (1, 0)]), st.integers(0, 2**31))
def test_conv_transpose_matches_naive_scatter(B, Ci, Co, H, W, kp, seed):
    k, p = kp
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, Ci, H, W))
    w = rng.standard_normal((Ci, Co, k, k))
    b = rng.standard_normal(Co)
    got = nn.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), 2, p, 1).data
    assert got.shape == (B, Co, 2 * H, 2 * W)
    np.testing.assert_allclose(got, conv_transpose2d_naive(x, w, b, 2, p, 1), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_max_pool_matches_naive(B, C, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((B, C, 2 * h, 2 * w))
    np.testing.assert_allclose(nn.max_pool2d(Tensor(x)).data, max_pool_naive(x), rtol=0, atol=1e-12)


def test_transposed_conv_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 4, 3, 3))  # transposed: Cin=3 -> Cout=4
    y = rng.standard_normal((2, 4, 8, 10))
    up = nn.conv_transpose2d(Tensor(x), Tensor(w), None, 2, 1, 1).data
    # <T x, y> == <x, conv(y)> with the same kernel viewed as Cout x Cin
    down = nn.conv2d(Tensor(y[:, :, :8, :10]), Tensor(w), None, 2, 1).data
    np.testing.assert_allclose((up * y).sum(), (x * down[:, :, :4, :5]).sum(), rtol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        nn.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="inconsistent transposed-conv geometry"):
        nn.conv_transpose2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), None, 2, 1, 0)
    with pytest.raises(ValueError, match="even"):
        nn.max_pool2d(Tensor(np.ones((1, 1, 3, 4))))


# -- gradient checks (float64, h=1e-5) ----------------------------------------------


def _instances(seed):
    rng = np.random.default_rng(seed)
    for i in range(N_GRAD):
        yield i, rng


def test_grad_conv2d():
    for i, rng in _instances(1):
        stride, pad = (1, 1) if i % 2 == 0 else (2, 0)
        x = rng.standard_normal((2, 2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        f = lambda x, w, b: nn.conv2d(x, w, b, stride, pad)  # noqa: E731
        assert grad_check(f, [x, w, b], seed=i) < 1e-4


def test_grad_conv2d_pointwise():
    for i, rng in _instances(2):
        x, w, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 1, 1)), rng.standard_normal(2)
        assert grad_check(lambda x, w, b: nn.conv2d(x, w, b, 1, 0), [x, w, b], seed=i) < 1e-4


def test_grad_conv_transpose2d():
    for i, rng in _instances(3):
        x, w, b = rng.standard_normal((2, 2, 3, 2)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(3)
        assert grad_check(lambda x, w, b: nn.conv_transpose2d(x, w, b, 2, 1, 1), [x, w, b], seed=i) < 1e-4


def test_grad_max_pool():
    for i, rng in _instances(4):
        # distinct values so the arg-max is stable under +-h
        x = rng.permutation(64).reshape(1, 4, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 4, 4, 4))
        assert grad_check(nn.max_pool2d, [x], seed=i) < 1e-4


def test_grad_batch_norm_training():
    for i, rng in _instances(5):
        x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
        g, b = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
        assert grad_check(lambda x, g, b: nn.batch_norm(x, g, b, training=True), [x, g, b], seed=i) < 1e-4


def test_grad_batch_norm_2d_input():
    for i, rng in _instances(6):
        x = rng.standard_normal((6, 3))
        g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
        assert grad_check(lambda x, g, b: nn.batch_norm(x, g, b, training=True), [x, g, b], seed=i) < 1e-4


def test_grad_batch_norm_eval():
    for i, rng in _instances(7):
        x = rng.standard_normal((2, 3, 2, 2))
        g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        f = lambda x, g, b: nn.batch_norm(x, g, b, rm, rv, training=False)  # noqa: E731
        assert grad_check(f, [x, g, b], seed=i) < 1e-4


def test_grad_linear():
    for i, rng in _instances(8):
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        assert grad_check(nn.linear, [x, w, b], seed=i) < 1e-4


def test_grad_relu_sigmoid_softmax():
    for i, rng in _instances(9):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 1e-3] = 0.1
        for f in (nn.relu, nn.sigmoid, lambda t: nn.softmax(t, axis=-1), lambda t: nn.softmax(t, axis=0)):
            assert grad_check(f, [x], seed=i) < 1e-4


def test_grad_dropout_fixed_mask():
    for i, rng in _instances(10):
        x = rng.standard_normal((4, 6))
        f = lambda t: nn.dropout(t, 0.3, True, np.random.default_rng(i))  # noqa: E731
        assert grad_check(f, [x], seed=i) < 1e-4


# -- layer behaviour -----------------------------------------------------------------


def test_softmax_is_stable_for_huge_logits():
    p = nn.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]]))).data
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_sigmoid_is_stable():
    s = nn.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
    assert np.isfinite(s).all()


def test_dropout_eval_identity_and_rate_validation(rng):
    x = Tensor(rng.standard_normal(10))
    assert nn.dropout(x, 0.5, training=False) is x
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0)


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(200000))
    y = nn.dropout(x, 0.2, True, np.random.default_rng(0)).data
    assert abs(y.mean() - 1.0) < 0.01


def test_batch_norm_running_stats_update():
    bn = nn.BatchNorm(2, momentum=0.1)
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) * 3 + 5
    bn(Tensor(x))
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * mean)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var)
    bn.eval()
    out = bn(Tensor(x)).data
    expect = (x - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect)


def test_batch_norm_training_output_is_standardised(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 4 - 2
    y = nn.batch_norm(Tensor(x), np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


class _Tiny(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(3, 2, 0)
        self.bn = nn.BatchNorm(2)

    def forward(self, x):
        return self.bn(self.fc(x))


def test_module_registry_names_and_state_dict():
    m = _Tiny()
    assert list(m.registry()) == ["fc.weight", "fc.bias", "bn.weight", "bn.bias"]
    assert list(m.state_dict()) == ["fc.weight", "fc.bias", "bn.weight", "bn.bias", "bn.running_mean", "bn.running_var"]
    assert m.registry().param_count() == 3 * 2 + 2 + 2 + 2


def test_load_state_dict_roundtrip_and_mismatch():
    a, b = _Tiny(), _Tiny()
    a.fc.weight.data += 1
    a.bn.running_mean[...] = 3
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(b.fc.weight.data, a.fc.weight.data)
    np.testing.assert_array_equal(b.bn.running_mean, 3)
    state = a.state_dict()
    del state["bn.bias"]
    with pytest.raises(KeyError, match="bn.bias"):
        b.load_state_dict(state)


def test_freeze_and_train_modes():
    m = _Tiny().freeze()
    assert not any(p.requires_grad for p in m.parameters())
    assert len(m.trainable_registry()) == 0
    m.eval()
    assert not m.bn.training


def test_astype_casts_parameters_and_buffers():
    m = _Tiny().astype(np.float32)
    assert all(p.dtype == np.float32 for p in m.parameters())
    assert m.bn.running_var.dtype == np.float32


def test_kaiming_bounds():
    w = nn.kaiming_uniform((1000, 10), 10, np.random.default_rng(0))
    bound = np.sqrt(6 / 10)
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.95 * bound


def test_float32_forward_stays_float32():
    with precision("float32"):
        conv = nn.Conv2d(2, 3, 3, 1, 1, 0)
        y = conv(Tensor(np.ones((1, 2, 4, 4), dtype=np.float32)))
    assert y.dtype == np.float32
