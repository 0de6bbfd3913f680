import numpy as np
import pytest

from hypseg import nn
from hypseg import tensor as T
from hypseg.models.networks import (
    MODEL_KINDS,
    CombinedNet,
    SCANNet,
    UNet,
    build_network,
    combine,
    describe,
    trainable_count,
)
from hypseg.metrics import macro_f1
from hypseg.tensor import Tensor, no_grad
from hypseg.training import Adam, weighted_ce

from oracles import numeric_grad, rel_error

SHAPE_C, SHAPE_K = 1080, 3


def _net(kind, C=SHAPE_C, K=SHAPE_K, seed=0, **extra):
    if kind == "ilr":
        extra.setdefault("components", 23)
    return build_network(describe(kind, C, K, **extra), rng=seed)


@pytest.mark.parametrize("kind,expected", [
    ("mlp", 22_103),
    ("unet", 110_547),
    ("scan", 167_970),
    ("combined-mlp", 35_843),
    ("combined-cnn", 26_883),
])
def test_parameter_counts(kind, expected):
    assert trainable_count(_net(kind)) == expected


def test_counts_without_batchnorm_affine():
    assert trainable_count(_net("unet"), include_batchnorm=False) == 110_227
    assert trainable_count(_net("combined-mlp"), include_batchnorm=False) == 35_075
    assert trainable_count(_net("combined-cnn"), include_batchnorm=False) == 26_659


def test_combined_counts_exclude_frozen_bases():
    net = _net("combined-cnn")
    total = sum(p.size for p in net.parameters())
    assert total == trainable_count(net) + trainable_count(_net("unet")) + trainable_count(_net("scan"))


@pytest.mark.parametrize("kind", MODEL_KINDS)
@pytest.mark.parametrize("B,H,W", [(1, 8, 8), (2, 12, 16)])
def test_output_is_per_sounding_distribution(kind, B, H, W):
    net = _net(kind, C=20, K=4).eval()
    x = np.random.default_rng(0).uniform(0.5, 2.0, (B, H, W, 20))
    with no_grad():
        p = net(Tensor(x)).data
    assert p.shape == (B, H, W, 4)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_unet_rejects_sizes_not_divisible_by_four():
    with pytest.raises(ValueError, match="multiple of 4"):
        _net("unet", C=5, K=2)(Tensor(np.zeros((1, 10, 8, 5))))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_descriptor_rebuilds_identical_registry(kind):
    a = _net(kind, C=30, K=3, seed=1)
    b = build_network(a.descriptor, rng=99)
    assert b.descriptor == a.descriptor
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb)
    assert all(sa[k].shape == sb[k].shape for k in sa)


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown model kind"):
        describe("transformer", 3, 2)


def test_scan_pixel_order_invariance():
    # no spatial mixing: permuting soundings permutes the output
    net = _net("scan", C=16, K=3)
    x = np.random.default_rng(2).standard_normal((1, 4, 4, 16))
    perm = np.random.default_rng(3).permutation(16)
    xp = x.reshape(1, 16, 16)[:, perm].reshape(1, 4, 4, 16)
    with no_grad():
        p = net(Tensor(x)).data.reshape(16, -1)
        pp = net(Tensor(xp)).data.reshape(16, -1)
    np.testing.assert_allclose(pp, p[perm], atol=1e-12)


def test_scan_unit_attention_override_equals_plain_mlp():
    net = _net("scan", C=8, K=3)
    x = np.random.default_rng(4).standard_normal((2, 3, 3, 8))
    with no_grad():
        ones = net(Tensor(x), alpha=np.ones(8)).data
        direct = net.classifier(Tensor(x.reshape(-1, 8))).data
    e = np.exp(direct - direct.max(-1, keepdims=True))
    np.testing.assert_allclose(ones.reshape(-1, 3), e / e.sum(-1, keepdims=True), atol=1e-12)


def test_attention_weights_lie_in_unit_interval():
    net = _net("scan", C=32, K=3)
    with no_grad():
        a = net.attention(Tensor(np.random.default_rng(5).standard_normal((3, 4, 4, 32)) * 10)).data
    assert a.shape == (3, 32) and (a > 0).all() and (a < 1).all()


def _param_grad_check(net, x, seed, entries=4, h=1e-5):
    """Central differences on a few entries of every trainable parameter.

    The error is scaled by the largest gradient in the network: a conv bias
    feeding a training-mode batch norm has an exactly zero gradient, and
    relative error on that alone measures round-off.
    """
    out = net(Tensor(x))
    R = np.random.default_rng(seed).standard_normal(out.shape)
    net.zero_grad()
    (out * R).sum().backward()
    rng = np.random.default_rng(seed + 1)

    def scalar():
        with no_grad():
            return float((net(Tensor(x)).data * R).sum())

    ana, num = [], []
    for p in net.trainable_registry().values():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(entries, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = scalar()
            flat[i] = old - h
            fm = scalar()
            flat[i] = old
            ana.append(p.grad.reshape(-1)[i])
            num.append((fp - fm) / (2 * h))
    return rel_error(ana, num)


@pytest.fixture
def smooth_relu(monkeypatch):
    # softplus in place of relu so +-h probes never straddle a kink
    monkeypatch.setattr(nn, "relu", lambda t: T.log(T.exp(t) + 1.0))


def test_mlp_parameter_gradients():
    for i in range(5):
        x = np.random.default_rng(100 + i).standard_normal((2, 4, 4, 6))
        assert _param_grad_check(_net("mlp", C=6, K=3, seed=i), x, seed=i) < 1e-4


@pytest.mark.parametrize("kind", ["scan", "unet"])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_network_parameter_gradients(kind, mode, smooth_relu):
    for i in range(5):
        net = _net(kind, C=6, K=3, seed=i).train(mode == "train")
        x = np.random.default_rng(100 + i).standard_normal((2, 8, 8, 6))
        assert _param_grad_check(net, x, seed=i) < 1e-5


@pytest.mark.parametrize("kind", ["combined-mlp", "combined-cnn"])
def test_fusion_head_gradients(kind, smooth_relu):
    for i in range(5):
        # eval: dropout masks would differ between probes
        net = _net(kind, C=6, K=3, seed=i).eval()
        x = np.random.default_rng(200 + i).standard_normal((2, 4, 4, 6))
        assert _param_grad_check(net, x, seed=i) < 1e-5


def test_scan_input_gradient_through_attention():
    net = _net("scan", C=6, K=3, seed=3)
    x = np.random.default_rng(7).standard_normal((2, 2, 3, 6))
    t = Tensor(x, requires_grad=True)
    out = net(t)
    R = np.random.default_rng(8).standard_normal(out.shape)
    (out * R).sum().backward()

    def scalar():
        with no_grad():
            return float((net(Tensor(x)).data * R).sum())

    assert rel_error(t.grad, numeric_grad(scalar, x)) < 1e-4


def test_combined_bases_stay_frozen_through_training_step():
    unet, scan = _net("unet", C=6, K=3), _net("scan", C=6, K=3)
    net = combine("combined-cnn", unet, scan, rng=0)
    before = {k: v.copy() for k, v in net.state_dict().items() if k.startswith(("unet.", "scan."))}
    net.train()
    assert not net.unet.training and not net.scan.training
    out = net(Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 6))))
    (out * 1.0).sum().backward()
    assert all(p.grad is None for p in net.unet.parameters() + net.scan.parameters())
    assert all(p.grad is not None for p in net.head.parameters())
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    # the originals were copied, not shared
    assert unet.parameters()[0] is not net.unet.parameters()[0]


def test_combine_rejects_non_fusion_kind():
    with pytest.raises(ValueError):
        combine("unet", _net("unet", C=4, K=2), _net("scan", C=4, K=2))


def test_forward_from_probs_matches_forward():
    net = _net("combined-mlp", C=6, K=3).eval()
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 4, 6)))
    with no_grad():
        a = net(x).data
        b = net.forward_from_probs(net.unet(x), net.scan(x)).data
    np.testing.assert_array_equal(a, b)
    assert isinstance(net, CombinedNet) and isinstance(net.unet, UNet) and isinstance(net.scan, SCANNet)


def test_zero_attention_weights_halve_the_input():
    net = _net("scan", C=16, K=3)
    for p in net.attention.parameters():
        p.data[...] = 0
    x = np.random.default_rng(6).standard_normal((2, 3, 3, 16))
    with no_grad():
        assert np.all(net.attention(Tensor(x)).data == 0.5)
        np.testing.assert_allclose(net(Tensor(x)).data, net(Tensor(x), alpha=np.full(16, 0.5)).data, atol=0)


@pytest.mark.parametrize("kind", ["mlp", "ilr"])
def test_pixelwise_models_are_permutation_equivariant(kind):
    net = _net(kind, C=8, K=3, seed=2)
    if kind == "ilr":
        rng = np.random.default_rng(0)
        net.directions.data[...] = 0
        net.directions.data[:3] = np.linalg.qr(rng.standard_normal((8, 3)))[0].T
        net.class_weight.data[...] = rng.standard_normal(net.class_weight.shape)
    x = np.random.default_rng(3).uniform(0.5, 2.0, (1, 5, 4, 8))
    perm = np.random.default_rng(4).permutation(20)
    xp = x.reshape(1, 20, 8)[:, perm].reshape(1, 5, 4, 8)
    with no_grad():
        p = net(Tensor(x)).data.reshape(20, -1)
        pp = net(Tensor(xp)).data.reshape(20, -1)
    np.testing.assert_array_equal(pp, p[perm])
    # identical spectra at two soundings give identical outputs
    x[0, 1, 1] = x[0, 3, 2]
    with no_grad():
        out = net(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 1, 1], out[0, 3, 2])


def test_fusion_cnn_translation_consistency():
    head = _net("combined-cnn", C=6, K=3, seed=5).eval().head
    rng = np.random.default_rng(9)
    p = rng.dirichlet(np.ones(3), size=(1, 20, 20, 2)).reshape(1, 20, 20, 6)
    dy, dx = 2, 3
    shifted = np.roll(p, (dy, dx), axis=(1, 2))
    with no_grad():
        a = head(Tensor(p)).data
        b = head(Tensor(shifted)).data
    # receptive field is 7x7 (three 3x3 convs): compare away from borders and the wrap seam
    m = 4
    np.testing.assert_allclose(b[0, dy + m:20 - m, dx + m:20 - m], a[0, m:20 - dy - m, m:20 - dx - m], atol=1e-12)


def test_fusion_head_reproduces_identical_one_hot_bases():
    net = _net("combined-mlp", C=6, K=3, seed=0)
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, (2, 6, 6))
    onehot = np.eye(3)[y]
    opt = Adam(net.parameters(), lr=1e-2)
    net.train()
    for _ in range(150):
        loss = weighted_ce(net.forward_from_probs(onehot, onehot), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    with no_grad():
        pred = net.forward_from_probs(onehot, onehot).data.argmax(-1)
    assert macro_f1(pred, y, 3) == 1.0
