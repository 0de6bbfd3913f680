"""Segmentation networks. Every network maps B×H×W×C to B×H×W×K probabilities."""

from __future__ import annotations

import copy

import numpy as np

from .. import nn
from ..preprocessing import log_ratio
from ..tensor import Tensor, concat, no_grad, reshape, transpose

MLP_HIDDEN = (20, 20)
UNET_CHANNELS = (8, 16, 32)
SCAN_REDUCTION = 16
FUSION_MLP_HIDDEN = (256, 128)
FUSION_CNN_CHANNELS = (64, 32, 16)
FUSION_DROPOUT = 0.2

# model kind -> pixel-wise (no spatial context) and raw-radiance input
PIXELWISE = {"ilr", "mlp", "scan", "combined-mlp"}
MODEL_KINDS = ("ilr", "mlp", "unet", "scan", "combined-mlp", "combined-cnn")


def _soundings(x: Tensor) -> tuple[Tensor, tuple]:
    B, H, W, C = x.shape
    return reshape(x, (B * H * W, C)), (B, H, W)


class PixelMLP(nn.Module):
    """Per-sounding C -> hidden... -> K logits with ReLU between layers."""

    def __init__(self, din, hidden, dout, rng):
        super().__init__()
        dims = (din,) + tuple(hidden) + (dout,)
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            setattr(self, f"fc{i + 1}", nn.Linear(dims[i], dims[i + 1], rng))

    def forward(self, x):
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i + 1}")(x)
            if i < self.n_layers - 1:
                x = nn.relu(x)
        return x


class MLPNet(nn.Module):
    def __init__(self, bands, classes, hidden=MLP_HIDDEN, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.mlp = PixelMLP(bands, hidden, classes, rng)

    def forward(self, x):
        flat, (B, H, W) = _soundings(x)
        return reshape(nn.softmax(self.mlp(flat), axis=-1), (B, H, W, -1))


class ConvBlock(nn.Module):
    """Two 3×3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1, rng)
        self.bn1 = nn.BatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, rng)
        self.bn2 = nn.BatchNorm(cout)

    def forward(self, x):
        x = nn.relu(self.bn1(self.conv1(x)))
        return nn.relu(self.bn2(self.conv2(x)))


class UNet(nn.Module):
    """Two pooling levels with a 32-channel bottleneck and mirrored decoder.

    enc1 (C->8) -> pool -> enc2 (8->16) -> pool -> enc3 (16->32)
    -> up 32->16, concat enc2 -> dec1 (32->16)
    -> up 16->8, concat enc1 -> dec2 (16->8) -> 1×1 conv 8->K.
    """

    def __init__(self, bands, classes, channels=UNET_CHANNELS, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        c1, c2, c3 = channels
        self.enc1 = ConvBlock(bands, c1, rng)
        self.enc2 = ConvBlock(c1, c2, rng)
        self.enc3 = ConvBlock(c2, c3, rng)
        self.up1 = nn.ConvTranspose2d(c3, c2, 3, 2, 1, 1, rng)
        self.dec1 = ConvBlock(2 * c2, c2, rng)
        self.up2 = nn.ConvTranspose2d(c2, c1, 3, 2, 1, 1, rng)
        self.dec2 = ConvBlock(2 * c1, c1, rng)
        self.head = nn.Conv2d(c1, classes, 1, 1, 0, rng)

    def logits(self, x):
        H, W = x.shape[1:3]
        if H % 4 or W % 4:
            raise ValueError(f"U-Net input must be a multiple of 4 in both spatial dims, got {H}x{W}")
        x = transpose(x, (0, 3, 1, 2))
        e1 = self.enc1(x)
        e2 = self.enc2(nn.max_pool2d(e1))
        e3 = self.enc3(nn.max_pool2d(e2))
        d1 = self.dec1(concat([self.up1(e3), e2], axis=1))
        d2 = self.dec2(concat([self.up2(d1), e1], axis=1))
        return transpose(self.head(d2), (0, 2, 3, 1))

    def forward(self, x):
        return nn.softmax(self.logits(x), axis=-1)


class SpectralAttention(nn.Module):
    """alpha = sigmoid(W2 relu(W1 mean_hw(x))), one weight per band and sample."""

    def __init__(self, bands, reduction=SCAN_REDUCTION, rng=None):
        super().__init__()
        hidden = max(1, bands // reduction)
        self.fc1 = nn.Linear(bands, hidden, rng)
        self.fc2 = nn.Linear(hidden, bands, rng)

    def forward(self, x):
        xbar = x.mean(axis=(1, 2))
        return nn.sigmoid(self.fc2(nn.relu(self.fc1(xbar))))


class SCANNet(nn.Module):
    def __init__(self, bands, classes, hidden=MLP_HIDDEN, reduction=SCAN_REDUCTION, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.attention = SpectralAttention(bands, reduction, rng)
        self.classifier = PixelMLP(bands, hidden, classes, rng)

    def forward(self, x, alpha=None):
        """``alpha`` overrides the computed attention (B×C array or tensor)."""
        B, H, W, C = x.shape
        if alpha is None:
            alpha = self.attention(x)
        elif not isinstance(alpha, Tensor):
            alpha = Tensor._wrap(np.broadcast_to(np.asarray(alpha, dtype=x.dtype), (B, C)).copy())
        att = x * reshape(alpha, (B, 1, 1, C))
        flat, _ = _soundings(att)
        return reshape(nn.softmax(self.classifier(flat), axis=-1), (B, H, W, -1))


class FusionMLPHead(nn.Module):
    def __init__(self, classes, hidden=FUSION_MLP_HIDDEN, dropout=FUSION_DROPOUT, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        dims = (2 * classes,) + tuple(hidden)
        self.n_hidden = len(hidden)
        for i in range(self.n_hidden):
            setattr(self, f"fc{i + 1}", nn.Linear(dims[i], dims[i + 1], rng))
            setattr(self, f"bn{i + 1}", nn.BatchNorm(dims[i + 1]))
            setattr(self, f"drop{i + 1}", nn.Dropout(dropout, rng))
        self.out = nn.Linear(dims[-1], classes, rng)

    def forward(self, p):
        flat, (B, H, W) = _soundings(p)
        h = flat
        for i in range(1, self.n_hidden + 1):
            h = getattr(self, f"drop{i}")(nn.relu(getattr(self, f"bn{i}")(getattr(self, f"fc{i}")(h))))
        return reshape(nn.softmax(self.out(h), axis=-1), (B, H, W, -1))


class FusionCNNHead(nn.Module):
    def __init__(self, classes, channels=FUSION_CNN_CHANNELS, dropout=FUSION_DROPOUT, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        dims = (2 * classes,) + tuple(channels)
        self.n_hidden = len(channels)
        for i in range(self.n_hidden):
            setattr(self, f"conv{i + 1}", nn.Conv2d(dims[i], dims[i + 1], 3, 1, 1, rng))
            setattr(self, f"bn{i + 1}", nn.BatchNorm(dims[i + 1]))
            setattr(self, f"drop{i + 1}", nn.Dropout(dropout, rng))
        self.out = nn.Conv2d(dims[-1], classes, 1, 1, 0, rng)

    def forward(self, p):
        h = transpose(p, (0, 3, 1, 2))
        for i in range(1, self.n_hidden + 1):
            h = getattr(self, f"drop{i}")(nn.relu(getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(h))))
        return nn.softmax(transpose(self.out(h), (0, 2, 3, 1)), axis=-1)


class CombinedNet(nn.Module):
    """Frozen U-Net and SCAN feeding a trainable fusion head."""

    def __init__(self, unet: UNet, scan: SCANNet, head: nn.Module):
        super().__init__()
        self.unet = unet.freeze().eval()
        self.scan = scan.freeze().eval()
        self.head = head

    def train(self, mode: bool = True):
        super().train(mode)
        self.unet.eval()
        self.scan.eval()
        return self

    def base_probs(self, x) -> Tensor:
        with no_grad():
            p = np.concatenate([self.unet(x).data, self.scan(x).data], axis=-1)
        return Tensor._wrap(p)

    def forward(self, x):
        return self.head(self.base_probs(x))

    def forward_from_probs(self, p_unet, p_scan):
        return self.head(Tensor._wrap(np.concatenate([np.asarray(getattr(p_unet, "data", p_unet)),
                                                      np.asarray(getattr(p_scan, "data", p_scan))], axis=-1)))


class IlrNet(nn.Module):
    """ILR classifier packaged as a module so it shares checkpoint plumbing."""

    def __init__(self, bands, classes, components):
        super().__init__()
        self.directions = nn.Parameter(np.zeros((components, bands)))
        self.class_weight = nn.Parameter(np.zeros((components, classes)))
        self.class_bias = nn.Parameter(np.zeros(classes))
        self.freeze()

    def forward(self, x):
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        beta = log_ratio(xd) @ self.directions.data.astype(np.float64).T
        z = beta @ self.class_weight.data.astype(np.float64) + self.class_bias.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return Tensor._wrap((e / e.sum(axis=-1, keepdims=True)).astype(self.directions.dtype))


# -- descriptors -------------------------------------------------------------


def describe(kind: str, bands: int, classes: int, **extra) -> dict:
    """Architecture descriptor; ``build_network`` reconstructs the exact registry."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    desc = {"kind": kind, "bands": int(bands), "classes": int(classes)}
    if kind == "mlp":
        desc["hidden"] = list(extra.get("hidden", MLP_HIDDEN))
    elif kind == "unet":
        desc["channels"] = list(extra.get("channels", UNET_CHANNELS))
        desc["geometry"] = {"conv": "k3 s1 p1", "pool": "2x2 s2", "levels": 2,
                            "upsample": "convT k3 s2 p1 op1"}
    elif kind == "scan":
        desc["hidden"] = list(extra.get("hidden", MLP_HIDDEN))
        desc["reduction"] = int(extra.get("reduction", SCAN_REDUCTION))
        desc["attention_hidden"] = max(1, bands // desc["reduction"])
    elif kind == "ilr":
        desc["components"] = int(extra["components"])
    else:
        key, default = ("hidden", FUSION_MLP_HIDDEN) if kind == "combined-mlp" else ("channels", FUSION_CNN_CHANNELS)
        desc[key] = list(extra.get(key, default))
        desc["dropout"] = float(extra.get("dropout", FUSION_DROPOUT))
        desc["bases"] = {
            "unet": extra.get("unet") or describe("unet", bands, classes),
            "scan": extra.get("scan") or describe("scan", bands, classes),
        }
    return desc


def build_network(desc: dict, rng=None) -> nn.Module:
    rng = np.random.default_rng(rng)
    kind, C, K = desc["kind"], desc["bands"], desc["classes"]
    if kind == "mlp":
        net = MLPNet(C, K, desc["hidden"], rng)
    elif kind == "unet":
        net = UNet(C, K, desc["channels"], rng)
    elif kind == "scan":
        net = SCANNet(C, K, desc["hidden"], desc["reduction"], rng)
    elif kind == "ilr":
        net = IlrNet(C, K, desc["components"])
    elif kind in ("combined-mlp", "combined-cnn"):
        unet = build_network(desc["bases"]["unet"], rng)
        scan = build_network(desc["bases"]["scan"], rng)
        if kind == "combined-mlp":
            head = FusionMLPHead(K, desc["hidden"], desc["dropout"], rng)
        else:
            head = FusionCNNHead(K, desc["channels"], desc["dropout"], rng)
        net = CombinedNet(unet, scan, head)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    net.descriptor = copy.deepcopy(desc)
    return net


def combine(kind: str, unet: UNet, scan: SCANNet, rng=None) -> CombinedNet:
    """Fusion network around already-trained base networks (deep-copied, frozen)."""
    C, K = unet.descriptor["bands"], unet.descriptor["classes"]
    desc = describe(kind, C, K, unet=unet.descriptor, scan=scan.descriptor)
    rng = np.random.default_rng(rng)
    if kind == "combined-mlp":
        head = FusionMLPHead(K, desc["hidden"], desc["dropout"], rng)
    elif kind == "combined-cnn":
        head = FusionCNNHead(K, desc["channels"], desc["dropout"], rng)
    else:
        raise ValueError(f"{kind!r} is not a fusion model")
    u, s = copy.deepcopy(unet), copy.deepcopy(scan)
    u.descriptor, s.descriptor = unet.descriptor, scan.descriptor
    net = CombinedNet(u, s, head)
    net.descriptor = desc
    return net


def trainable_count(net: nn.Module, include_batchnorm: bool = True) -> int:
    reg = net.trainable_registry()
    if include_batchnorm:
        return nn.param_count(reg)
    bn_names = set()
    for prefix, mod in _walk(net):
        if isinstance(mod, nn.BatchNorm):
            bn_names.update(prefix + n for n in ("weight", "bias"))
    return int(sum(t.size for n, t in reg.items() if n not in bn_names))


def _walk(mod, prefix=""):
    yield prefix, mod
    for name, child in mod.children():
        yield from _walk(child, prefix + name + ".")
