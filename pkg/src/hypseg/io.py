"""Binary scene container (HSC), checkpoints (HSCK) and raster exports.

HSC layout, little-endian::

    "HSC1" | version u16 | H u32 | W u32 | C u32 | K u32 | flags u8
    float32 cube, index ((h*W)+w)*C+c
    [u8 mask H*W]                       if flags bit0

flags bit1 marks a probability cube (C == K class bands).

HSCK layout, little-endian::

    "HSCK" | version u16 | header length u32 | JSON header (utf-8)
    record count u32, then per record:
    name length u16 | name | rank u8 | dims u32 * rank | float32 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HSC_MAGIC = b"HSC1"
HSC_VERSION = 1
HSC_HEADER = struct.Struct("<4sHIIIIB")
FLAG_MASK = 0x01
FLAG_PROBS = 0x02

CKPT_MAGIC = b"HSCK"
CKPT_VERSION = 1

CLASS_NAMES = {
    3: ["background", "cloud", "shadow"],
    4: ["background", "cloud", "shadow", "dark_surface"],
}


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


# -- HSC ------------------------------------------------------------------------


def encode_hsc(cube: np.ndarray, mask: np.ndarray | None = None, n_classes: int = 0, probs: bool = False) -> bytes:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be H x W x C, got {cube.shape}")
    H, W, C = cube.shape
    flags = (FLAG_MASK if mask is not None else 0) | (FLAG_PROBS if probs else 0)
    if probs:
        n_classes = C
    parts = [HSC_HEADER.pack(HSC_MAGIC, HSC_VERSION, H, W, C, n_classes, flags),
             np.ascontiguousarray(cube, dtype="<f4").tobytes()]
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (H, W):
            raise ValueError(f"mask shape {mask.shape} does not match cube {(H, W)}")
        if mask.size and (mask.min() < 0 or mask.max() > 255):
            raise ValueError("mask labels must fit in one byte")
        parts.append(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


@dataclass
class HscScene:
    cube: np.ndarray
    mask: np.ndarray | None
    n_classes: int
    is_probability: bool


def decode_hsc(buf: bytes) -> HscScene:
    if len(buf) < 4 or buf[:4] != HSC_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {HSC_MAGIC!r}")
    if len(buf) < HSC_HEADER.size:
        raise TruncatedPayloadError("truncated header")
    _, version, H, W, C, K, flags = HSC_HEADER.unpack_from(buf)
    if version != HSC_VERSION:
        raise VersionMismatchError(f"HSC version {version} is not supported (expected {HSC_VERSION})")
    n_cube = 4 * H * W * C
    n_mask = H * W if flags & FLAG_MASK else 0
    need = HSC_HEADER.size + n_cube + n_mask
    if len(buf) < need:
        raise TruncatedPayloadError(f"truncated payload: {len(buf)} bytes, expected {need}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload")
    off = HSC_HEADER.size
    cube = np.frombuffer(buf, dtype="<f4", count=H * W * C, offset=off).reshape(H, W, C).astype(np.float32)
    mask = None
    if n_mask:
        mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=off + n_cube).reshape(H, W).copy()
    return HscScene(cube, mask, K, bool(flags & FLAG_PROBS))


def write_hsc(path, cube, mask=None, n_classes: int = 0, probs: bool = False) -> None:
    Path(path).write_bytes(encode_hsc(cube, mask, n_classes, probs))


def read_hsc(path) -> HscScene:
    return decode_hsc(Path(path).read_bytes())


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    header: dict
    tensors: "dict[str, np.ndarray]"

    @property
    def descriptor(self) -> dict:
        return self.header["descriptor"]


def encode_checkpoint(tensors, header: dict) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}")
    try:
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != CKPT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version} is not supported")
        off = 10
        header = json.loads(bytes(buf[off:off + hlen]).decode())
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off:off + nlen]).decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(buf):
                raise TruncatedPayloadError(f"truncated payload in tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise TruncatedPayloadError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes in checkpoint")
    return Checkpoint(header, tensors)


def checkpoint_header(net, train_config=None, stats=None, fold=None, metadata=None) -> dict:
    return {
        "descriptor": net.descriptor,
        "train_config_digest": None if train_config is None else train_config.digest(),
        "stats_digest": None if stats is None else stats.digest(),
        "fold": fold,
        "metadata": metadata or {},
    }


def save_checkpoint(path, net, train_config=None, stats=None, fold=None, metadata=None) -> bytes:
    data = encode_checkpoint(net.state_dict(), checkpoint_header(net, train_config, stats, fold, metadata))
    Path(path).write_bytes(data)
    return data


def validate_state(expected: dict, found: dict) -> None:
    """Raise ArchitectureMismatchError naming the first differing name or shape."""
    exp_items, got_items = list(expected.items()), list(found.items())
    for (en, ea), (gn, ga) in zip(exp_items, got_items):
        if en != gn or tuple(np.shape(ea)) != tuple(np.shape(ga)):
            raise ArchitectureMismatchError(
                f"architecture mismatch at parameter {en!r} {tuple(np.shape(ea))}: "
                f"checkpoint has {gn!r} {tuple(np.shape(ga))}"
            )
    if len(exp_items) != len(got_items):
        longer = exp_items if len(exp_items) > len(got_items) else got_items
        name, arr = longer[min(len(exp_items), len(got_items))]
        side = "missing from checkpoint" if longer is exp_items else "unexpected in checkpoint"
        raise ArchitectureMismatchError(f"architecture mismatch: parameter {name!r} {tuple(np.shape(arr))} {side}")


def load_checkpoint(path, net=None):
    """Rebuild the network from the embedded descriptor (or load into ``net``).

    Returns ``(net, checkpoint)``.
    """
    from .models.networks import build_network

    ckpt = decode_checkpoint(Path(path).read_bytes())
    if net is None:
        from .tensor import precision

        with precision("float32"):
            net = build_network(ckpt.descriptor, 0)
    else:
        kind = getattr(net, "descriptor", {}).get("kind")
        if kind is not None and kind != ckpt.descriptor.get("kind"):
            validate_state(net.state_dict(), ckpt.tensors)
            raise ArchitectureMismatchError(
                f"architecture mismatch: checkpoint holds {ckpt.descriptor.get('kind')!r}, target is {kind!r}"
            )
    validate_state(net.state_dict(), ckpt.tensors)
    net.astype(np.float32)
    net.load_state_dict(ckpt.tensors)
    if net.descriptor.get("kind", "").startswith("combined"):
        net.unet.freeze().eval()
        net.scan.freeze().eval()
    net.eval()
    return net, ckpt


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- rasters ----------------------------------------------------------------------


def write_mask_png(path, mask: np.ndarray, n_classes: int | None = None) -> None:
    """8-bit grayscale PNG, one byte per sounding holding the class index,
    plus a JSON sidecar with the class-name palette."""
    from PIL import Image

    mask = np.asarray(mask, dtype=np.uint8)
    Image.fromarray(mask).save(path, format="PNG")
    k = n_classes if n_classes is not None else int(mask.max()) + 1
    names = CLASS_NAMES.get(k, [f"class_{i}" for i in range(k)])
    palette = {"classes": [{"index": i, "name": names[i]} for i in range(k)]}
    Path(str(path) + ".json").write_text(json.dumps(palette, indent=2, sort_keys=True))


def read_mask_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.array(img, dtype=np.uint8)


def write_matrix_png(path, matrix: np.ndarray, cell: int = 32) -> None:
    """Grayscale rendering of a matrix scaled to 0..255 (largest cell = white)."""
    from PIL import Image

    m = np.asarray(matrix, dtype=np.float64)
    top = m.max()
    scaled = np.zeros_like(m) if top <= 0 else m / top
    img = np.kron(np.round(255 * scaled).astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    Image.fromarray(img).save(path, format="PNG")
