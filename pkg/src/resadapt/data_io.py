"""MDTB tensor files, MDCK checkpoints, datasets and synthetic multi-domain data.

MDTB record (little-endian, no padding)::

    b"MDTB" | u32 version=1 | u32 rank | u32 dims[rank] | u8 dtype | payload

dtype 0 = float32, 1 = float64, 2 = uint32.  MDCK checkpoint::

    b"MDCK" | u32 version=1 | u32 count | count x (u16 name_len | utf8 name | MDTB record)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, SizeMismatchError, VersionError
from .rng import CounterRNG, derive_seed

TENSOR_MAGIC = b"MDTB"
CKPT_MAGIC = b"MDCK"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u4"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


# -------------------------------------------------------------------- tensors

def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        t = t.reshape(1)
    dt = t.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise ConfigError(f"unsupported tensor dtype {t.dtype}")
    if t.ndim > 4:
        raise ConfigError(f"tensors have rank at most 4, got {t.ndim}")
    head = TENSOR_MAGIC + struct.pack(f"<II{t.ndim}I", VERSION, t.ndim, *t.shape)
    head += struct.pack("<B", DTYPE_CODES[dt])
    return head + np.ascontiguousarray(t, dtype=dt).tobytes()


def _need(buf, off: int, n: int, what: str) -> None:
    if off + n > len(buf):
        raise SizeMismatchError(f"truncated {what}: need {n} bytes at offset {off}, have {len(buf) - off}")


def decode_tensor(buf, offset: int = 0):
    """Decode one MDTB record starting at ``offset``; returns ``(array, end_offset)``."""
    _need(buf, offset, 12, "tensor header")
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise BadMagicError(f"expected {TENSOR_MAGIC!r}, found {bytes(buf[offset:offset + 4])!r}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise VersionError(f"unsupported tensor version {version}")
    if rank > 4:
        raise SizeMismatchError(f"tensor rank {rank} exceeds 4")
    off = offset + 12
    _need(buf, off, 4 * rank + 1, "tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    code = buf[off]
    off += 1
    if code not in CODE_DTYPES:
        raise SizeMismatchError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    _need(buf, off, nbytes, "tensor payload")
    arr = np.frombuffer(bytes(buf[off:off + nbytes]), dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), off + nbytes


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, t: np.ndarray) -> None:
    _atomic_write(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise SizeMismatchError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------- checkpoints

def encode_checkpoint(entries: dict) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, t in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(t))
    return b"".join(parts)


def decode_checkpoint(buf) -> dict:
    _need(buf, 0, 12, "checkpoint header")
    if bytes(buf[:4]) != CKPT_MAGIC:
        raise BadMagicError(f"expected {CKPT_MAGIC!r}, found {bytes(buf[:4])!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        _need(buf, off, 2, "entry name length")
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        _need(buf, off, n, "entry name")
        name = bytes(buf[off:off + n]).decode("utf-8")
        off += n
        if name in out:
            raise ConfigError(f"duplicate checkpoint entry {name!r}")
        out[name], off = decode_tensor(buf, off)
    if off != len(buf):
        raise SizeMismatchError(f"{len(buf) - off} trailing bytes after checkpoint entries")
    return out


def save_checkpoint(path, entries: dict) -> None:
    _atomic_write(path, encode_checkpoint(entries))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------- network <-> checkpoint

_TOPO = {"series": 0, "parallel": 1}
_MACRO_BITS = ("early", "mid", "late")


def network_entries(net) -> dict:
    cfg = net.cfg
    entries = {"meta/config": np.array(list(cfg.macro_widths) + [
        cfg.blocks_per_macro, cfg.filter_size, cfg.in_channels,
        0 if cfg.precision == "single" else 1], dtype=np.uint32)}
    for d, info in net.domains.items():
        pl = info.placement
        vec = [info.num_classes, int(d == net.base_domain), int(pl is not None)]
        drop = -1.0
        if pl is not None:
            vec += [_TOPO[pl.topology]] + [int(m in pl.macros) for m in _MACRO_BITS]
            vec += [0 if pl.within == "both" else 1, int(pl.series_bn)]
            drop = -1.0 if pl.dropout is None else pl.dropout
        entries[f"meta/domain/{d}/info"] = np.array(vec, dtype=np.uint32)
        entries[f"meta/domain/{d}/dropout"] = np.array([drop], dtype=np.float64)
    for name in sorted(net.params):
        entries[name] = net.params[name]
    return entries


def save_network(path, net) -> None:
    save_checkpoint(path, network_entries(net))


def network_from_entries(entries: dict):
    from .network import Network, NetworkConfig, PlacementConfig, DomainInfo

    c = [int(v) for v in entries["meta/config"]]
    cfg = NetworkConfig(tuple(c[:3]), c[3], c[4], c[5], "single" if c[6] == 0 else "double")
    net = Network(cfg)
    for name, t in entries.items():
        if name.startswith("meta/domain/") and name.endswith("/info"):
            d = name[len("meta/domain/"):-len("/info")]
            v = [int(x) for x in t]
            pl = None
            if v[2]:
                drop = float(entries[f"meta/domain/{d}/dropout"][0])
                pl = PlacementConfig(
                    macros=tuple(m for m, bit in zip(_MACRO_BITS, v[4:7]) if bit),
                    within="both" if v[7] == 0 else "second",
                    topology="series" if v[3] == 0 else "parallel",
                    dropout=None if drop < 0 else drop, series_bn=bool(v[8]))
            net.domains[d] = DomainInfo(v[0], pl)
            if v[1]:
                net.base_domain = d
        elif not name.startswith("meta/"):
            net.params[name] = t
    return net


def load_network(path):
    return network_from_entries(load_checkpoint(path))


# ------------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray      # N x H x W x C float32
    labels: np.ndarray      # N uint32
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "images.mdtb", ds.images.astype(np.float32))
    save_tensor(d / "labels.mdtb", ds.labels.astype(np.uint32))
    _atomic_write(d / "meta.txt", f"name={ds.name}\nnum_classes={ds.num_classes}\n".encode())


def read_key_values(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    images = load_tensor(d / "images.mdtb")
    labels = load_tensor(d / "labels.mdtb")
    meta = read_key_values(d / "meta.txt") if (d / "meta.txt").exists() else {}
    k = int(meta.get("num_classes", int(labels.max()) + 1 if labels.size else 0))
    return Dataset(images, labels, k, meta.get("name", d.name))


def subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified per-class subsample, deterministic given ``seed``."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        n = max(1, int(round(fraction * idx.size)))
        perm = CounterRNG(derive_seed(seed, c)).permutation(idx.size)
        keep.append(np.sort(idx[perm[:n]]))
    return ds.subset(np.sort(np.concatenate(keep)))


def import_bitmap_dirs(root, name: str | None = None) -> Dataset:
    """Build a dataset from ``root/<class>/*.bmp`` (8-bit RGB), classes in sorted order."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for c, cdir in enumerate(classes):
        for f in sorted(cdir.glob("*.bmp")):
            with Image.open(f) as im:
                if im.mode != "RGB":
                    raise ConfigError(f"{f}: expected 8-bit RGB, got mode {im.mode}")
                images.append(np.asarray(im, dtype=np.float32) / 255.0)
            labels.append(c)
    if not images:
        raise ConfigError(f"no .bmp images under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"images differ in size: {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(labels, np.uint32), len(classes), name or root.name)


# ------------------------------------------------------------ synthetic domains

@dataclass(frozen=True)
class SyntheticDomainSpec:
    seed: int
    num_classes: int = 5
    per_class: int = 100
    size: int = 32
    channels: int = 3
    palette_rotation: float = 0.0
    texture_freq: float = 3.0
    noise_sigma: float = 0.1
    name: str = "synthetic"


def palette(rotation: float, channels: int = 3) -> np.ndarray:
    k = np.arange(channels)
    return 0.5 + 0.5 * np.cos(rotation + 2.0 * np.pi * k / channels)


def generate_domain(spec: SyntheticDomainSpec) -> Dataset:
    """Oriented sinusoidal gratings, one orientation per class, tinted by a rotating palette.

    Draw order from the counter PRNG: per-image (amplitude, phase) uniforms for
    all images first, then pixel noise for all images in row-major order.
    """
    if spec.num_classes < 2:
        raise ConfigError("need at least two classes")
    n = spec.num_classes * spec.per_class
    labels = (np.arange(n) % spec.num_classes).astype(np.uint32)
    rng = CounterRNG(spec.seed)
    jitter = rng.uniform(2 * n).reshape(n, 2)
    amp = 0.6 + 0.4 * jitter[:, 0]
    phase = (jitter[:, 1] - 0.5) * (np.pi / 2)
    theta = labels * np.pi / spec.num_classes + spec.palette_rotation
    coords = (np.arange(spec.size) + 0.5) / spec.size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    arg = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    grating = np.sin(2.0 * np.pi * spec.texture_freq * arg + phase[:, None, None])
    tone = 0.5 + 0.5 * amp[:, None, None] * grating
    images = tone[..., None] * palette(spec.palette_rotation, spec.channels)
    if spec.noise_sigma > 0:
        images = images + spec.noise_sigma * rng.normal(images.size).reshape(images.shape)
    return Dataset(images.astype(np.float32), labels, spec.num_classes, spec.name)
