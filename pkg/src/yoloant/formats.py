"""Binary file formats: ATF tensors, ANTW weight containers and PPM (P6) images.

ATF layout::

    b"ATF1" | u8 dtype (0 = float32, 1 = float64) | u8 ndim (= 4)
    | 4 x u64 dims (N, C, H, W) | raw values, row-major

ANTW layout::

    b"ANTW" | u32 version | u32 count
    | count x (u16 name length | UTF-8 name | ATF tensor)

Every integer and value is little-endian.  Tensors of rank < 4 are stored with
leading singleton dims and restored to their manifest shape on load.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Dict, Iterable, Tuple

import numpy as np

from .errors import DimensionError, FormatError, ManifestError
from .params import ParamShape, learnable_leaves, set_leaf, tree_map

ATF_MAGIC = b"ATF1"
ANTW_MAGIC = b"ANTW"
ANTW_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def write_atf(f: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.dtype not in _CODES:
        raise FormatError(f"ATF stores float32/float64 only, got {x.dtype}")
    if x.ndim > 4:
        raise DimensionError(f"ATF stores at most 4 dims, got {x.ndim}")
    shape = (1,) * (4 - x.ndim) + x.shape
    f.write(ATF_MAGIC + struct.pack("<BB4Q", _CODES[x.dtype], 4, *shape))
    f.write(np.ascontiguousarray(x, dtype=_DTYPES[_CODES[x.dtype]]).tobytes())


def read_atf(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4, "ATF magic") != ATF_MAGIC:
        raise FormatError("not an ATF tensor (bad magic)")
    code, ndim, *dims = struct.unpack("<BB4Q", _read_exact(f, 34, "ATF header"))
    if code not in _DTYPES:
        raise FormatError(f"unknown ATF dtype code {code}")
    if ndim != 4:
        raise FormatError(f"ATF ndim must be 4, got {ndim}")
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.uint64))
    raw = _read_exact(f, count * dt.itemsize, "ATF data")
    return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_atf(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_atf(f, x)


def load_atf(path) -> np.ndarray:
    with open(path, "rb") as f:
        x = read_atf(f)
        if f.read(1):
            raise FormatError("trailing bytes after ATF tensor")
    return x


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------


def write_antw(f: BinaryIO, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    entries = list(entries)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate entry names in weight container")
    f.write(ANTW_MAGIC + struct.pack("<II", ANTW_VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        f.write(struct.pack("<H", len(raw)) + raw)
        write_atf(f, arr)


def read_antw(f: BinaryIO) -> Dict[str, np.ndarray]:
    if _read_exact(f, 4, "ANTW magic") != ANTW_MAGIC:
        raise FormatError("not an ANTW weight container (bad magic)")
    version, count = struct.unpack("<II", _read_exact(f, 8, "ANTW header"))
    if version != ANTW_VERSION:
        raise FormatError(f"unsupported ANTW version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "entry name length"))
        try:
            name = _read_exact(f, n, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not UTF-8: {exc}") from None
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = read_atf(f)
    if f.read(1):
        raise FormatError("trailing bytes after last ANTW entry")
    return out


def save_weights(path, params) -> int:
    """Write the learnable leaves of a parameter tree; returns the entry count."""
    entries = list(learnable_leaves(params))
    with open(path, "wb") as f:
        write_antw(f, entries)
    return len(entries)


def load_weights(path, template):
    """Fill a copy of ``template`` (arrays or :class:`ParamShape`) from ``path``.

    The container must hold exactly the template's learnable entries with
    matching element counts; otherwise :class:`ManifestError` lists the
    offending names.  Buffers (running statistics) are reset to 0 / 1.
    """
    with open(path, "rb") as f:
        stored = read_antw(f)
    return apply_weights(stored, template)


def apply_weights(stored: Dict[str, np.ndarray], template):
    want = dict(learnable_leaves(template))
    missing = set(want) - set(stored)
    extra = set(stored) - set(want)
    bad = [n for n in set(want) & set(stored) if stored[n].size != _leaf_shape_size(want[n])[1]]
    if missing or extra or bad:
        raise ManifestError(missing, extra, bad)
    dtype = next(iter(stored.values())).dtype if stored else np.dtype(np.float32)
    tree = tree_map(lambda leaf: _buffer_value(leaf, dtype), template)
    for name, leaf in want.items():
        shape, _ = _leaf_shape_size(leaf)
        set_leaf(tree, name, stored[name].reshape(shape))
    return tree


def _leaf_shape_size(leaf):
    if isinstance(leaf, ParamShape):
        return leaf.shape, leaf.size
    return np.shape(leaf), int(np.size(leaf))


def _buffer_value(leaf, dtype):
    shape, _ = _leaf_shape_size(leaf)
    fill = leaf.fill if isinstance(leaf, ParamShape) else None
    return np.ones(shape, dtype) if fill == "ones" else np.zeros(shape, dtype)


# ---------------------------------------------------------------------------
# PPM (P6)
# ---------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, honouring ``#`` comments."""
    pos, tokens = 0, []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary PPM to a float32 ``(1, 3, H, W)`` tensor scaled to [0, 1]."""
    tokens, start = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError("only binary PPM (P6) images are supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PPM header {w}x{h} maxval {maxval}")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * 3
    raster = data[start : start + n * dt.itemsize]
    if len(raster) != n * dt.itemsize:
        raise FormatError("truncated PPM raster")
    px = np.frombuffer(raster, dtype=dt).reshape(h, w, 3)
    # value/255 as specified for 8-bit images; deeper images scale by maxval
    scale = np.float32(255 if maxval <= 255 else maxval)
    return (px.astype(np.float32) / scale).transpose(2, 0, 1)[None].copy()


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())


def encode_ppm(img: np.ndarray) -> bytes:
    """Inverse of :func:`decode_ppm` for 8-bit images (used by tests and fixtures)."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    c, h, w = img.shape
    if c != 3:
        raise DimensionError(f"PPM needs 3 channels, got {c}")
    px = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()
