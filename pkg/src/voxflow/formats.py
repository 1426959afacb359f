"""Binary lattice formats and run manifests.

``.vxg`` (dense)::

    b"VXG1" | u32 H | u32 W | u32 D | u32 C | H*W*D*C f32

Values are little-endian and x-fastest: the flat order is that of the
``(H, W, D, C)`` array in Fortran order, so x varies fastest, then y, z, and
the channel index slowest.

``.vxs`` (sparse)::

    b"VXS1" | u32 N | u32 C | u32 count | count * (u16 x, u16 y, u16 z, u16 pad, C f32)

Records are written in canonical coordinate order. Both readers reject
non-finite payloads, and both writers refuse to produce them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lattice import BinaryMask3D, DenseLatentGrid, SoftMask3D, SparseLatentSet

VXG_MAGIC = b"VXG1"
VXS_MAGIC = b"VXS1"
_F32 = np.dtype("<f4")


def _to_f32(values: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{what}: refusing to write non-finite values")
    with np.errstate(over="ignore"):
        out = v.astype(_F32)
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{what}: values overflow float32")
    return out


def encode_vxg(grid: DenseLatentGrid) -> bytes:
    h, w, d = grid.dims
    header = VXG_MAGIC + struct.pack("<4I", h, w, d, grid.channels)
    payload = _to_f32(grid.values, "vxg").ravel(order="F")
    return header + payload.tobytes()


def decode_vxg(data: bytes, source: str = "<bytes>") -> DenseLatentGrid:
    if len(data) < 20 or data[:4] != VXG_MAGIC:
        raise FormatError(f"{source}: not a VXG1 file")
    h, w, d, c = struct.unpack_from("<4I", data, 4)
    count = h * w * d * c
    if count == 0 or len(data) != 20 + 4 * count:
        raise FormatError(f"{source}: payload size does not match header {h}x{w}x{d}x{c}")
    flat = np.frombuffer(data, dtype=_F32, count=count, offset=20)
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{source}: non-finite value in payload")
    return DenseLatentGrid(flat.reshape((h, w, d, c), order="F").astype(np.float64))


def encode_vxs(slat: SparseLatentSet) -> bytes:
    n, c, count = slat.resolution, slat.channels, len(slat)
    if n > 65536:
        raise FormatError("vxs coordinates are u16; resolution too large")
    header = VXS_MAGIC + struct.pack("<3I", n, c, count)
    rec = np.dtype([("xyz", "<u2", (4,)), ("f", _F32, (c,))])
    body = np.zeros(count, dtype=rec)
    body["xyz"][:, :3] = slat.coords
    body["f"] = _to_f32(slat.feats, "vxs").reshape(count, c)
    return header + body.tobytes()


def decode_vxs(data: bytes, source: str = "<bytes>") -> SparseLatentSet:
    if len(data) < 16 or data[:4] != VXS_MAGIC:
        raise FormatError(f"{source}: not a VXS1 file")
    n, c, count = struct.unpack_from("<3I", data, 4)
    rec = np.dtype([("xyz", "<u2", (4,)), ("f", _F32, (c,))])
    if len(data) != 16 + rec.itemsize * count:
        raise FormatError(f"{source}: payload size does not match header count {count}")
    body = np.frombuffer(data, dtype=rec, count=count, offset=16)
    feats = body["f"].astype(np.float64).reshape(count, c)
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{source}: non-finite value in payload")
    try:
        return SparseLatentSet(body["xyz"][:, :3].astype(np.int64), feats, n)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def write_vxg(path, grid: DenseLatentGrid) -> Path:
    path = Path(path)
    path.write_bytes(encode_vxg(grid))
    return path


def read_vxg(path) -> DenseLatentGrid:
    path = Path(path)
    return decode_vxg(path.read_bytes(), str(path))


def write_vxs(path, slat: SparseLatentSet) -> Path:
    path = Path(path)
    path.write_bytes(encode_vxs(slat))
    return path


def read_vxs(path) -> SparseLatentSet:
    path = Path(path)
    return decode_vxs(path.read_bytes(), str(path))


def write_mask(path, mask: BinaryMask3D | SoftMask3D) -> Path:
    if isinstance(mask, BinaryMask3D):
        values = mask.bits.astype(np.float64)
    else:
        values = mask.weights
    return write_vxg(path, DenseLatentGrid(values[..., None]))


def read_mask(path, soft: bool = False) -> BinaryMask3D | SoftMask3D:
    grid = read_vxg(path)
    if grid.channels != 1:
        raise FormatError(f"{path}: mask files carry exactly one channel, found {grid.channels}")
    v = grid.values[..., 0]
    if soft:
        return SoftMask3D(v)
    if not np.all((v == 0.0) | (v == 1.0)):
        raise FormatError(f"{path}: binary mask values must be 0 or 1")
    return BinaryMask3D(v == 1.0)


# -- checksums and manifests -------------------------------------------------


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def sha256_array(arr: np.ndarray) -> str:
    """Checksum of the little-endian float64 encoding of ``arr`` plus its shape."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    h = hashlib.sha256(repr(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def write_manifest(path, body: dict, volatile: dict | None = None) -> Path:
    """Write ``body`` (checksummed, deterministic) and ``volatile`` (e.g. timestamps).

    ``body_sha256`` covers only ``body``, so two identical runs produce the same
    digest even though their volatile fields differ.
    """
    text = json.dumps(body, sort_keys=True, indent=2)
    doc = {"body": body, "body_sha256": sha256_bytes(text.encode()), "volatile": volatile or {}}
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def write_keyvalue(path, items: dict) -> Path:
    lines = [f"{k} = {_kv_value(v)}" for k, v in items.items()]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def _kv_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_kv_value(x) for x in v)
    return str(v)
