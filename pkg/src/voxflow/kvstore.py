"""Attention key/value store captured during inversion, and the masked replacement rule.

Entries are keyed by :class:`KVKey`. Positional information is not part of
the key: a store records its token-coordinate layout once and every entry
must conform to it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, CacheMissError, CollisionError, FormatError, ShapeError
from .formats import sha256_bytes
from .lattice import index_of

STAGES = ("ST", "SLAT")


def time_hex(t: float) -> str:
    """Bit pattern of a float64 time, used to name files and report keys unambiguously."""
    return struct.pack(">d", float(t)).hex()


@dataclass(frozen=True)
class KVKey:
    stage: str
    eval_time: float
    layer_id: int
    attn_type: str = "self"
    block_order: int = 0
    branch: str = "cond"

    def describe(self) -> str:
        return (
            f"KVKey(stage={self.stage}, eval_time={self.eval_time!r} [0x{time_hex(self.eval_time)}], "
            f"layer_id={self.layer_id}, attn_type={self.attn_type}, "
            f"block_order={self.block_order}, branch={self.branch})"
        )


@dataclass(frozen=True, eq=False)
class KVEntry:
    K: np.ndarray
    V: np.ndarray

    @property
    def token_count(self) -> int:
        return int(self.K.shape[0])


@dataclass(eq=False)
class KVCacheStore:
    """In-memory map ``KVKey -> KVEntry`` for one stage.

    ``layout`` is the ``(tokens, 3)`` array of token coordinates; it is fixed
    by the first write if not given up front.
    """

    stage: str
    layout: np.ndarray | None = None
    entries: dict = field(default_factory=dict)
    hits: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.layout is not None:
            self.layout = _frozen_layout(self.layout)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: KVKey) -> bool:
        return key in self.entries

    @property
    def token_count(self) -> int | None:
        return None if self.layout is None else len(self.layout)

    def bind_layout(self, layout: np.ndarray) -> None:
        layout = np.asarray(layout, dtype=np.int64)
        if self.layout is None:
            self.layout = _frozen_layout(layout)
        elif self.layout.shape != layout.shape or not np.array_equal(self.layout, layout):
            raise AlignmentError(f"{self.stage} store: token layout differs from the one already recorded")

    def put(self, key: KVKey, K: np.ndarray, V: np.ndarray) -> None:
        if key.stage != self.stage:
            raise AlignmentError(f"key stage {key.stage} written to {self.stage} store")
        if key in self.entries:
            raise CollisionError(f"duplicate cache write for {key.describe()}")
        K = np.array(K, dtype=np.float64)
        V = np.array(V, dtype=np.float64)
        if K.shape != V.shape:
            raise ShapeError(f"K {K.shape} and V {V.shape} differ")
        if self.layout is not None and K.shape[0] != len(self.layout):
            raise ShapeError(f"entry has {K.shape[0]} tokens, layout has {len(self.layout)}")
        K.flags.writeable = False
        V.flags.writeable = False
        self.entries[key] = KVEntry(K, V)

    def get(self, key: KVKey) -> KVEntry:
        try:
            entry = self.entries[key]
        except KeyError:
            raise CacheMissError(f"cache miss: {key.describe()} not in {self.stage} store") from None
        self.hits += 1
        return entry

    def keys(self):
        return list(self.entries)

    def nbytes(self) -> int:
        return sum(e.K.nbytes + e.V.nbytes for e in self.entries.values())

    # -- on-disk spill ----------------------------------------------------

    def save(self, directory) -> Path:
        """One raw little-endian file per entry (K then V, float64) plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        for key in sorted(self.entries, key=_key_order):
            entry = self.entries[key]
            name = (
                f"{key.stage}_L{key.layer_id:02d}_{key.attn_type}_{key.branch}"
                f"_b{key.block_order:02d}_t{time_hex(key.eval_time)}.kv"
            )
            data = entry.K.astype("<f8").tobytes() + entry.V.astype("<f8").tobytes()
            (directory / name).write_bytes(data)
            records.append(
                {
                    "file": name,
                    "stage": key.stage,
                    "eval_time_hex": time_hex(key.eval_time),
                    "eval_time": key.eval_time,
                    "layer_id": key.layer_id,
                    "attn_type": key.attn_type,
                    "block_order": key.block_order,
                    "branch": key.branch,
                    "shape": list(entry.K.shape),
                    "sha256": sha256_bytes(data),
                }
            )
        layout = None if self.layout is None else self.layout.tolist()
        manifest = {"stage": self.stage, "dtype": "<f8", "layout": layout, "entries": records}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "KVCacheStore":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{directory}: cannot read KV manifest ({exc})") from exc
        layout = manifest.get("layout")
        store = cls(manifest["stage"], None if layout is None else np.asarray(layout, dtype=np.int64))
        for rec in manifest["entries"]:
            data = (directory / rec["file"]).read_bytes()
            if sha256_bytes(data) != rec["sha256"]:
                raise FormatError(f"{rec['file']}: checksum mismatch")
            shape = tuple(rec["shape"])
            flat = np.frombuffer(data, dtype="<f8")
            half = flat.size // 2
            if half != int(np.prod(shape)) or flat.size != 2 * half:
                raise FormatError(f"{rec['file']}: size does not match shape {shape}")
            t = struct.unpack(">d", bytes.fromhex(rec["eval_time_hex"]))[0]
            key = KVKey(
                rec["stage"], t, rec["layer_id"], rec["attn_type"], rec["block_order"], rec["branch"]
            )
            store.put(key, flat[:half].reshape(shape), flat[half:].reshape(shape))
        return store


def _key_order(key: KVKey):
    return (key.eval_time, key.branch, key.block_order, key.layer_id, key.attn_type)


def _frozen_layout(layout) -> np.ndarray:
    arr = np.array(layout, dtype=np.int64).reshape(-1, 3)
    arr.flags.writeable = False
    return arr


def replace_kv(K_new, V_new, K_cache, V_cache, token_mask) -> tuple[np.ndarray, np.ndarray]:
    """Per-token blend ``W * new + (1 - W) * cache``, broadcast over the trailing axes.

    Rows with ``W == 1`` or ``W == 0`` are copied rather than computed, so binary
    masks select rows bit for bit.
    """
    K_new, V_new = np.asarray(K_new), np.asarray(V_new)
    K_cache, V_cache = np.asarray(K_cache), np.asarray(V_cache)
    if not (K_new.shape == V_new.shape == K_cache.shape == V_cache.shape):
        raise ShapeError(
            f"replace_kv shapes differ: {K_new.shape}, {V_new.shape}, {K_cache.shape}, {V_cache.shape}"
        )
    w = np.asarray(token_mask, dtype=np.float64).reshape(-1)
    if len(w) != K_new.shape[0]:
        raise ShapeError(f"token mask has {len(w)} entries for {K_new.shape[0]} tokens")
    if np.any((w < 0) | (w > 1)):
        raise ValueError("token mask weights must lie in [0, 1]")
    wb = w.reshape((-1,) + (1,) * (K_new.ndim - 1))
    return _blend(K_new, K_cache, wb), _blend(V_new, V_cache, wb)


def _blend(new, cache, w):
    mixed = w * new + (1.0 - w) * cache
    return np.where(w == 1.0, new, np.where(w == 0.0, cache, mixed))


def align_to_layout(entry: KVEntry, store_layout: np.ndarray, layout: np.ndarray, token_mask) -> KVEntry:
    """Re-index a cached entry onto another token layout by coordinate.

    Tokens missing from the cached layout get zero rows; they must be fully
    edited (``W == 1``), otherwise there is nothing to preserve them with.
    """
    idx = index_of(layout, store_layout)
    w = np.asarray(token_mask, dtype=np.float64).reshape(-1)
    missing = idx < 0
    if np.any(missing & (w < 1.0)):
        bad = np.asarray(layout)[missing & (w < 1.0)][0]
        raise AlignmentError(
            f"preserved token at {tuple(int(v) for v in bad)} has no cached K/V row"
        )
    shape = (len(idx),) + entry.K.shape[1:]
    K = np.zeros(shape)
    V = np.zeros(shape)
    K[~missing] = entry.K[idx[~missing]]
    V[~missing] = entry.V[idx[~missing]]
    return KVEntry(K, V)
