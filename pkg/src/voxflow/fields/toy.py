"""A small seeded attention network used as a stand-in denoiser.

Tokens are either patches of a dense grid or the active voxels of a sparse
set. Each token sees its features, a sinusoidal code of its position, a
sinusoidal code of the time and the condition embedding; the network is a
stack of pre-norm self-attention + feed-forward blocks. Self-attention
keys/values pass through an :class:`AttentionHook` so they can be captured
during inversion and injected during editing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import CacheMissError, ParameterError
from ..kvstore import KVCacheStore, KVKey, align_to_layout, replace_kv
from .base import ConditionInput, VelocityField

MAX_DENSE_TOKENS = 1024
HOOK_MODES = ("off", "capture", "inject")


@dataclass
class AttentionHook:
    """Capture/injection settings consulted by every attention layer.

    ``token_mask`` is W (1 = edited token); pass a dict ``{layer: W}`` to vary it
    per layer. ``attn_mask`` is a boolean ``(tokens, tokens)`` matrix of allowed
    query-key pairs. Evaluations at a time listed in ``skip_times`` are not
    injected. ``record``, if a list, receives ``(t, branch, layer, output)`` for
    every attention layer, where ``output`` has shape ``(tokens, heads, head_dim)``.
    """

    mode: str = "off"
    store: KVCacheStore | None = None
    token_mask: np.ndarray | dict | None = None
    attn_mask: np.ndarray | None = None
    skip_times: frozenset = frozenset()
    record: list | None = None

    def __post_init__(self):
        if self.mode not in HOOK_MODES:
            raise ParameterError(f"unknown hook mode {self.mode!r}")
        if self.mode != "off" and self.store is None:
            raise ParameterError(f"hook mode {self.mode!r} needs a KV store")
        if self.attn_mask is not None:
            self.attn_mask = np.asarray(self.attn_mask, dtype=bool)

    @property
    def stage(self) -> str:
        return self.store.stage

    def mask_for(self, layer: int, n_tokens: int) -> np.ndarray:
        w = self.token_mask
        if isinstance(w, dict):
            w = w.get(layer)
        if w is None:
            return np.ones(n_tokens)
        return np.asarray(w, dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    token_grid_side: int = 8
    channels: int = 4
    grid_side: int | None = None
    cond_width: int = 16
    ffn_mult: int = 2
    pos_freqs: int = 4
    time_freqs: int = 4
    out_gain: float = 0.5

    def __post_init__(self):
        if min(self.layers, self.model_dim, self.heads, self.token_grid_side, self.channels) < 1:
            raise ParameterError("toy transformer sizes must be positive")
        if self.model_dim % self.heads:
            raise ParameterError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def side(self) -> int:
        return self.grid_side if self.grid_side is not None else self.token_grid_side


def _sincos(x: np.ndarray, n_freqs: int) -> np.ndarray:
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    ang = x[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _layernorm(h: np.ndarray) -> np.ndarray:
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-5)


class ToyTransformer(VelocityField):
    def __init__(self, config: ToyConfig, seed: int, coords: np.ndarray | None = None, _weights=None):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        side = config.side
        if coords is None:
            n = config.token_grid_side
            if side % n:
                raise ParameterError(f"grid side {side} not divisible by token grid side {n}")
            if n**3 > MAX_DENSE_TOKENS:
                raise ParameterError(f"{n}^3 tokens exceeds the limit of {MAX_DENSE_TOKENS}")
            self.sparse = False
            self.patch = side // n
            self.shape = (side, side, side, config.channels)
            self.token_coords = np.argwhere(np.ones((n, n, n), dtype=bool))
            pos_side = n
        else:
            coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
            self.sparse = True
            self.patch = 1
            self.shape = (len(coords), config.channels)
            self.token_coords = coords
            pos_side = side
        self.token_coords.flags.writeable = False
        self.cond_width = config.cond_width
        self.token_dim = config.channels * self.patch**3
        self._pos = _sincos((self.token_coords + 0.5) / pos_side, config.pos_freqs).reshape(
            len(self.token_coords), -1
        )
        self.w = _weights if _weights is not None else self._init_weights()

    @property
    def n_tokens(self) -> int:
        return len(self.token_coords)

    def _init_weights(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(self.seed)
        d = cfg.model_dim
        d_in = self.token_dim + 6 * cfg.pos_freqs + 2 * cfg.time_freqs + 1 + cfg.cond_width

        def dense(fan_in, fan_out, gain=1.0):
            return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))

        w = {"in": dense(d_in, d), "blocks": []}
        for _ in range(cfg.layers):
            w["blocks"].append(
                {
                    "q": dense(d, d),
                    "k": dense(d, d),
                    "v": dense(d, d),
                    "o": dense(d, d, 0.5),
                    "ff1": dense(d, cfg.ffn_mult * d),
                    "ff1_b": 0.1 * rng.standard_normal(cfg.ffn_mult * d),
                    "ff2": dense(cfg.ffn_mult * d, d, 0.5),
                }
            )
        w["out"] = dense(d, self.token_dim, cfg.out_gain)
        return w

    def with_layout(self, coords) -> "ToyTransformer":
        """Same weights over a different sparse coordinate layout."""
        if not self.sparse:
            raise ParameterError("with_layout applies to sparse-token fields only")
        return ToyTransformer(self.config, self.seed, coords, _weights=self.w)

    # -- token packing ----------------------------------------------------

    def tokens(self, state: np.ndarray) -> np.ndarray:
        if self.sparse:
            return state
        n, p, c = self.config.token_grid_side, self.patch, self.config.channels
        x = state.reshape(n, p, n, p, n, p, c).transpose(0, 2, 4, 1, 3, 5, 6)
        return x.reshape(n**3, p**3 * c)

    def untokens(self, tok: np.ndarray) -> np.ndarray:
        if self.sparse:
            return tok
        n, p, c = self.config.token_grid_side, self.patch, self.config.channels
        x = tok.reshape(n, n, n, p, p, p, c).transpose(0, 3, 1, 4, 2, 5, 6)
        return x.reshape(self.shape)

    # -- forward ----------------------------------------------------------

    def velocity(self, state, t, cond: ConditionInput):
        cfg = self.config
        L = self.n_tokens
        emb = cond.embedding if cond.embedding is not None else np.zeros(cfg.cond_width)
        tcode = np.concatenate([[t], _sincos(np.asarray(t), cfg.time_freqs)])
        inp = np.concatenate(
            [
                self.tokens(state),
                self._pos,
                np.broadcast_to(tcode, (L, len(tcode))),
                np.broadcast_to(emb, (L, cfg.cond_width)),
            ],
            axis=1,
        )
        h = inp @ self.w["in"]
        hook = self.hook
        attn_mask = hook.attn_mask if hook is not None else None
        for layer, blk in enumerate(self.w["blocks"]):
            a = _layernorm(h)
            out = self._attention(a, blk, layer, t, cond.branch, hook, attn_mask)
            h = h + out.reshape(L, -1) @ blk["o"]
            a = _layernorm(h)
            h = h + np.tanh(a @ blk["ff1"] + blk["ff1_b"]) @ blk["ff2"]
        return self.untokens(_layernorm(h) @ self.w["out"])

    def _attention(self, a, blk, layer, t, branch, hook, attn_mask):
        cfg = self.config
        L, H = self.n_tokens, cfg.heads
        hd = cfg.model_dim // H
        q = (a @ blk["q"]).reshape(L, H, hd)
        k = (a @ blk["k"]).reshape(L, H, hd)
        v = (a @ blk["v"]).reshape(L, H, hd)
        if hook is not None and hook.mode != "off":
            key = KVKey(hook.stage, t, layer, "self", layer, branch)
            if hook.mode == "capture":
                hook.store.bind_layout(self.token_coords)
                hook.store.put(key, k, v)
            elif t not in hook.skip_times:
                k, v = self._inject(hook, key, k, v, layer)
        scale = 1.0 / np.sqrt(hd)
        out = np.empty((L, H, hd))
        for head in range(H):
            s = (q[:, head] @ k[:, head].T) * scale
            if attn_mask is not None:
                s = np.where(attn_mask, s, -np.inf)
            s = s - s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            out[:, head] = p @ v[:, head]
        if hook is not None and hook.record is not None:
            hook.record.append((t, branch, layer, out.copy()))
        return out

    def _inject(self, hook, key, k, v, layer):
        store = hook.store
        w = hook.mask_for(layer, self.n_tokens)
        try:
            entry = store.get(key)
        except CacheMissError:
            raise
        if store.layout is not None and not (
            store.layout.shape == self.token_coords.shape and np.array_equal(store.layout, self.token_coords)
        ):
            entry = align_to_layout(entry, store.layout, self.token_coords, w)
        return replace_kv(k, v, entry.K, entry.V, w)


def make_toy_transformer(config: ToyConfig | None = None, seed: int = 0, coords=None) -> ToyTransformer:
    return ToyTransformer(config or ToyConfig(), seed, coords)
